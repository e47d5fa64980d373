"""Command line interface.

Subcommands: gen, pretrain, train, register, evaluate, sweep.  Every command
takes --seed; train-like commands also accept --config FILE with key=value
lines (flags given on the command line win over the file).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline, synthdata
from .core import ModelConfig, RecursionConfig
from .network import paper_scale_config, read_checkpoint
from .pipeline import TrainConfig


def _parse_config_file(path: str) -> dict[str, str]:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{i + 1}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_MODEL_KEYS = {
    "base_channels": int,
    "levels": int,
    "heads": int,
    "kernel_size": int,
    "lambda_syn": float,
    "lambda_unsup": float,
    "similarity": str,
    "ncc_window": int,
}
_TRAIN_KEYS = {
    "lr": float,
    "batch_size": int,
    "pretrain_iters": int,
    "finetune_iters": int,
    "seed": int,
    "k_train": int,
    "k_infer": int,
    "synth_amplitude": float,
    "synth_smoothness": float,
    "synth_blobs": int,
    "synth_pool": int,
}


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file; flags override it")
    for key, typ in _MODEL_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=typ, default=None, dest=key)
    for key, typ in _TRAIN_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=typ, default=None, dest=key)
    p.add_argument("--paper-scale", action="store_true", help="use the 0.40e6-parameter preset")
    p.add_argument("--crop", type=int, nargs=3, default=None, metavar=("H", "W", "T"))


def _build_train_config(args, out_dir: str | None) -> TrainConfig:
    values: dict[str, str] = {}
    if args.config:
        values.update(_parse_config_file(args.config))
    for key in (*_MODEL_KEYS, *_TRAIN_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag

    def pick(key, default):
        typ = _MODEL_KEYS.get(key) or _TRAIN_KEYS[key]
        return typ(values[key]) if key in values else default

    base_model = paper_scale_config() if args.paper_scale else ModelConfig()
    model = ModelConfig(
        base_channels=pick("base_channels", base_model.base_channels),
        levels=pick("levels", base_model.levels),
        heads=pick("heads", base_model.heads),
        kernel_size=pick("kernel_size", base_model.kernel_size),
        lambda_syn=pick("lambda_syn", base_model.lambda_syn),
        lambda_unsup=pick("lambda_unsup", base_model.lambda_unsup),
        similarity=pick("similarity", base_model.similarity),
        ncc_window=pick("ncc_window", base_model.ncc_window),
    )
    recursion = RecursionConfig(k_train=pick("k_train", 2), k_infer=pick("k_infer", 3))
    return TrainConfig(
        model=model,
        recursion=recursion,
        lr=pick("lr", 1e-3),
        batch_size=pick("batch_size", 1),
        pretrain_iters=pick("pretrain_iters", 0),
        finetune_iters=pick("finetune_iters", 500),
        seed=pick("seed", 0),
        out_dir=out_dir,
        crop_shape=None if args.crop is None else tuple(args.crop),
        synth_amplitude=pick("synth_amplitude", 3.0),
        synth_smoothness=pick("synth_smoothness", 8.0),
        synth_blobs=pick("synth_blobs", 3),
        synth_pool=pick("synth_pool", 8),
    )


def cmd_gen(args) -> int:
    manifest = synthdata.generate_corpus(
        args.out,
        count=args.count,
        shape=tuple(args.shape),
        n_blobs=args.blobs,
        deform_amplitude=args.amplitude,
        smoothness=args.smoothness,
        seed=args.seed,
    )
    print(f"wrote {args.count} pairs, manifest at {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _build_train_config(args, out_dir=args.out)
    iters = args.iters if args.iters else (cfg.pretrain_iters or 200)
    cfg = replace(cfg, pretrain_iters=iters)
    result = pipeline.pretrain_synthetic(cfg)
    print(f"pretrained {cfg.pretrain_iters} iterations; checkpoint in {args.out}")
    if result.history:
        print(f"loss {result.history[0]['total']:.6g} -> {result.history[-1]['total']:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = _build_train_config(args, out_dir=args.out)
    if args.iters:
        cfg = replace(cfg, finetune_iters=args.iters)
    init = read_checkpoint(args.init) if args.init else None
    result = pipeline.finetune(cfg, args.manifest, init=init)
    print(f"trained {cfg.finetune_iters} iterations; checkpoint in {args.out}")
    if result.history:
        print(f"loss {result.history[0]['total']:.6g} -> {result.history[-1]['total']:.6g}")
    return 0


def cmd_register(args) -> int:
    params = read_checkpoint(args.checkpoint)
    source = synthdata.read_volume(args.source)
    target = synthdata.read_volume(args.target)
    phi, warped = pipeline.register(source, target, params, args.k_infer)
    if args.out_ddf:
        synthdata.write_ddf(phi, args.out_ddf)
    if args.out_warped:
        synthdata.write_volume(warped, args.out_warped)
    print(f"registered {args.source} -> {args.target} with k_infer={args.k_infer}")
    return 0


def cmd_evaluate(args) -> int:
    params = read_checkpoint(args.checkpoint)
    rows, mean_row = pipeline.evaluate(args.manifest, params, args.k_infer)
    if args.out:
        pipeline.write_metrics_csv(rows, mean_row, args.out)
    print(
        f"pairs={len(rows)} dsc={mean_row.dsc:.4f} hd={mean_row.hd_mm:.3f}mm "
        f"asd={mean_row.asd_mm:.3f}mm detJ={mean_row.neg_jdet:.2f} tpi={mean_row.seconds:.3f}s"
    )
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_train_config(args, out_dir=None)
    table = pipeline.ablation_sweep(
        cfg,
        k_train_list=args.k_train_list,
        k_infer_list=args.k_infer_list,
        train_manifest=args.train_manifest,
        eval_manifest=args.eval_manifest,
        out_dir=args.out,
    )
    for row in table:
        print(
            f"k_train={row['k_train']} k_infer={row['k_infer']} dsc={row['dsc']:.4f} "
            f"asd={row['asd_mm']:.3f}mm detJ={row['neg_jdet']:.2f} tpi={row['tpi']:.3f}s"
        )
    return 0


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="recureg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a phantom pair corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=[16, 16, 16])
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--amplitude", type=float, default=3.0)
    p.add_argument("--smoothness", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pretrain", help="supervised warm-up on synthetic fields")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="unsupervised training on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint to start from (e.g. pretrained)")
    p.add_argument("--iters", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("register", help="register two volumes with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--k-infer", type=int, default=3)
    p.add_argument("--out-ddf")
    p.add_argument("--out-warped")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k-infer", type=int, default=3)
    p.add_argument("--out", help="write the per-pair metric table (CSV)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="recursion-number ablation (train x infer grid)")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-train-list", type=_int_list, default=[1, 2])
    p.add_argument("--k-infer-list", type=_int_list, default=[1, 2, 3])
    _add_train_flags(p)
    p.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
