"""Recursive training and inference.

Registration runs the shared subnetwork K times; each stage sees the source
warped by the field accumulated so far and regresses a residual that is
folded in by composition.  Training unrolls k_train stages, backpropagates
through warps and compositions end to end, and optimizes with a functional
Adam.  Everything is deterministic given the seeds: data order comes from a
dedicated numpy generator, weight init from torch.manual_seed, and the
training loop pins torch to one CPU thread.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import fieldops, synthdata
from .core import (
    DisplacementField,
    LabelMask,
    ModelConfig,
    ModelParams,
    RecursionConfig,
    Shape3,
    ValidationError,
    Volume,
)
from .losses import loss_synthetic_tensor, loss_unsupervised_tensor
from .metrics import MetricRow, asd, dice, hausdorff, rows_to_csv
from .network import RegistrationSubnet, build_model, model_from_params, params_from_model, write_checkpoint
from .synthdata import PhantomPair

Tensor = torch.Tensor


def _f32(a: np.ndarray) -> Tensor:
    return torch.from_numpy(np.array(a, dtype=np.float32))


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs; flags and config files mirror these fields."""

    model: ModelConfig = field(default_factory=ModelConfig)
    recursion: RecursionConfig = field(default_factory=RecursionConfig)
    lr: float = 1e-3
    lr_final: float = 0.0  # if > 0, hold lr for 30% of the run then decay linearly to this
    grad_clip: float = 0.0  # global grad-norm cap; 0 disables
    batch_size: int = 1  # paper scale used 3; desk scale 1-2
    pretrain_iters: int = 0
    finetune_iters: int = 500
    seed: int = 0
    out_dir: str | None = None
    crop_shape: Shape3 | None = None
    train_manifest: str | None = None
    eval_manifest: str | None = None
    # synthetic-supervision data (pretraining)
    synth_shape: Shape3 = (16, 16, 16)
    synth_blobs: int = 3
    synth_amplitude: float = 3.0
    synth_smoothness: float = 8.0
    synth_pool: int = 8
    synth_amplitude_spread: bool = True  # spread field amplitudes over [0, synth_amplitude]
    # fraction of pretraining spent on pure-translation fields first; their
    # diverse directions cannot be fit by an input-blind constant field, so
    # the encoder pathway is forced awake before general fields arrive
    synth_translation_warmup: float = 0.3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.pretrain_iters < 0 or self.finetune_iters < 0:
            raise ValidationError("iteration counts must be >= 0")


@dataclass(frozen=True)
class OptimizerState:
    """Adam moment accumulators; shapes mirror the parameters."""

    m: dict[str, Tensor]
    v: dict[str, Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step < 0:
            raise ValidationError("step must be >= 0")


@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    history: tuple[dict, ...]


def init_optimizer_state(params: dict[str, Tensor]) -> OptimizerState:
    zeros = lambda: {k: torch.zeros_like(p) for k, p in params.items()}
    return OptimizerState(m=zeros(), v=zeros())


def adam_step(
    params: dict[str, Tensor], grads: dict[str, Tensor], state: OptimizerState, lr: float
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update; pure function of its inputs."""
    if set(params) != set(grads):
        raise ValidationError("params and grads must hold the same names")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValidationError(f"shape mismatch for parameter {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - lr * m_hat / (v_hat.sqrt() + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


# --- recursive registration ----------------------------------------------------

def register_tensors(net: RegistrationSubnet, source: Tensor, target: Tensor, k: int) -> Tensor:
    """Unrolled recursion on raw (H, W, T) tensors; returns the composed field.

    Keeps the autograd graph across all stages (training backpropagates
    through every warp and composition).
    """
    if k < 1:
        raise ValidationError("recursion count must be >= 1")
    phi = torch.zeros((*source.shape, 3), dtype=source.dtype, device=source.device)
    for _ in range(k):
        warped = fieldops.warp_channels(source[None], phi)[0]
        residual = net(warped, target)
        phi = fieldops.compose_fields(phi, residual)
    return phi


def register(
    source: Volume, target: Volume, params: ModelParams, k_infer: int
) -> tuple[DisplacementField, Volume]:
    """Estimate the field aligning source to target, and the warped source."""
    net = model_from_params(params)
    return register_with_net(source, target, net, k_infer)


def register_with_net(
    source: Volume, target: Volume, net: RegistrationSubnet, k_infer: int
) -> tuple[DisplacementField, Volume]:
    if source.shape != target.shape:
        raise ValidationError(f"shape mismatch {source.shape} vs {target.shape}")
    dtype = next(net.parameters()).dtype
    ts = torch.from_numpy(np.array(source.data)).to(dtype)
    tt = torch.from_numpy(np.array(target.data)).to(dtype)
    with torch.no_grad():
        phi_t = register_tensors(net, ts, tt, k_infer)
    phi = DisplacementField(phi_t.numpy())
    return phi, fieldops.warp(source, phi)


# --- training ------------------------------------------------------------------

def _lr_at(cfg: TrainConfig, i: int, iters: int) -> float:
    """Constant lr, or hold for 30% of the run then decay linearly to lr_final."""
    if cfg.lr_final <= 0 or iters <= 1:
        return cfg.lr
    hold = int(0.3 * iters)
    if i < hold:
        return cfg.lr
    frac = (i - hold) / max(1, iters - 1 - hold)
    return cfg.lr + (cfg.lr_final - cfg.lr) * frac


def _log_line(entry: dict) -> str:
    parts = [f"iter={entry['iter']}"]
    for key in ("total", "sim", "reg"):
        parts.append(f"{key}={entry[key]:.9g}")
    parts.append(f"wall={entry['wall']:.3f}")
    return " ".join(parts)


def _train_loop(net: RegistrationSubnet, cfg: TrainConfig, iters: int, batch_fn, loss_fn, tag: str):
    """Shared engine: batch_fn(i) yields a list of items, loss_fn(item) a
    (total, sim, reg) tensor triple averaged over the batch."""
    torch.set_num_threads(1)
    params = dict(net.named_parameters())
    state = init_optimizer_state({k: p.detach() for k, p in params.items()})
    history = []

    out_dir = Path(cfg.out_dir) if cfg.out_dir is not None else None
    log_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / f"{tag}_log.txt", "w")
    cadence = max(1, iters // 10)

    t_start = time.perf_counter()
    try:
        for i in range(iters):
            for p in params.values():
                if p.grad is not None:
                    p.grad = None
            totals, sims, regs = [], [], []
            batch = batch_fn(i)
            for item in batch:
                total, sim, reg = loss_fn(item)
                totals.append(total)
                sims.append(float(sim.detach()))
                regs.append(float(reg.detach()))
            loss = torch.stack(totals).mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"{tag}: non-finite loss {float(loss.detach())!r} at iteration {i} "
                    f"(sim={sims}, reg={regs}); aborting"
                )
            entry = {
                "iter": i,
                "total": float(loss.detach()),
                "sim": float(np.mean(sims)),
                "reg": float(np.mean(regs)),
                "wall": time.perf_counter() - t_start,
            }
            history.append(entry)
            if log_f is not None:
                log_f.write(_log_line(entry) + "\n")

            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params.values(), cfg.grad_clip)
            grads = {k: p.grad if p.grad is not None else torch.zeros_like(p) for k, p in params.items()}
            lr_i = _lr_at(cfg, i, iters)
            new_vals, state = adam_step({k: p.detach() for k, p in params.items()}, grads, state, lr_i)
            with torch.no_grad():
                for k, p in params.items():
                    p.copy_(new_vals[k])

            if out_dir is not None and ((i + 1) % cadence == 0 or i + 1 == iters):
                write_checkpoint(params_from_model(net), out_dir / f"{tag}_{i + 1:06d}.ckpt")
    finally:
        if log_f is not None:
            log_f.close()
    return history


def pretrain_synthetic(cfg: TrainConfig) -> TrainResult:
    """Supervised warm-up on generated fields (known ground truth).

    The corpus is finite (synth_pool sources x synth_pool fields, built up
    front from the seed) so a desk-scale iteration budget revisits samples
    instead of chasing an endless stream.
    """
    net = build_model(cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.synth_shape

    def make_item(src, gt_data):
        gt_t = _f32(gt_data)
        with torch.no_grad():
            tgt = fieldops.warp_channels(src[None], gt_t)[0]
        return src, tgt, gt_t

    corpus, translations = [], []
    trans_rng = np.random.default_rng(cfg.seed + 30_000)
    for i in range(cfg.synth_pool):
        vol, _ = synthdata.gen_phantom_volume(shape, cfg.synth_blobs, seed=cfg.seed + 10_000 + i)
        src = _f32(vol.data)
        for j in range(cfg.synth_pool):
            # spread mode: amplitudes span [0, synth_amplitude] so small
            # displacements bootstrap input sensitivity and aligned pairs
            # teach later recursion stages to sit still
            if cfg.synth_amplitude_spread:
                amp = cfg.synth_amplitude * j / max(1, cfg.synth_pool - 1)
            else:
                amp = cfg.synth_amplitude
            gt = synthdata.gen_smooth_ddf(
                shape, amp, cfg.synth_smoothness,
                seed=cfg.seed + 20_000 + 101 * i + j,
            )
            corpus.append(make_item(src, gt.data))
        for j in range(cfg.synth_pool):
            direction = trans_rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            mag = cfg.synth_amplitude * (0.4 + 0.6 * j / max(1, cfg.synth_pool - 1))
            field = np.broadcast_to(mag * direction, (*shape, 3)).astype(np.float32)
            translations.append(make_item(src, np.array(field, dtype=np.float64)))

    warmup = int(cfg.synth_translation_warmup * cfg.pretrain_iters)

    def batch_fn(i: int):
        bank = translations if i < warmup else corpus + translations
        return [bank[int(rng.integers(len(bank)))] for _ in range(cfg.batch_size)]

    def loss_fn(item):
        src, tgt, gt_t = item
        phi = register_tensors(net, src, tgt, cfg.recursion.k_train)
        return loss_synthetic_tensor(phi, gt_t, cfg.model.lambda_syn)

    history = _train_loop(net, cfg, cfg.pretrain_iters, batch_fn, loss_fn, tag="pretrain")
    params = params_from_model(net)
    if cfg.out_dir is not None:
        write_checkpoint(params, Path(cfg.out_dir) / "pretrained.ckpt")
    return TrainResult(params=params, history=tuple(history))


def _resolve_pairs(manifest) -> list[PhantomPair]:
    if isinstance(manifest, (str, Path)):
        return [synthdata.load_pair(r) for r in synthdata.read_manifest(manifest)]
    pairs = list(manifest)
    if not pairs:
        raise ValidationError("no training pairs supplied")
    return pairs


def finetune(cfg: TrainConfig, manifest, init: ModelParams | None = None) -> TrainResult:
    """Unsupervised training on image pairs from a manifest (or pair list)."""
    pairs = _resolve_pairs(manifest)
    if init is not None:
        net = model_from_params(init)
    else:
        net = build_model(cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    cache = [
        (_f32(p.source.data), _f32(p.target.data))
        for p in pairs
    ]

    def batch_fn(_i: int):
        items = []
        for _ in range(cfg.batch_size):
            j = int(rng.integers(len(pairs)))
            if cfg.crop_shape is not None:
                cropped = synthdata.random_crop(pairs[j], cfg.crop_shape, seed=int(rng.integers(2 ** 31)))
                items.append(
(_f32(cropped.source.data), _f32(cropped.target.data))
                )
            else:
                items.append(cache[j])
        return items

    def loss_fn(item):
        src, tgt = item
        phi = register_tensors(net, src, tgt, cfg.recursion.k_train)
        return loss_unsupervised_tensor(
            src, tgt, phi, cfg.model.lambda_unsup,
            similarity=cfg.model.similarity, ncc_window=cfg.model.ncc_window,
        )

    history = _train_loop(net, cfg, cfg.finetune_iters, batch_fn, loss_fn, tag="train")
    params = params_from_model(net)
    if cfg.out_dir is not None:
        write_checkpoint(params, Path(cfg.out_dir) / "model.ckpt")
    return TrainResult(params=params, history=tuple(history))


def train(cfg: TrainConfig, manifest=None) -> TrainResult:
    """Full protocol: optional synthetic pretraining, then unsupervised finetuning."""
    init = None
    if cfg.pretrain_iters > 0:
        init = pretrain_synthetic(cfg).params
    if cfg.finetune_iters > 0:
        source = manifest if manifest is not None else cfg.train_manifest
        if source is None:
            raise ValidationError("finetuning needs a manifest")
        return finetune(cfg, source, init=init)
    if init is None:
        init = params_from_model(build_model(cfg.model, seed=cfg.seed))
    return TrainResult(params=init, history=())


# --- evaluation ----------------------------------------------------------------

def _pair_metrics(pair: PhantomPair, phi: DisplacementField, seconds: float) -> MetricRow:
    warped_labels = fieldops.warp_nearest(pair.source_labels, phi)
    spacing = pair.target.spacing
    labels = [int(v) for v in np.unique(pair.target_labels) if v != 0]
    per_label = {}
    for lab in labels:
        a = LabelMask((warped_labels == lab).astype(np.uint8))
        b = LabelMask((pair.target_labels == lab).astype(np.uint8))
        d = dice(a, b)
        if a.foreground_count > 0 and b.foreground_count > 0:
            h, s = hausdorff(a, b, spacing), asd(a, b, spacing)
        else:
            h, s = float("nan"), float("nan")
        per_label[lab] = (d, h, s)

    dscs = [m[0] for m in per_label.values()]
    hds = [m[1] for m in per_label.values() if np.isfinite(m[1])]
    asds = [m[2] for m in per_label.values() if np.isfinite(m[2])]
    neg = fieldops.count_negative_jacobian(phi, pair.target_mask)
    return MetricRow(
        dsc=float(np.mean(dscs)) if dscs else 0.0,
        hd_mm=float(np.mean(hds)) if hds else 0.0,
        asd_mm=float(np.mean(asds)) if asds else 0.0,
        neg_jdet=neg,
        per_label=per_label,
        pair=pair.name,
        seconds=seconds,
    )


def pre_registration_metrics(pair: PhantomPair) -> MetricRow:
    """Baseline overlap of the unregistered pair (identity field)."""
    return _pair_metrics(pair, DisplacementField.identity(pair.shape), seconds=0.0)


def mean_metric_row(rows: Sequence[MetricRow]) -> MetricRow:
    if not rows:
        raise ValidationError("cannot average zero metric rows")
    labels = sorted({lab for r in rows for lab in r.per_label})
    per_label = {}
    for lab in labels:
        vals = [r.per_label[lab] for r in rows if lab in r.per_label]
        cols = []
        for c in range(3):
            finite = [v[c] for v in vals if np.isfinite(v[c])]
            cols.append(float(np.mean(finite)) if finite else float("nan"))
        per_label[lab] = tuple(cols)
    return MetricRow(
        dsc=float(np.mean([r.dsc for r in rows])),
        hd_mm=float(np.mean([r.hd_mm for r in rows])),
        asd_mm=float(np.mean([r.asd_mm for r in rows])),
        neg_jdet=float(np.mean([r.neg_jdet for r in rows])),
        per_label=per_label,
        pair="mean",
        seconds=float(np.mean([r.seconds for r in rows])),
    )


def evaluate(
    manifest,
    params: ModelParams,
    k_infer: int,
    override_field: DisplacementField | None = None,
) -> tuple[list[MetricRow], MetricRow]:
    """Register every pair and score it; returns (per-pair rows, mean row).

    Wall-clock seconds per pair are measured and reported, never asserted.
    ``override_field`` is a debug hook that scores a fixed field instead of
    the model prediction.
    """
    pairs = _resolve_pairs(manifest)
    net = model_from_params(params)
    rows = []
    for pair in pairs:
        t0 = time.perf_counter()
        phi, _warped = register_with_net(pair.source, pair.target, net, k_infer)
        seconds = time.perf_counter() - t0
        if override_field is not None:
            phi = override_field
        rows.append(_pair_metrics(pair, phi, seconds))
    return rows, mean_metric_row(rows)


# --- ablation over recursion settings -------------------------------------------

def ablation_sweep(
    cfg: TrainConfig,
    k_train_list: Sequence[int],
    k_infer_list: Sequence[int],
    train_manifest=None,
    eval_manifest=None,
    out_dir=None,
):
    """Train one model per k_train and evaluate it at every k_infer.

    Returns a list of {k_train, k_infer, dsc, hd_mm, asd_mm, neg_jdet, tpi}
    dicts; when out_dir is given, writes sweep.csv plus a plot-data table.
    """
    if not k_train_list or not k_infer_list:
        raise ValidationError("sweep lists must be nonempty")
    train_src = train_manifest if train_manifest is not None else cfg.train_manifest
    eval_src = eval_manifest if eval_manifest is not None else cfg.eval_manifest
    if train_src is None or eval_src is None:
        raise ValidationError("sweep needs train and eval manifests")
    eval_pairs = _resolve_pairs(eval_src)

    table = []
    for k_train in k_train_list:
        run_cfg = replace(
            cfg,
            recursion=RecursionConfig(k_train=int(k_train), k_infer=int(max(k_infer_list))),
            out_dir=None if out_dir is None else str(Path(out_dir) / f"ktrain{k_train}"),
        )
        params = train(run_cfg, manifest=train_src).params
        for k_infer in k_infer_list:
            _rows, mean_row = evaluate(eval_pairs, params, int(k_infer))
            table.append(
                {
                    "k_train": int(k_train),
                    "k_infer": int(k_infer),
                    "dsc": mean_row.dsc,
                    "hd_mm": mean_row.hd_mm,
                    "asd_mm": mean_row.asd_mm,
                    "neg_jdet": mean_row.neg_jdet,
                    "tpi": mean_row.seconds,
                }
            )

    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        cols = ("k_train", "k_infer", "dsc", "hd_mm", "asd_mm", "neg_jdet", "tpi")
        lines = [",".join(cols)]
        for row in table:
            lines.append(",".join(f"{row[c]:.9g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
        (d / "sweep.csv").write_text("\n".join(lines) + "\n")
        plot = ["\t".join(cols)]
        for row in table:
            plot.append("\t".join(f"{row[c]:.9g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
        (d / "sweep_plotdata.tsv").write_text("\n".join(plot) + "\n")
    return table


def write_metrics_csv(rows: Sequence[MetricRow], mean_row: MetricRow, path) -> None:
    Path(path).write_text(rows_to_csv(rows, mean_row))
