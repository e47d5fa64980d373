"""The registration subnetwork: a weight-sharing Siamese encoder with mutual
attention at the two coarsest levels, and a decoder regressing a residual
dense displacement field at full resolution.

Blocks follow the config's kernel size and dilation pattern: each block runs
two convolutions with dilations (atrous_rates[0], atrous_rates[-1]) and a
LeakyReLU(0.2) after each, plus a linear residual path; downsampling is a
parameter-free stride-2 average pool, upsampling trilinear interpolation.
The output head is zero-initialized so an untrained model predicts the
identity transform, which the recursion relies on.

Checkpoints are ASCII headers (config + tensor table) followed by raw
little-endian float32 payloads; writes are byte-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import exchange_tensor
from .core import (
    DisplacementField,
    FeatureGrid,
    ModelConfig,
    ModelParams,
    ValidationError,
    Volume,
    check_registration_shape,
    check_same_shape,
)
from .fileio import BadMagicError, TruncatedPayloadError, check_dims, decode_f32, encode_f32, read_header_line

Tensor = torch.Tensor

CKPT_MAGIC = "netckpt"
CKPT_VERSION = 1

_LEAKY_SLOPE = 0.2


def _act(x: Tensor) -> Tensor:
    return F.leaky_relu(x, negative_slope=_LEAKY_SLOPE)


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Encoder features, one grid per level; level l has dims halved l times
    and channel counts never decrease with depth."""

    levels: tuple[FeatureGrid, ...]

    def __post_init__(self):
        if not self.levels:
            raise ValidationError("a feature pyramid needs at least one level")
        levels = tuple(self.levels)
        full = levels[0].spatial_shape
        prev_channels = 0
        for l, grid in enumerate(levels):
            want = tuple(s // 2 ** l for s in full)
            if grid.spatial_shape != want:
                raise ValidationError(
                    f"level {l} has dims {grid.spatial_shape}, expected {want}"
                )
            if grid.channels < prev_channels:
                raise ValidationError("channel counts must be non-decreasing with depth")
            prev_channels = grid.channels
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> FeatureGrid:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


def _init_conv(conv: nn.Conv3d, gain: str = "leaky_relu") -> nn.Conv3d:
    """Variance-preserving init: without normalization layers the default
    torch init attenuates the input-dependent signal geometrically with
    depth, which starves the zero-initialized head of information."""
    nn.init.kaiming_normal_(conv.weight, a=_LEAKY_SLOPE, nonlinearity=gain)
    nn.init.zeros_(conv.bias)
    return conv


class ResDownBlock(nn.Module):
    """Two dilated convolutions with a residual skip, then 2x average-pool."""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilations: tuple[int, int]):
        super().__init__()
        d1, d2 = dilations
        k = kernel
        self.conv1 = _init_conv(nn.Conv3d(c_in, c_out, k, padding=d1 * (k // 2), dilation=d1))
        self.conv2 = _init_conv(nn.Conv3d(c_out, c_out, k, padding=d2 * (k // 2), dilation=d2))
        self.skip = _init_conv(nn.Conv3d(c_in, c_out, 1), gain="linear") if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        if any(s % 2 != 0 for s in x.shape[2:]):
            raise ValidationError(f"res-down needs even spatial dims, got {tuple(x.shape[2:])}")
        y = _act(self.conv1(x))
        y = _act(self.conv2(y))
        r = x if self.skip is None else self.skip(x)
        return F.avg_pool3d(y + r, kernel_size=2, stride=2)


class ResUpBlock(nn.Module):
    """Trilinear 2x upsample, concatenate the skip, two residual convolutions."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, kernel: int, dilations: tuple[int, int]):
        super().__init__()
        d1, d2 = dilations
        k = kernel
        c_cat = c_in + c_skip
        self.conv1 = _init_conv(nn.Conv3d(c_cat, c_out, k, padding=d1 * (k // 2), dilation=d1))
        self.conv2 = _init_conv(nn.Conv3d(c_out, c_out, k, padding=d2 * (k // 2), dilation=d2))
        self.skip = _init_conv(nn.Conv3d(c_cat, c_out, 1), gain="linear")

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if tuple(skip.shape[2:]) != tuple(2 * s for s in x.shape[2:]):
            raise ValidationError(
                f"skip dims {tuple(skip.shape[2:])} must be twice input dims {tuple(x.shape[2:])}"
            )
        up = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        y = torch.cat([up, skip], dim=1)
        z = _act(self.conv1(y))
        z = _act(self.conv2(z))
        return z + self.skip(y)


class MutualAttentionLayer(nn.Module):
    """Shared-projection bidirectional exchange on (1, c, h, w, t) features."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if heads < 1 or channels % heads != 0:
            raise ValidationError(f"{channels} channels do not split over {heads} heads")
        c_head = channels // heads
        std = 1.0 / np.sqrt(channels)
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(heads, c_head, channels).normal_(0.0, std))
        self.w_k = nn.Parameter(torch.empty(heads, c_head, channels).normal_(0.0, std))
        self.w_v = nn.Parameter(torch.empty(heads, c_head, channels).normal_(0.0, std))
        self.w_out = nn.Parameter(torch.empty(channels, heads * c_head).normal_(0.0, std))

    def forward(self, fs: Tensor, ft: Tensor) -> tuple[Tensor, Tensor]:
        shape = fs.shape
        ms = fs.reshape(shape[1], -1)
        mt = ft.reshape(shape[1], -1)
        to_s, to_t = exchange_tensor(
            ms, mt, list(self.w_q), list(self.w_k), list(self.w_v), self.w_out
        )
        return to_s.reshape(shape), to_t.reshape(shape)


class RegistrationSubnet(nn.Module):
    """Regresses the residual displacement aligning a warped source to the target."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel_size
        dil = (cfg.atrous_rates[0], cfg.atrous_rates[-1])
        ch = [cfg.level_channels(l) for l in range(cfg.levels + 1)]

        self.stem = _init_conv(nn.Conv3d(1, ch[0], k, padding=k // 2))
        self.downs = nn.ModuleList(
            [ResDownBlock(ch[l - 1], ch[l], k, dil) for l in range(1, cfg.levels + 1)]
        )

        # mutual attention on the two coarsest encoder levels
        attn_levels = [l for l in (cfg.levels - 1, cfg.levels) if l >= 1] if cfg.heads >= 1 else []
        self.attn = nn.ModuleDict(
            {str(l): MutualAttentionLayer(ch[l], cfg.heads) for l in sorted(set(attn_levels))}
        )

        def stream_ch(l: int) -> int:
            return ch[l] * (2 if str(l) in self.attn else 1)

        ups = []
        c_in = 2 * stream_ch(cfg.levels)
        for l in range(cfg.levels - 1, -1, -1):
            ups.append(ResUpBlock(c_in, 2 * stream_ch(l), ch[l], k, dil))
            c_in = ch[l]
        self.ups = nn.ModuleList(ups)

        self.head = nn.Conv3d(ch[0], 3, k, padding=k // 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def encode_pair(self, a: Tensor, b: Tensor) -> tuple[list[Tensor], list[Tensor]]:
        """Shared-weight pyramids for both (1, 1, H, W, T) inputs; attended
        levels carry the exchanged features concatenated to their own."""
        fa, fb = _act(self.stem(a)), _act(self.stem(b))
        pyr_a, pyr_b = [fa], [fb]
        for l, down in enumerate(self.downs, start=1):
            fa, fb = down(fa), down(fb)
            ga, gb = fa, fb
            if str(l) in self.attn:
                ea, eb = self.attn[str(l)](fa, fb)
                ga = torch.cat([fa, ea], dim=1)
                gb = torch.cat([fb, eb], dim=1)
            pyr_a.append(ga)
            pyr_b.append(gb)
        return pyr_a, pyr_b

    def forward(self, source: Tensor, target: Tensor) -> Tensor:
        """(H, W, T) scalar tensors in, residual (H, W, T, 3) field out."""
        if source.shape != target.shape:
            raise ValidationError(f"shape mismatch {tuple(source.shape)} vs {tuple(target.shape)}")
        check_registration_shape(tuple(source.shape), self.cfg.levels)
        pyr_s, pyr_t = self.encode_pair(source[None, None], target[None, None])
        d = torch.cat([pyr_s[-1], pyr_t[-1]], dim=1)
        for i, up in enumerate(self.ups):
            l = self.cfg.levels - 1 - i
            d = up(d, torch.cat([pyr_s[l], pyr_t[l]], dim=1))
        res = self.head(d)
        return res[0].permute(1, 2, 3, 0)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> RegistrationSubnet:
    """Deterministically initialized subnetwork (same seed, same weights)."""
    torch.manual_seed(seed)
    net = RegistrationSubnet(cfg)
    return net.to(dtype)


def parameter_count(cfg: ModelConfig) -> int:
    """Exact number of scalar weights a model built from cfg will hold."""
    try:
        with torch.device("meta"):
            net = RegistrationSubnet(cfg)
    except Exception:
        net = build_model(cfg)
    return sum(p.numel() for p in net.parameters())


def paper_scale_config(**overrides) -> ModelConfig:
    """Preset whose parameter count sits in the published 0.40e6 band."""
    defaults = dict(base_channels=6, levels=4, heads=2)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def params_from_model(net: RegistrationSubnet) -> ModelParams:
    tensors = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    return ModelParams(config=net.cfg, tensors=tensors)


def model_from_params(params: ModelParams, dtype: torch.dtype = torch.float32) -> RegistrationSubnet:
    net = build_model(params.config, seed=0, dtype=dtype)
    state = {k: torch.from_numpy(np.array(v)).to(dtype) for k, v in params.tensors.items()}
    net.load_state_dict(state, strict=True)
    return net


# --- typed operations ----------------------------------------------------------

def _grid_to_tensor(f: FeatureGrid, like: nn.Module) -> Tensor:
    dtype = next(like.parameters()).dtype
    return torch.from_numpy(np.array(f.data)).to(dtype)[None]


def res_down_block(f: FeatureGrid, block: ResDownBlock) -> FeatureGrid:
    out = block(_grid_to_tensor(f, block))
    return FeatureGrid(out[0].detach().numpy())


def res_up_block(f: FeatureGrid, skip: FeatureGrid, block: ResUpBlock) -> FeatureGrid:
    out = block(_grid_to_tensor(f, block), _grid_to_tensor(skip, block))
    return FeatureGrid(out[0].detach().numpy())


def siamese_encode(a: Volume, b: Volume, net: RegistrationSubnet) -> tuple[FeaturePyramid, FeaturePyramid]:
    """Both feature pyramids (level 0 = full-res stem features)."""
    check_same_shape(a, b, "volumes")
    check_registration_shape(a.shape, net.cfg.levels)
    dtype = next(net.parameters()).dtype
    ta = torch.from_numpy(np.array(a.data)).to(dtype)[None, None]
    tb = torch.from_numpy(np.array(b.data)).to(dtype)[None, None]
    with torch.no_grad():
        pyr_a, pyr_b = net.encode_pair(ta, tb)
    to_grid = lambda t: FeatureGrid(t[0].numpy())
    return (
        FeaturePyramid(tuple(to_grid(t) for t in pyr_a)),
        FeaturePyramid(tuple(to_grid(t) for t in pyr_b)),
    )


def subnet_forward(source_warped: Volume, target: Volume, net: RegistrationSubnet) -> DisplacementField:
    """One refinement stage: the residual field aligning the warped source."""
    check_same_shape(source_warped, target, "volumes")
    dtype = next(net.parameters()).dtype
    ts = torch.from_numpy(np.array(source_warped.data)).to(dtype)
    tt = torch.from_numpy(np.array(target.data)).to(dtype)
    with torch.no_grad():
        res = net(ts, tt)
    return DisplacementField(res.numpy())


# --- checkpoint I/O ------------------------------------------------------------

def _config_header(cfg: ModelConfig) -> str:
    r = cfg.atrous_rates
    return (
        f"base_channels {cfg.base_channels}\n"
        f"levels {cfg.levels}\n"
        f"heads {cfg.heads}\n"
        f"atrous_rates {r[0]} {r[1]} {r[2]}\n"
        f"kernel_size {cfg.kernel_size}\n"
        f"lambda_syn {cfg.lambda_syn!r}\n"
        f"lambda_unsup {cfg.lambda_unsup!r}\n"
        f"similarity {cfg.similarity}\n"
        f"ncc_window {cfg.ncc_window}\n"
    )


def write_checkpoint(params: ModelParams, path) -> None:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}\n", _config_header(params.config)]
    lines.append(f"tensors {len(params.tensors)}\n")
    payload = []
    for name, arr in params.tensors.items():
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.ndim}{' ' + dims if dims else ''}\n")
        payload.append(encode_f32(arr))
    with open(path, "wb") as f:
        f.write("".join(lines).encode("ascii"))
        f.write(b"data\n")
        f.write(b"".join(payload))


def read_checkpoint(path) -> ModelParams:
    what = str(path)
    with open(path, "rb") as f:
        magic = read_header_line(f, what).split()
        if len(magic) != 2 or magic[0] != CKPT_MAGIC:
            raise BadMagicError(f"{what}: not a {CKPT_MAGIC} file")
        if magic[1] != str(CKPT_VERSION):
            raise BadMagicError(f"{what}: unsupported version {magic[1]!r}")

        fields = {}
        for key in (
            "base_channels", "levels", "heads", "atrous_rates", "kernel_size",
            "lambda_syn", "lambda_unsup", "similarity", "ncc_window", "tensors",
        ):
            parts = read_header_line(f, what).split()
            if len(parts) < 2 or parts[0] != key:
                raise BadMagicError(f"{what}: malformed {key!r} header line")
            fields[key] = parts[1:]
        try:
            cfg = ModelConfig(
                base_channels=int(fields["base_channels"][0]),
                levels=int(fields["levels"][0]),
                heads=int(fields["heads"][0]),
                atrous_rates=tuple(int(x) for x in fields["atrous_rates"]),
                kernel_size=int(fields["kernel_size"][0]),
                lambda_syn=float(fields["lambda_syn"][0]),
                lambda_unsup=float(fields["lambda_unsup"][0]),
                similarity=fields["similarity"][0],
                ncc_window=int(fields["ncc_window"][0]),
            )
            n_tensors = int(fields["tensors"][0])
        except ValueError as e:
            raise BadMagicError(f"{what}: bad config header: {e}") from e
        if n_tensors < 0 or n_tensors > 100_000:
            raise BadMagicError(f"{what}: implausible tensor count {n_tensors}")

        specs = []
        for _ in range(n_tensors):
            parts = read_header_line(f, what).split()
            if len(parts) < 3 or parts[0] != "tensor":
                raise BadMagicError(f"{what}: malformed tensor line")
            name, ndim = parts[1], int(parts[2])
            if len(parts) != 3 + ndim:
                raise BadMagicError(f"{what}: tensor {name!r} dim list mismatch")
            shape = tuple(int(x) for x in parts[3:])
            if ndim > 0:
                shape = check_dims(shape, f"{what}:{name}")
            specs.append((name, shape))
        if read_header_line(f, what) != "data":
            raise BadMagicError(f"{what}: missing data marker")

        raw = f.read()
    tensors = {}
    offset = 0
    for name, shape in specs:
        n = int(np.prod(shape)) if shape else 1
        if len(raw) - offset < 4 * n:
            raise TruncatedPayloadError(f"{what}: payload ends inside tensor {name!r}")
        tensors[name] = decode_f32(raw[offset : offset + 4 * n], shape, f"{what}:{name}")
        offset += 4 * n
    return ModelParams(config=cfg, tensors=tensors)
