"""Training objectives.

Synthetic supervision:   total = sum ||phi - phi_gt||^2 + lambda * sum ||grad phi||^2
Unsupervised:            total = D(warp(source, phi), target)
                                 + lambda * sum ||grad phi (.) exp(-||grad target||^2)||^2

Both regularizers are plain sums over voxels and tensor entries; the mse
similarity is a mean over voxels.  D is evaluated on the warped source and
the target (not on their difference), the usual reading for correlation
losses.  The edge weighting multiplies each of the 9 displacement-gradient
entries at a voxel by that voxel's scalar weight before squaring.

Tensor functions keep the autograd graph; typed wrappers run in float64 and
return plain floats / LossReport values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import DisplacementField, ModelConfig, ValidationError, Volume, check_same_shape
from .fieldops import spatial_gradient_tensor, warp_channels

Tensor = torch.Tensor

NCC_EPS = 1e-5


@dataclass(frozen=True)
class LossReport:
    """One loss evaluation, split into its two terms."""

    total: float
    similarity_term: float
    regularization_term: float
    lam: float

    def __post_init__(self):
        recon = self.similarity_term + self.lam * self.regularization_term
        scale = max(1.0, abs(self.total))
        if abs(self.total - recon) > 1e-6 * scale:
            raise ValidationError("LossReport total does not equal sim + lam * reg")


# --- tensor kernels ------------------------------------------------------------

def mse_tensor(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean()


def local_ncc_tensor(a: Tensor, b: Tensor, window: int, eps: float = NCC_EPS) -> Tensor:
    """Negative mean of windowed squared cross-correlation over all fully
    contained window positions; lies in [-1, 0]."""
    if window % 2 == 0 or window < 3:
        raise ValidationError(f"ncc window must be odd and >= 3, got {window}")
    if any(s < window for s in a.shape):
        raise ValidationError(f"volume {tuple(a.shape)} smaller than ncc window {window}")
    ones = torch.ones((1, 1, window, window, window), dtype=a.dtype, device=a.device)
    n = float(window ** 3)

    def box(x: Tensor) -> Tensor:
        return torch.nn.functional.conv3d(x[None, None], ones)[0, 0]

    sa, sb = box(a), box(b)
    saa, sbb, sab = box(a * a), box(b * b), box(a * b)
    cross = sab - sa * sb / n
    var_a = torch.clamp(saa - sa * sa / n, min=0.0)
    var_b = torch.clamp(sbb - sb * sb / n, min=0.0)
    cc2 = cross * cross / (var_a * var_b + eps)
    return -cc2.mean()


def smoothness_tensor(phi: Tensor) -> Tensor:
    """Sum of squared finite-difference entries over all voxels/components."""
    grads = spatial_gradient_tensor(phi.permute(3, 0, 1, 2))
    return (grads ** 2).sum()


def edge_weight_tensor(target: Tensor) -> Tensor:
    g = spatial_gradient_tensor(target)
    return torch.exp(-(g ** 2).sum(dim=-1))


def weighted_smoothness_tensor(phi: Tensor, weight: Tensor) -> Tensor:
    grads = spatial_gradient_tensor(phi.permute(3, 0, 1, 2))
    w = weight[None, ..., None]
    return ((grads * w) ** 2).sum()


def loss_synthetic_tensor(phi: Tensor, phi_gt: Tensor, lam: float):
    sim = ((phi - phi_gt) ** 2).sum()
    reg = smoothness_tensor(phi)
    return sim + lam * reg, sim, reg


def loss_unsupervised_tensor(
    source: Tensor,
    target: Tensor,
    phi: Tensor,
    lam: float,
    similarity: str = "mse",
    ncc_window: int = 9,
):
    warped = warp_channels(source[None], phi)[0]
    if similarity == "mse":
        sim = mse_tensor(warped, target)
    elif similarity == "local-ncc":
        sim = local_ncc_tensor(warped, target, ncc_window)
    else:
        raise ValidationError(f"unknown similarity {similarity!r}")
    reg = weighted_smoothness_tensor(phi, edge_weight_tensor(target))
    return sim + lam * reg, sim, reg


# --- typed wrappers ------------------------------------------------------------

def _t(a: np.ndarray) -> Tensor:
    return torch.from_numpy(np.array(a, dtype=np.float64))


def mse(a: Volume, b: Volume) -> float:
    check_same_shape(a, b, "volumes")
    return float(mse_tensor(_t(a.data), _t(b.data)))


def local_ncc(a: Volume, b: Volume, window: int = 9) -> float:
    check_same_shape(a, b, "volumes")
    return float(local_ncc_tensor(_t(a.data), _t(b.data), window))


def smoothness_l2(phi: DisplacementField) -> float:
    return float(smoothness_tensor(_t(phi.data)))


def edge_weight(target: Volume) -> np.ndarray:
    """Per-voxel exp(-||grad I||^2), in (0, 1]; 1 on flat regions."""
    return edge_weight_tensor(_t(target.data)).numpy()


def loss_synthetic(phi: DisplacementField, phi_gt: DisplacementField, lam: float) -> LossReport:
    check_same_shape(phi, phi_gt, "displacement fields")
    total, sim, reg = loss_synthetic_tensor(_t(phi.data), _t(phi_gt.data), lam)
    return LossReport(float(total), float(sim), float(reg), lam)


def loss_unsupervised(
    source: Volume, target: Volume, phi: DisplacementField, cfg: ModelConfig
) -> LossReport:
    check_same_shape(source, target, "volumes")
    if source.shape != phi.shape:
        raise ValidationError(f"field shape {phi.shape} does not match volumes {source.shape}")
    total, sim, reg = loss_unsupervised_tensor(
        _t(source.data),
        _t(target.data),
        _t(phi.data),
        cfg.lambda_unsup,
        similarity=cfg.similarity,
        ncc_window=cfg.ncc_window,
    )
    return LossReport(float(total), float(sim), float(reg), cfg.lambda_unsup)
