"""Shared domain types and validation helpers.

Array conventions used across the package:

* Scalar grids have shape ``(H, W, T)``; vector grids append a trailing
  component axis, ``(H, W, T, 3)``, where component ``a`` displaces along
  spatial axis ``a``.
* Memory layout is row-major (C order) with the last spatial axis varying
  fastest.  Every flatten and every serialization in the package relies on
  this one convention.
* Displacements are stored in voxel units.  ``spacing`` (mm per voxel) is
  metadata; only the surface-distance metrics convert to millimetres.

All types are immutable values: construction validates, the wrapped arrays
are read-only copies, and instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

Shape3 = tuple[int, int, int]

SIMILARITY_CHOICES = ("local-ncc", "mse")


class ValidationError(ValueError):
    """Construction of a domain type from invalid data."""


def _frozen_array(a, dtype, name: str) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} contains non-finite values")
    out.flags.writeable = False
    return out


def _check_spacing(spacing) -> tuple[float, float, float]:
    s = tuple(float(x) for x in spacing)
    if len(s) != 3 or any(x <= 0 or not np.isfinite(x) for x in s):
        raise ValidationError(f"spacing must be 3 positive finite values, got {spacing!r}")
    return s


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D intensity grid of shape (H, W, T).

    Intensities are arbitrary finite reals; after :func:`synthdata.normalize_volume`
    they lie in [0, 1].  ``spacing`` is mm per voxel along each axis.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64, "Volume.data")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"Volume.data must be (H, W, T) with positive dims, got {arr.shape}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> Shape3:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement vectors, shape (H, W, T, 3), in voxel units.

    The all-zero field is the identity transform.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64, "DisplacementField.data")
        if arr.ndim != 4 or arr.shape[-1] != 3 or min(arr.shape[:3]) < 1:
            raise ValidationError(f"DisplacementField.data must be (H, W, T, 3), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @classmethod
    def identity(cls, shape: Shape3) -> "DisplacementField":
        return cls(np.zeros((*shape, 3)))

    @property
    def shape(self) -> Shape3:
        return self.data.shape[:3]  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Multi-channel feature map of shape (c, h, w, t)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64, "FeatureGrid.data")
        if arr.ndim != 4 or arr.shape[0] < 1 or min(arr.shape[1:]) < 1:
            raise ValidationError(f"FeatureGrid.data must be (c, h, w, t) with c >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> Shape3:
        return self.data.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class IndicatorMatrix:
    """Attention weights between two flattened grids.

    Rows index key positions, columns index query positions; every column is
    a probability distribution over keys (sums to 1 within 1e-5).
    """

    data: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.data, np.float64, "IndicatorMatrix.data")
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ValidationError(f"IndicatorMatrix.data must be a 2D matrix, got {arr.shape}")
        if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
            raise ValidationError("IndicatorMatrix entries must lie in [0, 1]")
        col_sums = arr.sum(axis=0)
        if np.max(np.abs(col_sums - 1.0)) > 1e-5:
            raise ValidationError("IndicatorMatrix columns must sum to 1 within 1e-5")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Binary region of shape (H, W, T); 1 marks tissue/organ voxels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, order="C", copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"LabelMask.data must be (H, W, T), got {arr.shape}")
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValidationError("LabelMask values must be 0 or 1")
        arr = arr.astype(np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Shape3:
        return self.data.shape  # type: ignore[return-value]

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss hyperparameters of the registration subnetwork."""

    base_channels: int = 8
    levels: int = 4
    heads: int = 2
    atrous_rates: tuple[int, int, int] = (1, 1, 3)
    kernel_size: int = 3
    lambda_syn: float = 1.0
    lambda_unsup: float = 1.0
    similarity: str = "local-ncc"
    ncc_window: int = 9

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        if self.levels < 1:
            raise ValidationError("levels must be >= 1")
        if self.heads < 0:
            raise ValidationError("heads must be >= 0")
        rates = tuple(int(r) for r in self.atrous_rates)
        if len(rates) != 3 or any(r < 1 for r in rates):
            raise ValidationError("atrous_rates must be 3 positive ints")
        object.__setattr__(self, "atrous_rates", rates)
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError("kernel_size must be odd and >= 1")
        if self.lambda_syn < 0 or self.lambda_unsup < 0:
            raise ValidationError("regularization weights must be >= 0")
        if self.similarity not in SIMILARITY_CHOICES:
            raise ValidationError(f"similarity must be one of {SIMILARITY_CHOICES}")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValidationError("ncc_window must be odd and >= 3")

    def level_channels(self, level: int) -> int:
        """Channels produced by encoder level ``level`` (0 = stem)."""
        if level == 0:
            return self.base_channels
        return self.base_channels * 2 ** (level - 1)


@dataclass(frozen=True)
class RecursionConfig:
    """How many recursive refinement stages to unroll."""

    k_train: int = 2
    k_infer: int = 3

    def __post_init__(self):
        if self.k_train < 1 or self.k_infer < 1:
            raise ValidationError("k_train and k_infer must be >= 1")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Named weight tensors of the registration subnetwork (float32).

    Tensor order is the network's registration order and is preserved by
    checkpoint serialization, which is byte-deterministic.
    """

    config: ModelConfig
    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen: dict[str, np.ndarray] = {}
        for name, t in self.tensors.items():
            arr = np.array(t, dtype=np.float32, order="C", copy=True)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"parameter {name!r} contains non-finite values")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    @property
    def total_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def flatten_features(f: FeatureGrid) -> tuple[np.ndarray, Shape3]:
    """Flatten (c, h, w, t) to a (c, n') matrix, n' = h*w*t.

    Column j holds the feature vector of the j-th voxel in C order (last axis
    fastest).  The returned spatial shape is the descriptor that makes
    :func:`unflatten_features` an exact inverse.
    """
    c = f.channels
    return f.data.reshape(c, -1).copy(), f.spatial_shape


def unflatten_features(matrix: np.ndarray, spatial_shape: Shape3) -> FeatureGrid:
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2:
        raise ValidationError("feature matrix must be 2D (c, n')")
    n = int(np.prod(spatial_shape))
    if mat.shape[1] != n:
        raise ValidationError(f"matrix has {mat.shape[1]} columns, expected {n} for {spatial_shape}")
    return FeatureGrid(mat.reshape(mat.shape[0], *spatial_shape))


# --- input validation helpers -------------------------------------------------

def check_same_shape(a, b, what: str = "inputs") -> Shape3:
    if a.shape != b.shape:
        raise ValidationError(f"{what} must share a shape, got {a.shape} vs {b.shape}")
    return a.shape


def check_field_matches(v: Volume, phi: DisplacementField) -> None:
    if v.shape != phi.shape:
        raise ValidationError(f"field shape {phi.shape} does not match volume shape {v.shape}")


def check_registration_shape(shape: Shape3, levels: int) -> None:
    """Registration inputs need dims >= 2 and divisibility by 2**levels."""
    d = 2 ** levels
    if min(shape) < 2:
        raise ValidationError(f"registration inputs need all dims >= 2, got {shape}")
    if any(s % d != 0 for s in shape):
        raise ValidationError(f"shape {shape} is not divisible by 2^levels = {d}")
