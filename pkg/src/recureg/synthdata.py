"""Synthetic displacement fields, phantom image pairs, and volume/field I/O.

Phantoms are smooth multi-blob intensity images with per-blob integer label
maps; pairs are built by warping a phantom with a Gaussian-smoothed random
displacement field, so the ground-truth transform is known exactly.

File format (shared by volumes, label maps and displacement fields)::

    voxelgrid 1
    dims H W T
    components K
    spacing SX SY SZ
    data
    <H*W*T*K little-endian float32, C order (H, W, T[, K]), last axis fastest>

All generators are pure functions of (parameters, seed), and generated
grids are quantized to float32 so a write/read round-trip is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import fieldops
from .core import DisplacementField, LabelMask, Shape3, ValidationError, Volume
from .fileio import (
    BadMagicError,
    DimOverflowError,
    TruncatedPayloadError,
    check_dims,
    decode_f32,
    encode_f32,
    read_header_line,
)

MAGIC = "voxelgrid"
VERSION = 1


@dataclass(frozen=True, eq=False)
class PhantomPair:
    """A source/target pair with labels and (optionally) the true field.

    ``source_labels``/``target_labels`` are integer maps (0 = background,
    1..K = blobs); the binary union masks required by the metrics are the
    ``source_mask``/``target_mask`` properties.
    """

    source: Volume
    target: Volume
    source_labels: np.ndarray
    target_labels: np.ndarray
    gt_field: DisplacementField | None = None
    name: str = "pair"

    def __post_init__(self):
        src_lab = np.array(self.source_labels, dtype=np.int32, order="C", copy=True)
        tgt_lab = np.array(self.target_labels, dtype=np.int32, order="C", copy=True)
        src_lab.flags.writeable = False
        tgt_lab.flags.writeable = False
        object.__setattr__(self, "source_labels", src_lab)
        object.__setattr__(self, "target_labels", tgt_lab)
        shape = self.source.shape
        if self.target.shape != shape or src_lab.shape != shape or tgt_lab.shape != shape:
            raise ValidationError("PhantomPair members must share one shape")
        if self.gt_field is not None and self.gt_field.shape != shape:
            raise ValidationError("gt_field shape does not match the volumes")
        if not (src_lab > 0).any() or not (tgt_lab > 0).any():
            raise ValidationError("PhantomPair masks must be nonempty")

    @property
    def shape(self) -> Shape3:
        return self.source.shape

    @property
    def source_mask(self) -> LabelMask:
        return LabelMask((self.source_labels > 0).astype(np.uint8))

    @property
    def target_mask(self) -> LabelMask:
        return LabelMask((self.target_labels > 0).astype(np.uint8))

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unique(self.source_labels) if v != 0)


def _quantize(a: np.ndarray) -> np.ndarray:
    """Round to float32-representable values (kept in float64)."""
    return a.astype(np.float32).astype(np.float64)


def gen_smooth_ddf(shape: Shape3, amplitude: float, smoothness: float, seed: int) -> DisplacementField:
    """Gaussian-smoothed white noise, rescaled so max |component| = amplitude."""
    if amplitude < 0:
        raise ValidationError("amplitude must be >= 0")
    if smoothness <= 0:
        raise ValidationError("smoothness must be > 0")
    if amplitude == 0:
        return DisplacementField.identity(shape)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((*shape, 3))
    smooth = np.stack(
        [gaussian_filter(noise[..., c], sigma=smoothness) for c in range(3)], axis=-1
    )
    peak = np.abs(smooth).max()
    if peak == 0.0:
        return DisplacementField.identity(shape)
    return DisplacementField(_quantize(smooth * (amplitude / peak)))


def gen_phantom_volume(shape: Shape3, n_blobs: int, seed: int, spacing=(1.0, 1.0, 1.0)):
    """Smooth multi-blob phantom; returns (Volume in [0, 1], int label map)."""
    if min(shape) < 16:
        raise ValidationError(f"phantom shape must be >= 16 per axis, got {shape}")
    if n_blobs < 1:
        raise ValidationError("need at least one blob")
    rng = np.random.default_rng(seed)
    dims = np.asarray(shape, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1)

    margin = 0.25 * dims.min()
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < n_blobs and tries < 200:
        c = rng.uniform(margin, dims - margin)
        tries += 1
        if all(np.linalg.norm(c - prev) >= 0.30 * dims.min() for prev in centers):
            centers.append(c)
    while len(centers) < n_blobs:  # crowded request: accept overlap
        centers.append(rng.uniform(margin, dims - margin))

    image = np.zeros(shape, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.int32)
    for i, c in enumerate(centers, start=1):
        radii = rng.uniform(0.14, 0.24, size=3) * dims
        peak = rng.uniform(0.6, 1.0)
        q = (((grid - c) / radii) ** 2).sum(axis=-1)
        image += peak * np.exp(-0.5 * q * 4.0)
        inside = q <= 1.0
        labels[inside & (labels == 0)] = i

    # smooth texture everywhere keeps intensity gradients informative away
    # from the blobs; its correlation length stays above the deformation
    # scale so local correspondence remains decodable
    texture = gaussian_filter(rng.standard_normal(shape), sigma=2.5)
    image += 0.35 * texture / max(np.abs(texture).max(), 1e-12)

    lo, hi = image.min(), image.max()
    image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    return Volume(_quantize(image), spacing=spacing), labels


def gen_phantom_pair(
    shape: Shape3,
    n_blobs: int,
    deform_amplitude: float,
    seed: int,
    smoothness: float = 8.0,
    spacing=(1.0, 1.0, 1.0),
    name: str | None = None,
) -> PhantomPair:
    """Phantom + known smooth deformation; target = warp(source, gt_field)."""
    source, labels = gen_phantom_volume(shape, n_blobs, seed, spacing=spacing)
    gt = gen_smooth_ddf(shape, deform_amplitude, smoothness, seed=seed + 1)
    target = Volume(_quantize(fieldops.warp(source, gt).data), spacing=spacing)
    target_labels = fieldops.warp_nearest(labels, gt)
    return PhantomPair(
        source=source,
        target=target,
        source_labels=labels,
        target_labels=target_labels,
        gt_field=gt,
        name=name if name is not None else f"phantom{seed:04d}",
    )


def normalize_volume(v: Volume) -> Volume:
    """Affinely map intensities to [0, 1]; constant volumes map to all-zero."""
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return Volume(np.zeros(v.shape), spacing=v.spacing)
    return Volume((v.data - lo) / (hi - lo), spacing=v.spacing)


def random_crop(p: PhantomPair, crop_shape: Shape3, seed: int) -> PhantomPair:
    """Crop the same window out of every member of the pair.

    Deterministic per seed; windows that would empty a mask are re-drawn
    (bounded retries) so the cropped pair stays valid.
    """
    crop = tuple(int(c) for c in crop_shape)
    shape = p.shape
    if any(c < 1 or c > s for c, s in zip(crop, shape)):
        raise ValidationError(f"crop {crop} does not fit inside {shape}")
    rng = np.random.default_rng(seed)
    for _ in range(32):
        off = tuple(int(rng.integers(0, s - c + 1)) for c, s in zip(crop, shape))
        sl = tuple(slice(o, o + c) for o, c in zip(off, crop))
        src_lab = p.source_labels[sl]
        tgt_lab = p.target_labels[sl]
        if not (src_lab > 0).any() or not (tgt_lab > 0).any():
            continue
        return PhantomPair(
            source=Volume(p.source.data[sl], spacing=p.source.spacing),
            target=Volume(p.target.data[sl], spacing=p.target.spacing),
            source_labels=src_lab,
            target_labels=tgt_lab,
            gt_field=None if p.gt_field is None else DisplacementField(p.gt_field.data[sl]),
            name=f"{p.name}@{off[0]},{off[1]},{off[2]}",
        )
    raise ValidationError("no crop window kept both masks nonempty")


# --- voxelgrid file I/O --------------------------------------------------------

def _write_grid(path, data: np.ndarray, spacing) -> None:
    dims = data.shape[:3]
    comps = 1 if data.ndim == 3 else data.shape[3]
    header = (
        f"{MAGIC} {VERSION}\n"
        f"dims {dims[0]} {dims[1]} {dims[2]}\n"
        f"components {comps}\n"
        f"spacing {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
        "data\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(encode_f32(data))


def _read_grid(path):
    """Returns (data float64 array (H, W, T[, K]), spacing, components)."""
    what = str(path)
    with open(path, "rb") as f:
        magic = read_header_line(f, what).split()
        if len(magic) != 2 or magic[0] != MAGIC:
            raise BadMagicError(f"{what}: not a {MAGIC} file")
        if magic[1] != str(VERSION):
            raise BadMagicError(f"{what}: unsupported version {magic[1]!r}")

        fields = {}
        for key, n in (("dims", 3), ("components", 1), ("spacing", 3)):
            parts = read_header_line(f, what).split()
            if len(parts) != n + 1 or parts[0] != key:
                raise BadMagicError(f"{what}: malformed {key!r} header line")
            fields[key] = parts[1:]
        if read_header_line(f, what) != "data":
            raise BadMagicError(f"{what}: missing data marker")

        try:
            dims = check_dims(fields["dims"], what)
            comps = int(fields["components"][0])
            spacing = tuple(float(x) for x in fields["spacing"])
        except DimOverflowError:
            raise
        except ValueError as e:
            raise BadMagicError(f"{what}: non-numeric header field") from e
        if comps not in (1, 3):
            raise DimOverflowError(f"{what}: unsupported component count {comps}")
        check_dims((*dims, comps), what)

        shape = dims if comps == 1 else (*dims, comps)
        data = decode_f32(f.read(), shape, what).astype(np.float64)
    return data, spacing, comps


def write_volume(v: Volume, path) -> None:
    _write_grid(path, v.data, v.spacing)


def read_volume(path) -> Volume:
    data, spacing, comps = _read_grid(path)
    if comps != 1:
        raise BadMagicError(f"{path}: expected a scalar volume, found {comps} components")
    return Volume(data, spacing=spacing)


def write_ddf(phi: DisplacementField, path) -> None:
    _write_grid(path, phi.data, (1.0, 1.0, 1.0))


def read_ddf(path) -> DisplacementField:
    data, _, comps = _read_grid(path)
    if comps != 3:
        raise BadMagicError(f"{path}: expected a 3-component field, found {comps}")
    return DisplacementField(data)


def write_labels(labels: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    _write_grid(path, np.asarray(labels, dtype=np.float64), spacing)


def read_labels(path) -> np.ndarray:
    data, _, comps = _read_grid(path)
    if comps != 1:
        raise BadMagicError(f"{path}: expected a label map, found {comps} components")
    labels = np.rint(data).astype(np.int32)
    if np.abs(data - labels).max() > 1e-6:
        raise BadMagicError(f"{path}: label map contains non-integer values")
    return labels


# --- manifests ------------------------------------------------------------------

MANIFEST_HEADER = "# recureg manifest: source target source_labels target_labels gt"


@dataclass(frozen=True)
class PairPaths:
    source: Path
    target: Path
    source_labels: Path
    target_labels: Path
    gt: Path | None = None
    name: str = "pair"


def write_pair(pair: PhantomPair, directory) -> PairPaths:
    """Write all members of a pair into a directory; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = PairPaths(
        source=d / "source.vol",
        target=d / "target.vol",
        source_labels=d / "source_labels.vol",
        target_labels=d / "target_labels.vol",
        gt=None if pair.gt_field is None else d / "gt.ddf",
        name=pair.name,
    )
    write_volume(pair.source, paths.source)
    write_volume(pair.target, paths.target)
    write_labels(pair.source_labels, paths.source_labels, spacing=pair.source.spacing)
    write_labels(pair.target_labels, paths.target_labels, spacing=pair.target.spacing)
    if paths.gt is not None:
        write_ddf(pair.gt_field, paths.gt)
    return paths


def write_manifest(records: list[PairPaths], path) -> None:
    base = Path(path).parent
    lines = [MANIFEST_HEADER]
    for r in records:
        gt = "-" if r.gt is None else r.gt.relative_to(base).as_posix()
        lines.append(
            " ".join(
                [
                    r.source.relative_to(base).as_posix(),
                    r.target.relative_to(base).as_posix(),
                    r.source_labels.relative_to(base).as_posix(),
                    r.target_labels.relative_to(base).as_posix(),
                    gt,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[PairPaths]:
    base = Path(path).parent
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValidationError(f"{path}:{i + 1}: manifest lines need 5 fields")
        records.append(
            PairPaths(
                source=base / parts[0],
                target=base / parts[1],
                source_labels=base / parts[2],
                target_labels=base / parts[3],
                gt=None if parts[4] == "-" else base / parts[4],
                name=Path(parts[0]).parent.name or f"pair{len(records):04d}",
            )
        )
    return records


def load_pair(paths: PairPaths) -> PhantomPair:
    return PhantomPair(
        source=read_volume(paths.source),
        target=read_volume(paths.target),
        source_labels=read_labels(paths.source_labels),
        target_labels=read_labels(paths.target_labels),
        gt_field=None if paths.gt is None else read_ddf(paths.gt),
        name=paths.name,
    )


def generate_corpus(
    directory,
    count: int,
    shape: Shape3 = (16, 16, 16),
    n_blobs: int = 3,
    deform_amplitude: float = 3.0,
    smoothness: float = 8.0,
    seed: int = 0,
) -> Path:
    """Write ``count`` phantom pairs plus a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        pair = gen_phantom_pair(
            shape, n_blobs, deform_amplitude, seed=seed + 1000 * i,
            smoothness=smoothness, name=f"pair{i:04d}",
        )
        records.append(write_pair(pair, d / f"pair{i:04d}"))
    manifest = d / "manifest.txt"
    write_manifest(records, manifest)
    return manifest
