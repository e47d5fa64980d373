"""Bidirectional mutual attention between two feature grids.

Features are flattened to (c, n') matrices (C order, last spatial axis
fastest).  For one head with projections W_q, W_k, W_v of shape (c_head, c):

    logits    = (W_q F_key)^T (W_k F_query) / sqrt(c_head)      (n_key, n_query)
    Phi       = softmax over the key axis, so every query column is a
                probability distribution over key positions
    output    = (W_v F_key) Phi                                  (c_head, n_query)

The query projection acts on the key-stream features and the key projection
on the query stream; this mirrored wiring is intentional and relied on by
the tests.  The bidirectional exchange runs the same (shared) projections in
both directions, concatenates heads and merges channels with one learned
output matrix, so swapping the two input grids exactly swaps the outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import (
    FeatureGrid,
    IndicatorMatrix,
    ValidationError,
    flatten_features,
    unflatten_features,
)

Tensor = torch.Tensor


@dataclass(frozen=True, eq=False)
class ProjectionParams:
    """Per-head query/key/value projections plus the head-merge matrix.

    w_q/w_k/w_v: tuples of (c_head, c) matrices, one per head.
    w_out: (c_out, heads * c_head) merge applied after head concatenation.
    """

    w_q: tuple[np.ndarray, ...]
    w_k: tuple[np.ndarray, ...]
    w_v: tuple[np.ndarray, ...]
    w_out: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.w_q) == len(self.w_k) == len(self.w_v)) or len(self.w_q) == 0:
            raise ValidationError("need the same nonzero number of matrices per role")

        def freeze(mats):
            out = []
            for m in mats:
                arr = np.array(m, dtype=np.float64, order="C", copy=True)
                if arr.ndim != 2 or not np.all(np.isfinite(arr)):
                    raise ValidationError("projection matrices must be finite 2D arrays")
                arr.flags.writeable = False
                out.append(arr)
            return tuple(out)

        wq, wk, wv = freeze(self.w_q), freeze(self.w_k), freeze(self.w_v)
        shape = wq[0].shape
        for m in (*wq, *wk, *wv):
            if m.shape != shape:
                raise ValidationError("all projection matrices must share one shape")
        object.__setattr__(self, "w_q", wq)
        object.__setattr__(self, "w_k", wk)
        object.__setattr__(self, "w_v", wv)
        if self.w_out is not None:
            w_out = np.array(self.w_out, dtype=np.float64, order="C", copy=True)
            concat = self.heads * self.head_channels
            if w_out.ndim != 2 or w_out.shape[1] != concat or not np.all(np.isfinite(w_out)):
                raise ValidationError(f"w_out must be (c_out, {concat}) and finite")
            w_out.flags.writeable = False
            object.__setattr__(self, "w_out", w_out)

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def head_channels(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def in_channels(self) -> int:
        return self.w_q[0].shape[1]

    @classmethod
    def random(cls, c: int, heads: int, c_out: int | None = None, seed: int = 0, scale: float | None = None):
        if heads < 1 or c % heads != 0:
            raise ValidationError(f"channels {c} must split evenly over {heads} heads")
        c_head = c // heads
        rng = np.random.default_rng(seed)
        s = scale if scale is not None else 1.0 / math.sqrt(c)
        mk = lambda: tuple(rng.normal(0.0, s, size=(c_head, c)) for _ in range(heads))
        w_out = rng.normal(0.0, 1.0 / math.sqrt(c), size=(c_out if c_out else c, c))
        return cls(w_q=mk(), w_k=mk(), w_v=mk(), w_out=w_out)


# --- tensor kernels ------------------------------------------------------------

def indicator_tensor(fk: Tensor, fq: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    """Column-stochastic attention weights, shape (n_key, n_query)."""
    c_head = wq.shape[0]
    logits = (wq @ fk).transpose(0, 1) @ (wk @ fq) / math.sqrt(c_head)
    return torch.softmax(logits, dim=0)


def attend_tensor(fk: Tensor, fq: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """One head of retrieval: value vectors from the key stream mixed per
    query column; shape (c_head, n_query)."""
    phi = indicator_tensor(fk, fq, wq, wk)
    return (wv @ fk) @ phi


def exchange_tensor(
    fs: Tensor, ft: Tensor, wq: list[Tensor], wk: list[Tensor], wv: list[Tensor], w_out: Tensor
) -> tuple[Tensor, Tensor]:
    """Bidirectional multi-head exchange on flat (c, n) features.

    Returns (to_s, to_t): to_s retrieves from ft onto fs's positions and
    vice versa; both are merged through w_out.
    """
    to_s = torch.cat([attend_tensor(ft, fs, q, k, v) for q, k, v in zip(wq, wk, wv)], dim=0)
    to_t = torch.cat([attend_tensor(fs, ft, q, k, v) for q, k, v in zip(wq, wk, wv)], dim=0)
    return w_out @ to_s, w_out @ to_t


# --- typed operations ----------------------------------------------------------

def _t(a: np.ndarray) -> Tensor:
    return torch.from_numpy(np.array(a, dtype=np.float64))


def project(f: FeatureGrid, w: np.ndarray) -> FeatureGrid:
    """Apply one linear map per position; spatial shape unchanged."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != f.channels:
        raise ValidationError(f"matrix {w.shape} does not accept {f.channels} channels")
    flat, shape = flatten_features(f)
    return unflatten_features(w @ flat, shape)


def _check_pair(f_k: FeatureGrid, f_q: FeatureGrid, p: ProjectionParams, head: int | None = None):
    if f_k.channels != f_q.channels:
        raise ValidationError("both grids must share a channel count")
    if p.in_channels != f_k.channels:
        raise ValidationError(
            f"projections accept {p.in_channels} channels, grids have {f_k.channels}"
        )
    if head is not None and not 0 <= head < p.heads:
        raise ValidationError(f"head {head} out of range for {p.heads} heads")


def indicator_matrix(f_k: FeatureGrid, f_q: FeatureGrid, p: ProjectionParams, head: int = 0) -> IndicatorMatrix:
    _check_pair(f_k, f_q, p, head)
    mk, _ = flatten_features(f_k)
    mq, _ = flatten_features(f_q)
    phi = indicator_tensor(_t(mk), _t(mq), _t(p.w_q[head]), _t(p.w_k[head]))
    return IndicatorMatrix(phi.numpy())


def mutual_attention(f_k: FeatureGrid, f_q: FeatureGrid, p: ProjectionParams, head: int = 0) -> FeatureGrid:
    """Features retrieved from the key grid onto the query grid's positions."""
    _check_pair(f_k, f_q, p, head)
    mk, _ = flatten_features(f_k)
    mq, shape_q = flatten_features(f_q)
    out = attend_tensor(_t(mk), _t(mq), _t(p.w_q[head]), _t(p.w_k[head]), _t(p.w_v[head]))
    return unflatten_features(out.numpy(), shape_q)


def bidirectional_exchange(
    f_s: FeatureGrid, f_t: FeatureGrid, p: ProjectionParams
) -> tuple[FeatureGrid, FeatureGrid]:
    """Run the exchange both ways with shared projections; returns
    (features passed to the s stream, features passed to the t stream)."""
    _check_pair(f_s, f_t, p)
    if f_s.spatial_shape != f_t.spatial_shape:
        raise ValidationError("bidirectional exchange needs equal spatial shapes")
    if p.w_out is None:
        raise ValidationError("bidirectional exchange needs the merge matrix w_out")
    ms, shape_s = flatten_features(f_s)
    mt, shape_t = flatten_features(f_t)
    to_s, to_t = exchange_tensor(
        _t(ms), _t(mt),
        [_t(w) for w in p.w_q], [_t(w) for w in p.w_k], [_t(w) for w in p.w_v],
        _t(p.w_out),
    )
    return unflatten_features(to_s.numpy(), shape_s), unflatten_features(to_t.numpy(), shape_t)
