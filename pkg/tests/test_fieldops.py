import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from recureg import fieldops
from recureg.core import DisplacementField, LabelMask, ValidationError, Volume


def rand_volume(shape, seed, spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(0.0, 1.0, size=shape), spacing=spacing)


def rand_field(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return DisplacementField(rng.uniform(-scale, scale, size=(*shape, 3)))


# --- independent oracles (numpy, no torch) ------------------------------------

def oracle_trilinear(data: np.ndarray, p) -> float:
    """Brute-force 8-corner interpolation with border clamp."""
    p = np.minimum(np.maximum(np.asarray(p, dtype=np.float64), 0.0), np.array(data.shape) - 1.0)
    i0 = np.minimum(np.floor(p).astype(int), np.maximum(np.array(data.shape) - 2, 0))
    f = p - i0
    total = 0.0
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                idx = (
                    min(i0[0] + bx, data.shape[0] - 1),
                    min(i0[1] + by, data.shape[1] - 1),
                    min(i0[2] + bz, data.shape[2] - 1),
                )
                w = (
                    (f[0] if bx else 1 - f[0])
                    * (f[1] if by else 1 - f[1])
                    * (f[2] if bz else 1 - f[2])
                )
                total += data[idx] * w
    return total


def oracle_gradient(data: np.ndarray) -> np.ndarray:
    """Independent stencil: np.gradient (central interior, one-sided edges)."""
    out = np.zeros((*data.shape, 3))
    for a in range(3):
        if data.shape[a] == 1:
            continue
        out[..., a] = np.gradient(data, axis=a)
    return out


# --- trilinear sampling ---------------------------------------------------------

def test_sample_reproduces_lattice_values():
    v = rand_volume((3, 4, 5), seed=1)
    assert fieldops.trilinear_sample(v, (1, 1, 1)) == pytest.approx(v.data[1, 1, 1], abs=0)
    assert fieldops.trilinear_sample(v, (2.0, 3.0, 4.0)) == pytest.approx(v.data[2, 3, 4], abs=0)


def test_sample_midpoint_linearity():
    data = np.zeros((2, 1, 1))
    data[1, 0, 0] = 2.0
    v = Volume(data)
    assert fieldops.trilinear_sample(v, (0.5, 0.0, 0.0)) == pytest.approx(1.0, abs=1e-12)


def test_sample_matches_corner_oracle():
    rng = np.random.default_rng(7)
    v = rand_volume((3, 3, 3), seed=2)
    for _ in range(100):
        p = rng.uniform(-0.5, 3.0, size=3)
        assert fieldops.trilinear_sample(v, p) == pytest.approx(
            oracle_trilinear(v.data, p), abs=1e-6
        )


def test_sample_rejects_nonfinite_position():
    v = rand_volume((3, 3, 3), seed=3)
    with pytest.raises(ValidationError):
        fieldops.trilinear_sample(v, (np.nan, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0), st.integers(0, 2))
def test_sample_is_linear_along_cell_axes(seed, alpha, axis):
    # within one cell the interpolant is linear along each axis, so samples
    # on an axis-aligned segment are convex combinations of the endpoints
    rng = np.random.default_rng(seed)
    v = Volume(rng.uniform(0, 1, size=(3, 3, 3)))
    p0 = rng.uniform(0, 1.0, size=3) + rng.integers(0, 2, size=3)
    p1 = p0.copy()
    p1[axis] = np.floor(p0[axis]) + rng.uniform(0, 1.0)
    p = alpha * p0 + (1 - alpha) * p1
    want = alpha * fieldops.trilinear_sample(v, p0) + (1 - alpha) * fieldops.trilinear_sample(v, p1)
    assert fieldops.trilinear_sample(v, p) == pytest.approx(want, abs=1e-6)


# --- warping --------------------------------------------------------------------

def test_warp_zero_field_is_identity():
    v = rand_volume((4, 4, 4), seed=4)
    out = fieldops.warp(v, DisplacementField.identity(v.shape))
    assert np.max(np.abs(out.data - v.data)) <= 1e-7


def test_warp_integer_shift_with_edge_clamp():
    ramp = np.arange(4.0).reshape(1, 1, 4)
    v = Volume(ramp)
    phi = np.zeros((1, 1, 4, 3))
    phi[..., 2] = 1.0  # shift sampling one voxel along the last axis
    out = fieldops.warp(v, DisplacementField(phi))
    assert out.data.reshape(-1).tolist() == [1.0, 2.0, 3.0, 3.0]


def test_warp_matches_voxelwise_sampling_oracle():
    v = rand_volume((4, 4, 4), seed=5)
    phi = rand_field((4, 4, 4), seed=6, scale=0.8)
    out = fieldops.warp(v, phi)
    for x in np.ndindex(4, 4, 4):
        want = oracle_trilinear(v.data, np.array(x) + phi.data[x])
        assert out.data[x] == pytest.approx(want, abs=1e-9)


def test_warp_shape_mismatch_raises():
    with pytest.raises(ValidationError):
        fieldops.warp(rand_volume((4, 4, 4), 0), DisplacementField.identity((2, 2, 2)))


def test_warp_nearest_labels():
    labels = np.zeros((1, 1, 4), dtype=np.int32)
    labels[0, 0, 2] = 7
    phi = np.zeros((1, 1, 4, 3))
    phi[..., 2] = 1.0
    out = fieldops.warp_nearest(labels, DisplacementField(phi))
    assert out.tolist() == [[[0, 7, 0, 0]]]


# --- composition ----------------------------------------------------------------

def test_compose_left_identity_bit_exact():
    v = rand_field((4, 4, 4), seed=8)
    out = fieldops.compose(DisplacementField.identity((4, 4, 4)), v)
    assert np.array_equal(out.data, v.data)


def test_compose_constant_translations_add():
    shape = (4, 4, 4)
    a = np.zeros((*shape, 3))
    a[..., 0] = 1.0
    b = np.zeros((*shape, 3))
    b[..., 1] = 1.0
    out = fieldops.compose(DisplacementField(a), DisplacementField(b))
    assert np.allclose(out.data[..., 0], 1.0)
    assert np.allclose(out.data[..., 1], 1.0)
    assert np.allclose(out.data[..., 2], 0.0)


def test_compose_consistent_with_double_warp():
    shape = (8, 8, 8)
    rng = np.random.default_rng(9)
    from scipy.ndimage import gaussian_filter

    def smooth_field(seed, amp):
        r = np.random.default_rng(seed)
        f = np.stack(
            [gaussian_filter(r.standard_normal(shape), sigma=2.0) for _ in range(3)], axis=-1
        )
        return DisplacementField(f * (amp / np.abs(f).max()))

    raw = gaussian_filter(rng.uniform(0, 1, size=shape), sigma=1.5)
    v = Volume((raw - raw.min()) / (raw.max() - raw.min()))
    u, w = smooth_field(10, 0.75), smooth_field(11, 0.75)
    once = fieldops.warp(v, fieldops.compose(u, w))
    twice = fieldops.warp(fieldops.warp(v, u), w)
    rng_range = v.data.max() - v.data.min()
    assert np.max(np.abs(once.data - twice.data)) < 0.05 * rng_range


# --- gradients and Jacobians ------------------------------------------------------

def test_gradient_constant_is_zero():
    g = fieldops.spatial_gradient(Volume(np.full((3, 3, 3), 2.5)))
    assert np.all(g == 0.0)


def test_gradient_linear_ramp():
    x = np.arange(5.0)
    data = np.broadcast_to(2.0 * x[:, None, None], (5, 4, 3)).copy()
    g = fieldops.spatial_gradient(Volume(data))
    assert np.allclose(g[1:-1, :, :, 0], 2.0)
    assert np.allclose(g[..., 1], 0.0) and np.allclose(g[..., 2], 0.0)


def test_gradient_matches_independent_stencil():
    rng = np.random.default_rng(12)
    data = rng.normal(size=(4, 4, 4))
    g = fieldops.spatial_gradient(data)
    assert np.array_equal(g, oracle_gradient(data))


def test_jacobian_zero_field_is_one():
    det = fieldops.jacobian_determinant(DisplacementField.identity((4, 4, 4)))
    assert np.allclose(det, 1.0)


def test_jacobian_linear_contraction():
    shape = (5, 5, 5)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).astype(float)
    u = np.zeros((*shape, 3))
    u[..., 0] = -0.5 * grid[..., 0]
    det = fieldops.jacobian_determinant(DisplacementField(u))
    assert np.allclose(det[1:-1, 1:-1, 1:-1], 0.5)


def test_jacobian_reflection_is_negative():
    shape = (4, 4, 4)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).astype(float)
    u = np.zeros((*shape, 3))
    u[..., 0] = shape[0] - 1 - 2.0 * grid[..., 0]
    det = fieldops.jacobian_determinant(DisplacementField(u))
    assert np.allclose(det[1:-1, 1:-1, 1:-1], -1.0)


def test_count_negative_jacobian_cases():
    shape = (4, 4, 4)
    zero = DisplacementField.identity(shape)
    full = LabelMask(np.ones(shape, dtype=np.uint8))
    empty = LabelMask(np.zeros(shape, dtype=np.uint8))
    assert fieldops.count_negative_jacobian(zero, full) == 0

    grid = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), axis=-1).astype(float)
    u = np.zeros((*shape, 3))
    u[..., 0] = shape[0] - 1 - 2.0 * grid[..., 0]
    flip = DisplacementField(u)
    # brute-force enumeration of interior det signs
    det = fieldops.jacobian_determinant(flip)
    want = sum(
        1
        for x in np.ndindex(shape)
        if all(0 < c < s - 1 for c, s in zip(x, shape)) and det[x] < 0
    )
    assert want == 8  # 2x2x2 interior, det = -1 everywhere
    assert fieldops.count_negative_jacobian(flip, full) == want
    assert fieldops.count_negative_jacobian(flip, empty) == 0


def test_jacobian_random_matches_sign_enumeration():
    rng = np.random.default_rng(13)
    for trial in range(20):
        phi = rand_field((4, 4, 4), seed=100 + trial, scale=1.5)
        det = fieldops.jacobian_determinant(phi)
        mask = LabelMask(rng.integers(0, 2, size=(4, 4, 4)).astype(np.uint8))
        want = sum(
            1
            for x in np.ndindex((4, 4, 4))
            if all(0 < c < 3 for c in x) and mask.data[x] and det[x] < 0
        )
        assert fieldops.count_negative_jacobian(phi, mask) == want


# --- differentiability -----------------------------------------------------------

def test_warp_gradients_match_finite_differences():
    torch.manual_seed(0)
    rng = np.random.default_rng(14)
    vol = torch.tensor(rng.uniform(0, 1, size=(5, 5, 5)), dtype=torch.float64, requires_grad=True)
    # keep sample positions away from the integer lattice so the local
    # derivative is smooth at the probe
    phi_np = rng.uniform(0.15, 0.85, size=(5, 5, 5, 3))
    phi = torch.tensor(phi_np, dtype=torch.float64, requires_grad=True)
    weights = torch.tensor(rng.normal(size=(5, 5, 5)), dtype=torch.float64)

    def scalar(v, p):
        return (fieldops.warp_channels(v[None], p)[0] * weights).sum()

    loss = scalar(vol, phi)
    gv, gp = torch.autograd.grad(loss, (vol, phi))

    h = 1e-4
    checks = 0
    for probe in range(100):
        if probe % 2 == 0:
            idx = tuple(rng.integers(0, 5, size=3))
            e = torch.zeros_like(vol)
            e[idx] = h
            fd = (scalar(vol + e, phi) - scalar(vol - e, phi)).item() / (2 * h)
            got = gv[idx].item()
        else:
            idx = (*tuple(rng.integers(0, 5, size=3)), int(rng.integers(0, 3)))
            e = torch.zeros_like(phi)
            e[idx] = h
            fd = (scalar(vol, phi + e) - scalar(vol, phi - e)).item() / (2 * h)
            got = gp[idx].item()
        assert got == pytest.approx(fd, rel=1e-3, abs=1e-7)
        checks += 1
    assert checks >= 100
