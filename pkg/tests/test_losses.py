import numpy as np
import pytest
import torch

from recureg import fieldops, losses
from recureg.core import DisplacementField, ModelConfig, ValidationError, Volume
from recureg.losses import LossReport


def rand_volume(shape, seed):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(0, 1, size=shape))


def rand_field(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return DisplacementField(rng.uniform(-scale, scale, size=(*shape, 3)))


# --- mse -------------------------------------------------------------------------

def test_mse_basic_cases():
    a = rand_volume((2, 2, 2), 0)
    assert losses.mse(a, a) == 0.0
    zeros = Volume(np.zeros((2, 2, 2)))
    ones = Volume(np.ones((2, 2, 2)))
    assert losses.mse(zeros, ones) == 1.0


def test_mse_matches_hand_sum():
    a = rand_volume((2, 2, 2), 1)
    b = rand_volume((2, 2, 2), 2)
    want = float(((a.data - b.data) ** 2).sum() / 8.0)
    assert losses.mse(a, b) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValidationError):
        losses.mse(a, rand_volume((2, 2, 3), 3))


# --- local ncc --------------------------------------------------------------------

def oracle_ncc(a, b, window, eps=1e-5):
    """Independent sliding-window evaluation with explicit means."""
    H, W, T = a.shape
    w = window
    ccs = []
    for i in range(H - w + 1):
        for j in range(W - w + 1):
            for k in range(T - w + 1):
                wa = a[i : i + w, j : j + w, k : k + w]
                wb = b[i : i + w, j : j + w, k : k + w]
                da, db = wa - wa.mean(), wb - wb.mean()
                cross = (da * db).sum()
                cc2 = cross * cross / ((da * da).sum() * (db * db).sum() + eps)
                ccs.append(cc2)
    return -float(np.mean(ccs))


def test_ncc_perfect_correlation():
    a = rand_volume((5, 5, 5), 4)
    assert losses.local_ncc(a, a, window=3) == pytest.approx(-1.0, abs=1e-3)


def test_ncc_affine_invariance():
    a = rand_volume((5, 5, 5), 5)
    b = Volume(2.0 * a.data + 1.0)
    assert losses.local_ncc(a, b, window=3) == pytest.approx(-1.0, abs=1e-3)


def test_ncc_matches_window_oracle():
    a = rand_volume((5, 5, 5), 6)
    b = rand_volume((5, 5, 5), 7)
    got = losses.local_ncc(a, b, window=3)
    assert got == pytest.approx(oracle_ncc(a.data, b.data, 3), abs=1e-6)
    assert -1.0 <= got <= 0.0


def test_ncc_rejects_even_window():
    a = rand_volume((5, 5, 5), 8)
    with pytest.raises(ValidationError):
        losses.local_ncc(a, a, window=4)


# --- smoothness and edge weight -----------------------------------------------------

def test_smoothness_constant_field_is_zero():
    phi = DisplacementField(np.ones((3, 3, 3, 3)))
    assert losses.smoothness_l2(phi) == 0.0


def test_smoothness_linear_line():
    # component 0 rises with slope 1 along the length-4 axis of a 1x1x4 grid
    phi = np.zeros((1, 1, 4, 3))
    phi[0, 0, :, 0] = np.arange(4.0)
    got = losses.smoothness_l2(DisplacementField(phi))
    # derivative along the last axis is 1 at all 4 stencils; others 0
    assert got == pytest.approx(4.0, rel=1e-12)


def test_smoothness_matches_oracle():
    phi = rand_field((4, 4, 4), 9)
    want = 0.0
    for c in range(3):
        g = np.zeros((4, 4, 4, 3))
        for a in range(3):
            g[..., a] = np.gradient(phi.data[..., c], axis=a)
        want += float((g ** 2).sum())
    assert losses.smoothness_l2(phi) == pytest.approx(want, rel=1e-9)


def test_edge_weight_basics():
    const = Volume(np.full((4, 4, 4), 0.7))
    assert np.allclose(losses.edge_weight(const), 1.0)

    # slope 1 along one axis: |grad|^2 = 1 at interior stencils
    ramp = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4)).copy()
    w = losses.edge_weight(Volume(ramp))
    assert w[1:-1].max() == pytest.approx(np.exp(-1.0), rel=1e-9)
    assert np.all(w > 0.0) and np.all(w <= 1.0)


def test_edge_weight_monotone_in_gradient():
    prev = None
    for slope in (0.0, 0.5, 1.0, 2.0):
        ramp = np.broadcast_to(slope * np.arange(6.0)[:, None, None], (6, 6, 6)).copy()
        w = losses.edge_weight(Volume(ramp))
        interior = float(w[2:-2].mean())
        if prev is not None:
            assert interior < prev
        prev = interior


# --- composite losses ----------------------------------------------------------------

def test_loss_synthetic_cases():
    zero = DisplacementField.identity((3, 3, 3))
    rep = losses.loss_synthetic(zero, zero, lam=1.0)
    assert rep.total == 0.0 and rep.similarity_term == 0.0

    phi = rand_field((3, 3, 3), 10, scale=0.5)
    rep = losses.loss_synthetic(phi, phi, lam=0.5)
    assert rep.similarity_term == 0.0
    assert rep.total == pytest.approx(0.5 * losses.smoothness_l2(phi), rel=1e-9)


def test_loss_synthetic_matches_hand_evaluation():
    phi = rand_field((2, 2, 2), 11)
    gt = rand_field((2, 2, 2), 12)
    rep = losses.loss_synthetic(phi, gt, lam=0.5)
    want_sim = float(((phi.data - gt.data) ** 2).sum())
    assert rep.similarity_term == pytest.approx(want_sim, rel=1e-12)
    assert rep.regularization_term == pytest.approx(losses.smoothness_l2(phi), rel=1e-12)
    assert rep.total == pytest.approx(want_sim + 0.5 * rep.regularization_term, rel=1e-9)
    assert rep.lam == 0.5


def test_loss_unsupervised_trivial_zero():
    v = rand_volume((4, 4, 4), 13)
    cfg = ModelConfig(similarity="mse")
    rep = losses.loss_unsupervised(v, v, DisplacementField.identity(v.shape), cfg)
    assert rep.similarity_term == 0.0
    assert rep.regularization_term == 0.0
    assert rep.total == 0.0


def test_loss_unsupervised_constant_target_collapses_weight():
    source = rand_volume((4, 4, 4), 14)
    target = Volume(np.full((4, 4, 4), 0.3))
    phi = rand_field((4, 4, 4), 15, scale=0.4)
    cfg = ModelConfig(similarity="mse", lambda_unsup=1.0)
    rep = losses.loss_unsupervised(source, target, phi, cfg)
    assert rep.regularization_term == pytest.approx(losses.smoothness_l2(phi), rel=1e-9)


def test_loss_unsupervised_composes_tested_pieces():
    source = rand_volume((5, 5, 5), 16)
    target = rand_volume((5, 5, 5), 17)
    phi = rand_field((5, 5, 5), 18, scale=0.5)
    cfg = ModelConfig(similarity="local-ncc", ncc_window=3, lambda_unsup=0.25)
    rep = losses.loss_unsupervised(source, target, phi, cfg)

    warped = fieldops.warp(source, phi)
    want_sim = losses.local_ncc(warped, target, window=3)
    w = losses.edge_weight(target)
    want_reg = 0.0
    for c in range(3):
        g = fieldops.spatial_gradient(phi.data[..., c])
        want_reg += float(((g * w[..., None]) ** 2).sum())
    assert rep.similarity_term == pytest.approx(want_sim, rel=1e-9)
    assert rep.regularization_term == pytest.approx(want_reg, rel=1e-9)
    assert rep.total == pytest.approx(want_sim + 0.25 * want_reg, rel=1e-9)


def test_loss_unsupervised_zero_lambda_is_similarity_only():
    source = rand_volume((4, 4, 4), 19)
    target = rand_volume((4, 4, 4), 20)
    phi = rand_field((4, 4, 4), 21, scale=0.3)
    cfg = ModelConfig(similarity="mse", lambda_unsup=0.0)
    rep = losses.loss_unsupervised(source, target, phi, cfg)
    warped = fieldops.warp(source, phi)
    assert rep.total == pytest.approx(losses.mse(warped, target), rel=1e-12)


def test_edge_weighting_never_increases_regularizer():
    for seed in range(10):
        phi = rand_field((4, 4, 4), 200 + seed)
        target = rand_volume((4, 4, 4), 300 + seed)
        w = losses.edge_weight(target)
        weighted = 0.0
        plain = 0.0
        for c in range(3):
            g = fieldops.spatial_gradient(phi.data[..., c])
            weighted += float(((g * w[..., None]) ** 2).sum())
            plain += float((g ** 2).sum())
        assert weighted <= plain + 1e-12


def test_loss_report_invariant_checked():
    with pytest.raises(ValidationError):
        LossReport(total=1.0, similarity_term=0.2, regularization_term=0.2, lam=1.0)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(22)
    shape = (4, 4, 4)
    src = torch.tensor(rng.uniform(0, 1, size=shape), dtype=torch.float64)
    tgt = torch.tensor(rng.uniform(0, 1, size=shape), dtype=torch.float64)
    gt = torch.tensor(rng.uniform(-0.5, 0.5, size=(*shape, 3)), dtype=torch.float64)
    phi = torch.tensor(
        rng.uniform(0.15, 0.85, size=(*shape, 3)), dtype=torch.float64, requires_grad=True
    )

    cases = {
        "synthetic": lambda p: losses.loss_synthetic_tensor(p, gt, 0.5)[0],
        "unsup-mse": lambda p: losses.loss_unsupervised_tensor(src, tgt, p, 0.3, "mse")[0],
        "unsup-ncc": lambda p: losses.loss_unsupervised_tensor(src, tgt, p, 0.3, "local-ncc", 3)[0],
    }
    h = 1e-4
    for name, fn in cases.items():
        grad = torch.autograd.grad(fn(phi), phi)[0]
        checks = 0
        for _ in range(50):
            idx = (*(int(x) for x in rng.integers(0, 4, size=3)), int(rng.integers(0, 3)))
            e = torch.zeros_like(phi)
            e[idx] = h
            fd = (fn(phi.detach() + e) - fn(phi.detach() - e)).item() / (2 * h)
            got = grad[idx].item()
            assert got == pytest.approx(fd, rel=1e-3, abs=1e-7), f"{name} at {idx}"
            checks += 1
        assert checks == 50
