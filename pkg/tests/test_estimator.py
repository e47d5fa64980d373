import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from recureg import synthdata
from recureg.core import DisplacementField, Volume
from recureg.estimator import RecursiveRegistrar


def quick_registrar(**kw):
    base = dict(
        base_channels=4, levels=2, heads=2, k_train=1, k_infer=1,
        finetune_iters=2, lambda_unsup=1e-6, seed=0,
    )
    base.update(kw)
    return RecursiveRegistrar(**base)


@pytest.fixture(scope="module")
def pairs():
    return [synthdata.gen_phantom_pair((16, 16, 16), 2, 1.5, seed=40 + i) for i in range(2)]


def test_get_set_params_roundtrip():
    est = quick_registrar()
    params = est.get_params()
    assert params["base_channels"] == 4
    assert params["k_infer"] == 1
    est.set_params(k_infer=3)
    assert est.k_infer == 3
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        quick_registrar().predict([])


def test_fit_predict_transform_score(pairs):
    est = quick_registrar().fit(pairs)
    assert est.n_iter_ == 2

    phi = est.predict(pairs[0])
    assert isinstance(phi, DisplacementField)
    assert phi.shape == (16, 16, 16)

    warped = est.transform((pairs[0].source, pairs[0].target))
    assert isinstance(warped, Volume)

    many = est.predict(pairs)
    assert isinstance(many, list) and len(many) == 2

    score = est.score(pairs)
    assert 0.0 <= score <= 1.0


def test_fit_is_seeded_deterministic(pairs):
    a = quick_registrar().fit(pairs)
    b = quick_registrar().fit(pairs)
    for name in a.params_.tensors:
        assert np.array_equal(a.params_.tensors[name], b.params_.tensors[name])


def test_load_checkpoint(tmp_path, pairs):
    from recureg.network import write_checkpoint

    est = quick_registrar().fit(pairs)
    path = tmp_path / "model.ckpt"
    write_checkpoint(est.params_, path)

    other = quick_registrar().load(path)
    phi_a = est.predict(pairs[0])
    phi_b = other.predict(pairs[0])
    assert np.array_equal(phi_a.data, phi_b.data)


def test_fit_accepts_manifest_path(tmp_path):
    manifest = synthdata.generate_corpus(tmp_path / "c", count=2, shape=(16, 16, 16), seed=6)
    est = quick_registrar().fit(str(manifest))
    assert hasattr(est, "params_")
