import numpy as np
import pytest

from cecrf.batchnorm import BnParams
from cecrf.data import FeatureStats
from cecrf.errors import DimensionError, ModelFormatError, ShapeError, VersionError
from cecrf.model import (FLAG_BN, KIND_CRF, CrfParams, FoldedCrf, ModelDims, fold_bn,
                         init_params, load_model, save_model, unary_scores, write_container)


def test_init_deterministic_and_shapes():
    dims = ModelDims(3, 4, 2)
    a, b = init_params(dims, 7, 0.1), init_params(dims, 7, 0.1)
    for name in ("R", "Q", "U", "b"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.R.shape == (2, 4) and a.Q.shape == (2, 4) and a.U.shape == (3, 4)
    assert a.b.shape == (4,) and not a.b.any()
    assert np.abs(a.R).max() <= 0.1
    z = init_params(dims, 7, 0.0)
    assert not (z.R.any() or z.Q.any() or z.U.any())


def test_dims_validation():
    with pytest.raises(DimensionError):
        ModelDims(3, 4, 5)
    with pytest.raises(DimensionError):
        ModelDims(0, 4, 2)
    with pytest.raises(DimensionError):
        CrfParams(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((3, 4)), np.zeros(4), None,
                  ModelDims(3, 4, 2))


def test_unary_scores():
    p = init_params(ModelDims(4, 2, 1), 0)
    p.U[:] = 0.0
    p.b = np.array([1.0, 2.0])
    np.testing.assert_array_equal(unary_scores(p, np.arange(4.0)), [1.0, 2.0])
    p = init_params(ModelDims(4, 3, 2), 1, 1.0)
    np.testing.assert_array_equal(unary_scores(p, np.eye(4)[0]), p.U[0])
    rng = np.random.default_rng(2)
    p.b = rng.normal(size=3)
    h = rng.normal(size=4)
    direct = [sum(h[k] * p.U[k, j] for k in range(4)) + p.b[j] for j in range(3)]
    np.testing.assert_allclose(unary_scores(p, h), direct, atol=1e-12)
    with pytest.raises(DimensionError):
        unary_scores(p, np.zeros(3))


def test_fold_identity_and_zero_q():
    p = init_params(ModelDims(2, 3, 2), 4, 1.0)
    p.bn = BnParams.identity(2, eps=0.0)
    np.testing.assert_array_equal(fold_bn(p).P, p.R.T @ p.Q)
    p.Q[:] = 0.0
    assert not fold_bn(p).P.any()
    p.bn = None
    assert isinstance(fold_bn(p), FoldedCrf)


def _random_params(with_bn=True):
    rng = np.random.default_rng(9)
    p = init_params(ModelDims(3, 4, 2), 3, 1.0, use_bn=with_bn)
    p.b = rng.normal(size=4)
    if with_bn:
        p.bn = BnParams(rng.normal(size=2), rng.normal(size=2), rng.normal(size=2),
                        rng.uniform(1, 2, 2), 1e-3, 0.2)
    p.feature_stats = FeatureStats(rng.normal(size=3), rng.uniform(1, 2, 3))
    return p


@pytest.mark.parametrize("with_bn", [True, False])
def test_round_trip_bit_identical(tmp_path, with_bn):
    p = _random_params(with_bn)
    path = tmp_path / "m.bin"
    save_model(p, path)
    q = load_model(path)
    for name in ("R", "Q", "U", "b"):
        assert getattr(p, name).tobytes() == getattr(q, name).tobytes()
    if with_bn:
        for name in ("gamma", "beta", "running_mean", "running_var", "eps", "momentum"):
            assert np.array_equal(getattr(p.bn, name), getattr(q.bn, name))
    else:
        assert q.bn is None
    assert q.feature_stats.mu.tobytes() == p.feature_stats.mu.tobytes()
    save_model(q, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_folded_round_trip(tmp_path):
    f = fold_bn(_random_params())
    save_model(f, tmp_path / "f.bin")
    g = load_model(tmp_path / "f.bin")
    assert isinstance(g, FoldedCrf) and g.P.tobytes() == f.P.tobytes()


def test_shape_mismatch(tmp_path):
    # header declares m=4 but R only has 3 columns' worth of values
    path = tmp_path / "bad.bin"
    write_container(path, KIND_CRF, (3, 4, 2), 0,
                    [np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((3, 4)), np.zeros(4)])
    with pytest.raises(ShapeError):
        load_model(path)


def test_version_and_magic(tmp_path):
    p = _random_params()
    path = tmp_path / "m.bin"
    save_model(p, path)
    blob = bytearray(path.read_bytes())
    blob[5:6] = b"9"
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        load_model(path)
    path.write_bytes(b"NOTAMODEL" + bytes(40))
    with pytest.raises(ModelFormatError):
        load_model(path)
    path.write_bytes(b"CE")
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_bn_flag_needs_payload(tmp_path):
    path = tmp_path / "m.bin"
    write_container(path, KIND_CRF, (3, 4, 2), FLAG_BN,
                    [np.zeros((2, 4)), np.zeros((2, 4)), np.zeros((3, 4)), np.zeros(4)])
    with pytest.raises(ShapeError):
        load_model(path)
