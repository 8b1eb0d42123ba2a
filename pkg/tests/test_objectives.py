import math

import numpy as np
import pytest

from cecrf.data import LabeledSequence
from cecrf.errors import BnStatisticsError
from cecrf.model import ModelDims, init_params
from cecrf.objectives import (NONE, OBJECTIVES, GradientSet, PairSamples, finite_diff_check,
                              global_nll, gradcheck_instance, l2_penalty, memm_nll,
                              piecewise_nll, pseudolikelihood_nll, pwpl_nll, pwpl_terms)
from cecrf.trellis import ScoreTable, brute_force_oracle


def lse(v):
    v = np.asarray(v, dtype=float)
    return v.max() + math.log(np.exp(v - v.max()).sum())


def random_setup(seed, s=3, m=4, d=2, lengths=(1, 3, 4)):
    rng = np.random.default_rng(seed)
    p = init_params(ModelDims(s, m, d), seed, 1.0, use_bn=False)
    p.b = rng.normal(size=m)
    seqs = [LabeledSequence(rng.normal(size=(n, s)), rng.integers(m, size=n)) for n in lengths]
    return p, seqs


def unary_ce(p, seqs):
    total = 0.0
    for seq in seqs:
        u = seq.features @ p.U + p.b
        total += sum(lse(u[t]) - u[t, y] for t, y in enumerate(seq.labels))
    return total


def enum_crf_nll(P, p, seqs):
    total = 0.0
    for seq in seqs:
        o = brute_force_oracle(ScoreTable(seq.features @ p.U + p.b, P))
        k = int(np.flatnonzero((o.sequences == seq.labels).all(axis=1))[0])
        total += o.log_z - o.scores[k]
    return total


def test_global_zero_pairwise_decouples():
    p, seqs = random_setup(0)
    p.Q[:] = 0.0
    assert global_nll(p, seqs)[0] == pytest.approx(unary_ce(p, seqs), abs=1e-12)


def test_global_matches_enumeration():
    p, seqs = random_setup(1)
    assert global_nll(p, seqs)[0] == pytest.approx(enum_crf_nll(p.R.T @ p.Q, p, seqs), abs=1e-10)


def test_global_full_rank():
    p, seqs = random_setup(2, d=4)
    P_star = np.random.default_rng(5).normal(size=(4, 4))
    p.R, p.Q = np.eye(4), P_star.copy()
    assert global_nll(p, seqs)[0] == pytest.approx(enum_crf_nll(P_star, p, seqs), abs=1e-12)


def test_memm_no_neighbors():
    p = init_params(ModelDims(3, 4, 2), 3, 1.0)
    rng = np.random.default_rng(0)
    H, y = rng.normal(size=(5, 3)), rng.integers(4, size=5)
    loss, g, stats = memm_nll(p, PairSamples([NONE] * 5, H, y), "train")
    u = H @ p.U + p.b
    assert loss == pytest.approx(np.mean([lse(u[i]) - u[i, y[i]] for i in range(5)]), abs=1e-12)
    assert not (g.dR.any() or g.dQ.any() or g.dgamma.any() or g.dbeta.any())
    assert stats is None


def test_memm_hand_value():
    p = init_params(ModelDims(1, 2, 1), 0, use_bn=False)
    p.R = np.array([[1.0, -1.0]])
    p.Q = np.array([[0.5, 2.0]])
    p.U = np.array([[1.0, 0.0]])
    p.b = np.array([0.0, 0.25])
    # left neighbor class 0, h = 3: z0 = 3 + 0.5, z1 = 0.25 + 2
    z0, z1 = 3.5, 2.25
    loss = memm_nll(p, PairSamples([0], [[3.0]], [1]), "off")[0]
    assert loss == pytest.approx(-math.log(math.exp(z1) / (math.exp(z0) + math.exp(z1))),
                                 abs=1e-14)


def test_memm_single_neighbor_train_rejected():
    p = init_params(ModelDims(3, 4, 2), 0)
    with pytest.raises(BnStatisticsError):
        memm_nll(p, PairSamples([1, NONE], np.zeros((2, 3)), [0, 1]), "train")


def test_memm_running_stats_returned():
    p = init_params(ModelDims(3, 4, 2), 0, 1.0)
    prev = np.array([0, 2, 2, NONE])
    _, _, (rm, rv) = memm_nll(p, PairSamples(prev, np.zeros((4, 3)), [0, 1, 2, 3]), "train")
    E = p.R[:, [0, 2, 2]].T
    np.testing.assert_allclose(rm, 0.1 * E.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * E.var(axis=0))


def test_pseudolikelihood_conditionals():
    p, seqs = random_setup(4, m=3, lengths=(4,))
    seq = seqs[0]
    P, u, y = p.R.T @ p.Q, seq.features @ p.U + p.b, seq.labels
    st = ScoreTable(u, P)
    o = brute_force_oracle(st)
    total = 0.0
    for t in range(4):
        # renormalize full-sequence scores over y_t with the rest fixed
        alts = []
        for a in range(3):
            z = y.copy()
            z[t] = a
            alts.append(o.scores[np.flatnonzero((o.sequences == z).all(axis=1))[0]])
        total -= alts[y[t]] - lse(alts)
    assert pseudolikelihood_nll(p, seqs)[0] == pytest.approx(total, abs=1e-10)


def test_piecewise_double_sum():
    p, seqs = random_setup(5, m=3, lengths=(4, 2))
    P = p.R.T @ p.Q
    total = 0.0
    for seq in seqs:
        u, y = seq.features @ p.U + p.b, seq.labels
        total -= u[0, y[0]] - lse(u[0])
        for t in range(1, len(y)):
            terms = [P[b, a] + u[t, a] for a in range(3) for b in range(3)]
            total -= P[y[t - 1], y[t]] + u[t, y[t]] - lse(terms)
    assert piecewise_nll(p, seqs)[0] == pytest.approx(total, abs=1e-10)


def test_piecewise_zero_pairwise():
    p, seqs = random_setup(6, lengths=(3,))
    p.Q[:] = 0.0
    seq = seqs[0]
    u = seq.features @ p.U + p.b
    expect = sum(lse(u[t]) - u[t, y] for t, y in enumerate(seq.labels)) + 2 * math.log(4)
    assert piecewise_nll(p, seqs)[0] == pytest.approx(expect, abs=1e-12)


def test_pwpl_node_split_oracle():
    p, seqs = random_setup(7, m=3, lengths=(4, 1, 3))
    P = p.R.T @ p.Q
    total = 0.0
    for seq in seqs:
        u, y = seq.features @ p.U + p.b, seq.labels
        for t in range(len(y)):
            ctx = P[y[t - 1]] if t else np.zeros(3)
            fw = [u[t, a] + ctx[a] for a in range(3)]
            total -= fw[y[t]] - lse(fw)
            if t:
                # the split copy of y_{t-1} carries no unary evidence
                bw = [P[b, y[t]] for b in range(3)]
                total -= bw[y[t - 1]] - lse(bw)
    assert pwpl_nll(p, seqs)[0] == pytest.approx(total, abs=1e-10)


def test_pwpl_zero_pairwise():
    p, seqs = random_setup(8, lengths=(3,))
    p.Q[:] = 0.0
    fw, bw = pwpl_terms(p, seqs[0])
    np.testing.assert_allclose(bw, [0.0, -math.log(4), -math.log(4)], atol=1e-14)
    u = seqs[0].features @ p.U + p.b
    np.testing.assert_allclose(fw, [u[t, y] - lse(u[t]) for t, y in enumerate(seqs[0].labels)])


def test_l2_examples():
    p = init_params(ModelDims(1, 2, 1), 0, use_bn=False)
    loss, g = l2_penalty(p, 0.0)
    assert loss == 0.0 and not any(v.any() for _, v in g.items())
    p.R[:] = 0.0
    p.Q[:] = 0.0
    p.U[:] = 0.0
    p.U[0, 0] = 2.0
    loss, g = l2_penalty(p, 1.0)
    assert loss == 2.0 and g.dU[0, 0] == 2.0
    with pytest.raises(ValueError):
        l2_penalty(p, -1.0)


def test_finite_diff_quadratic_self_test():
    p = init_params(ModelDims(2, 3, 2), 1, 1.0, use_bn=False)
    A = np.random.default_rng(0).normal(size=(2, 3))

    def quad(params, _):
        g = GradientSet.zeros(params.dims)
        g.dR = 2 * A * params.R
        return float((A * params.R**2).sum()), g

    assert finite_diff_check(quad, p, None) <= 1e-10


def test_finite_diff_catches_wrong_gradient():
    p = init_params(ModelDims(2, 3, 2), 1, 1.0, use_bn=False)

    def wrong(params, _):
        g = GradientSet.zeros(params.dims)
        g.dR = 3 * params.R
        return float((params.R**2).sum()), g

    assert finite_diff_check(wrong, p, None) > 0.1


@pytest.mark.parametrize("name", sorted(OBJECTIVES))
def test_gradients(name):
    for seed in range(3):
        params, data = gradcheck_instance(name, seed)
        tol = 1e-6 if name == "l2" else 1e-4
        assert finite_diff_check(name, params, data) <= tol


def test_threads_do_not_change_results():
    p, seqs = random_setup(9, lengths=(1, 2, 3, 4, 5, 2))
    for fn in (global_nll, pseudolikelihood_nll, piecewise_nll, pwpl_nll):
        a, ga = fn(p, seqs)
        b, gb = fn(p, seqs, threads=3)
        assert a == b
        for (_, x), (_, y) in zip(ga.items(), gb.items()):
            assert x.tobytes() == y.tobytes()
