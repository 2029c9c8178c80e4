import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gfom_coupling import (
    BasisExhausted,
    Constant,
    OrderedBasis,
    RngStream,
    Separable,
    SystemSpec,
    build_coupling,
    gram_schmidt_step,
    run_gfom,
    se_amp,
    se_linear_closed_form,
    verify_identity,
)
from gfom_coupling.coupling import corrupt_aprime
from gfom_coupling.state_evolution import se_explicit

from conftest import linear_spec, tanh_amp_f


# ---------------------------------------------------------------- Gram-Schmidt

def test_first_step_normalises(gen):
    v = gen.standard_normal(20)
    q, used, idx = gram_schmidt_step(np.zeros((20, 0)), v)
    assert not used and idx is None
    assert np.allclose(q, math.sqrt(20) * v / np.linalg.norm(v), atol=1e-14)


def test_parallel_vector_triggers_fallback(gen):
    n = 10
    v = gen.standard_normal(n)
    q1, _, _ = gram_schmidt_step(np.zeros((n, 0)), v)
    q2, used, idx = gram_schmidt_step(q1[:, None], -3.0 * v)
    assert used and idx == 0
    assert abs(q1 @ q2) <= 1e-8 * n
    assert abs(np.linalg.norm(q2) - math.sqrt(n)) <= 1e-12


def test_zero_vector_triggers_fallback():
    q, used, idx = gram_schmidt_step(np.zeros((5, 0)), np.zeros(5))
    assert used and idx == 0
    assert np.allclose(q, [math.sqrt(5), 0, 0, 0, 0])


def test_hand_projection():
    # q1 along e_0 + e_1, candidate q1 + e_3 -> q2 = sqrt(n) e_3
    n = 6
    q1 = np.zeros(n)
    q1[:2] = math.sqrt(n / 2)
    e3 = np.zeros(n)
    e3[3] = 1.0
    q2, used, _ = gram_schmidt_step(q1[:, None], q1 + e3)
    assert not used
    assert np.allclose(q2, math.sqrt(n) * e3, atol=1e-12)


def test_fallback_skips_basis_vectors_in_span():
    n = 4
    Q = math.sqrt(n) * np.eye(n)[:, :2]
    q, used, idx = gram_schmidt_step(Q, Q[:, 1])
    assert used and idx == 2


def test_custom_basis(gen):
    n = 5
    B = np.linalg.qr(gen.standard_normal((n, n)))[0]
    q, used, idx = gram_schmidt_step(np.zeros((n, 0)), np.zeros(n), OrderedBasis(B))
    assert used and idx == 0
    assert np.allclose(q, math.sqrt(n) * B[:, 0], atol=1e-12)
    with pytest.raises(ValueError):
        OrderedBasis(np.ones((3, 3)))


def test_basis_exhausted():
    n = 3
    Q = math.sqrt(n) * np.eye(n)
    with pytest.raises(BasisExhausted):
        gram_schmidt_step(Q, np.ones(n))


@given(k=st.integers(1, 7), seed=st.integers(0, 2**32 - 1))
def test_gram_schmidt_keeps_frame(k, seed):
    gen = np.random.default_rng(seed)
    n = 8
    Q = np.zeros((n, 0))
    for _ in range(k):
        # near-dependent candidates exercise the second pass and the fallback
        v = Q @ gen.standard_normal(Q.shape[1]) + 10.0 ** gen.uniform(-12, 0) * gen.standard_normal(n)
        q, _, _ = gram_schmidt_step(Q, v)
        Q = np.column_stack([Q, q])
    assert np.abs(Q.T @ Q - n * np.eye(k)).max() <= 1e-8 * n


# ---------------------------------------------------------------- coupling

@pytest.fixture(scope="module")
def amp_setup():
    n, T = 200, 4
    sys, params = se_amp(tanh_amp_f(n, T), K=500, rng=RngStream(1))
    return sys, params


def test_run_invariants(amp_setup):
    sys, params = amp_setup
    run = build_coupling(sys, params, rng=RngStream(2))
    n, T = run.n, run.T
    assert np.abs(run.Q.T @ run.Q - n * np.eye(T)).max() <= 1e-8 * n
    assert np.allclose(run.R, np.triu(run.R), atol=1e-8 * np.abs(run.R).max())
    assert np.abs(run.FY - run.Q @ run.R).max() <= 1e-8 * np.abs(run.FY).max()
    assert np.abs(run.W - run.Z @ params.Omega).max() <= 1e-12
    assert np.abs(run.Y - run.MY - run.W).max() <= 1e-12
    assert np.array_equal(run.X, run_gfom(sys, run.A))
    assert math.isclose(run.coupling_error**2, float(np.sum(run.step_errors**2)), rel_tol=1e-12)


def test_identity_at_every_horizon(amp_setup):
    sys, params = amp_setup
    run = build_coupling(sys, params, rng=RngStream(3))
    for r in range(run.T):
        assert verify_identity(run, r) <= 1e-8
    assert verify_identity(run) <= 1e-8


def test_corrupted_aprime_detected(amp_setup):
    sys, params = amp_setup
    run = build_coupling(sys, params, rng=RngStream(4))
    assert verify_identity(corrupt_aprime(run)) > 1e-3


def test_shared_matrix_reused(amp_setup):
    sys, params = amp_setup
    run = build_coupling(sys, params, rng=RngStream(5))
    again = build_coupling(sys, params, A=run.A, Aprime=run.Aprime)
    assert again.A is run.A
    assert np.array_equal(again.Y, run.Y) and np.array_equal(again.X, run.X)


def test_single_step_z_variance():
    n, trials = 50, 10_000
    sys = SystemSpec(n, [Constant(np.ones(n))], [Constant(np.zeros(n))])
    params = se_explicit(sys, np.eye(1), np.zeros((1, 1)))
    Z = np.empty((trials, n))
    for i in range(trials):
        Z[i] = build_coupling(sys, params, rng=RngStream(6, (i,))).Z[:, 0]
    var = Z.var(axis=0, ddof=1)
    se = math.sqrt(2.0 / (trials - 1))
    assert np.all(np.abs(var - 1.0) <= 5 * se)
    assert abs(Z.mean()) <= 5 / math.sqrt(Z.size)


def test_zero_mean_maps_give_y_equal_w(gen):
    n, T = 40, 3
    spec = linear_spec(n, T, lam=0.0)
    params = se_linear_closed_form(spec)
    run = build_coupling(spec.system(), params, rng=RngStream(7))
    assert np.abs(run.Y - run.Z @ params.Omega).max() <= 1e-12


def test_fallback_frame_and_identity():
    n, T = 30, 4
    ones = Constant(np.ones(n))
    f = [ones, ones, Separable("tanh", {0: 1.0}), ones]
    g = [Constant(np.zeros(n))] * T
    sys = SystemSpec(n, f, g)
    params = se_explicit(sys, np.eye(T), np.zeros((T, T)))
    run = build_coupling(sys, params, rng=RngStream(8))
    assert [t for t, _ in run.fallback_log] == [1, 3]
    assert np.abs(run.Q.T @ run.Q - n * np.eye(T)).max() <= 1e-8 * n
    assert verify_identity(run) <= 1e-8


def test_more_steps_than_dimensions():
    n, T = 2, 3
    ones = Constant(np.ones(n))
    sys = SystemSpec(n, [ones] * T, [Constant(np.zeros(n))] * T)
    params = se_explicit(sys, np.eye(T), np.zeros((T, T)))
    with pytest.raises(BasisExhausted):
        build_coupling(sys, params)


def test_z_gram_close_to_identity(amp_setup):
    sys, params = amp_setup
    n, T, trials = sys.n, sys.T, 40
    G = np.zeros((T, T))
    for i in range(trials):
        Z = build_coupling(sys, params, rng=RngStream(9, (i,))).Z
        G += Z.T @ Z
    G /= n * trials
    assert np.abs(G - np.eye(T)).max() <= 5 * math.sqrt(2.0 / (n * trials))


def test_linear_case_marginal_law_of_y():
    n, T, trials = 20, 3, 2000
    gen = RngStream(10).generator()
    F = gen.standard_normal((n, T))
    Lam = np.triu(0.5 * np.ones((T, T)), 1)
    from gfom_coupling import LinearCaseSpec
    spec = LinearCaseSpec(F, Lam, Lam)
    params = se_linear_closed_form(spec)
    sys = spec.system()
    Ys = np.array([build_coupling(sys, params, rng=RngStream(11, (i,))).Y for i in range(trials)])
    R = np.linalg.inv(np.eye(T) - Lam)
    target = R.T @ params.Sigma @ R
    # per-coordinate covariances across trials, pooled over the n coordinates
    C = np.einsum("kit,kis->kts", Ys, Ys) / n
    mean, se = C.mean(axis=0), C.std(axis=0, ddof=1) / math.sqrt(trials)
    assert np.all(np.abs(mean - target) <= 5 * se)
    # distinct coordinates are uncorrelated
    cross = Ys[:, 0, :, None] * Ys[:, 1, None, :]
    assert np.all(np.abs(cross.mean(axis=0)) <= 5 * cross.std(axis=0, ddof=1) / math.sqrt(trials))
