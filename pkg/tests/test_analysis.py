import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daclab.analysis import (
    alignment_score,
    consensus_error,
    envelope_terms,
    estimate_innovation_variances,
    hessian_projection,
    laplacian_modes,
    lanczos_top_eigenvalue,
    mode_spectral_radius,
    radius_sq,
    simulate_mode_ar1,
    stability_threshold,
    stationary_moments,
    surrogate_terms,
    tilt_prediction,
    tilt_weight,
    variance_bounds,
)
from daclab.errors import InsufficientDataError, InvalidArgumentError, UnstableModeError
from daclab.graph import build_complete, build_static_ring, laplacian_spectrum
from daclab.problems import MLPProblem, NoiseModel, QuadraticProblem, SyntheticTask, make_quadratic


def diag_problem(lams, noise=None):
    lams = np.asarray(lams, dtype=float)
    return QuadraticProblem(lams, np.eye(lams.size), np.zeros(lams.size), noise=noise)


def random_orthonormal(d, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q


# consensus error and mode energies


def test_consensus_error_examples():
    assert np.all(consensus_error(np.ones((3, 4))) == 0)
    delta = consensus_error([[1.0, -1.0]])
    np.testing.assert_array_equal(delta, [[1.0, -1.0]])
    assert radius_sq(delta) == 2.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 8), n=st.integers(1, 9))
def test_consensus_error_annihilates_ones(seed, d, n):
    X = np.random.default_rng(seed).standard_normal((d, n))
    assert np.abs(consensus_error(X).sum(axis=1)).max() <= 1e-12 * max(1.0, np.abs(X).max() * n)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 10), kind=st.sampled_from(["complete", "static_ring"]))
def test_mode_energies_preserve_norm(seed, n, kind):
    d = 6
    op = build_complete(n) if kind == "complete" else build_static_ring(n)
    U_L = laplacian_spectrum(op).eigenvectors
    delta = consensus_error(np.random.default_rng(seed).standard_normal((d, n)))
    r2 = radius_sq(delta)
    Z, e_L = laplacian_modes(delta, U_L)
    e_H = hessian_projection(delta, random_orthonormal(d, seed))
    assert np.linalg.norm(Z) == pytest.approx(np.linalg.norm(delta), rel=1e-10)
    assert e_L.sum() == pytest.approx(r2, rel=1e-8)
    assert e_H.sum() == pytest.approx(r2, rel=1e-8)
    assert e_L[0] <= 1e-10 * max(1.0, r2)
    assert np.all(e_H >= 0)


def test_laplacian_modes_of_zero():
    Z, e = laplacian_modes(np.zeros((3, 4)), laplacian_spectrum(build_complete(4)).eigenvectors)
    assert not Z.any() and not e.any()


def test_energy_concentrated_on_one_direction():
    U = random_orthonormal(5, 1)
    delta = np.outer(U[:, -1], [1.0, -2.0, 1.0])
    e = hessian_projection(delta, U)
    assert e[-1] == pytest.approx(radius_sq(delta))
    assert e[:-1].sum() <= 1e-12
    assert alignment_score(e, 1) == pytest.approx(1.0)


# alignment


def test_alignment_uniform_energy():
    assert alignment_score(np.ones(50), 5) == pytest.approx(0.1)


def test_alignment_respects_eigenvalue_order():
    energies = [0.0, 0.0, 1.0]
    assert alignment_score(energies, 1, eigenvalues=[3.0, 2.0, 1.0]) == 0.0
    assert alignment_score(energies, 1) == 1.0


def test_alignment_bad_k():
    with pytest.raises(InvalidArgumentError):
        alignment_score(np.ones(4), 0)
    with pytest.raises(InvalidArgumentError):
        alignment_score(np.ones(4), 5)


def test_alignment_random_baseline():
    rng = np.random.default_rng(0)
    U = random_orthonormal(50, 2)
    scores = [alignment_score(hessian_projection(consensus_error(rng.standard_normal((50, 4))), U), 5)
              for _ in range(2000)]
    assert np.mean(scores) == pytest.approx(0.1, abs=0.005)


# surrogate and envelope


def direct_objective(X, alpha, W, problem):
    n = X.shape[1]
    total = sum(problem.loss(X[:, i]) for i in range(n))
    for i in range(n):
        for j in range(n):
            total += W[i, j] * np.sum((X[:, i] - X[:, j]) ** 2) / (2 * alpha)
    return total


def test_surrogate_hand_example():
    prob = diag_problem([2.0, 1.0])
    X = np.array([[1.0, -1.0], [0.0, 0.0]])
    W = np.full((2, 2), 0.5)
    terms = surrogate_terms(X, 0.1, W, prob)
    assert terms.deployed == pytest.approx(0.0, abs=1e-15)
    assert terms.sharpness == pytest.approx(2.0)
    assert terms.regularizer == pytest.approx(20.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(1e-3, 1.0))
def test_surrogate_matches_direct_evaluation(seed, alpha):
    prob = make_quadratic(4, 10.0, seed=seed)
    X = np.random.default_rng(seed).standard_normal((4, 5))
    W = build_static_ring(5).W
    total = surrogate_terms(X, alpha, W, prob).total
    assert total == pytest.approx(direct_objective(X, alpha, W, prob), rel=1e-10)


def test_surrogate_identical_columns():
    prob = make_quadratic(3)
    X = np.repeat(np.array([[1.0], [2.0], [3.0]]), 4, axis=1)
    terms = surrogate_terms(X, 0.5, build_complete(4), prob)
    assert terms.sharpness == pytest.approx(0.0, abs=1e-12) and terms.regularizer == 0.0


def test_surrogate_requires_positive_alpha():
    with pytest.raises(InvalidArgumentError):
        surrogate_terms(np.zeros((1, 2)), 0.0, np.eye(2), diag_problem([1.0]))


def test_envelope_hand_example():
    env = envelope_terms(np.array([[1.0, -1.0], [0.0, 0.0]]), diag_problem([2.0, 1.0]))
    assert env.center_loss == 0.0
    assert env.quad_term == pytest.approx(1.0)
    assert env.mean_worker_loss == pytest.approx(1.0)
    assert env.residual == pytest.approx(0.0, abs=1e-15)
    assert env.trace_sigma == pytest.approx(1.0)


def test_envelope_identical_columns():
    prob = make_quadratic(4, seed=2)
    X = np.repeat(np.ones((4, 1)), 3, axis=1)
    env = envelope_terms(X, prob)
    assert env.quad_term == 0.0 and env.residual == pytest.approx(0.0, abs=1e-14)
    assert env.center_loss == pytest.approx(prob.loss(np.ones(4)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_envelope_residual_vanishes_on_quadratics(seed):
    prob = make_quadratic(8, 100.0, seed=seed, f_min=0.3)
    X = prob.x_star[:, None] + np.random.default_rng(seed).standard_normal((8, 6))
    env = envelope_terms(X, prob)
    assert abs(env.residual) <= 1e-9 * max(1.0, env.quad_term)


def test_envelope_on_mlp_is_flagged_approximate():
    prob = MLPProblem(SyntheticTask(samples=64, widths=(2, 4, 2)))
    x = prob.initial_point(np.random.default_rng(0))
    X = x[:, None] + 1e-3 * np.random.default_rng(1).standard_normal((prob.dim, 3))
    env = envelope_terms(X, prob)
    assert env.approximate
    assert np.isfinite(env.residual) and env.trace_sigma > 0


# stationary mode moments


def test_stationary_moments_examples():
    m, _ = stationary_moments(0.1, 0.5, 1.0, 2.0, 1.0)
    _, V = stationary_moments(0.1, 0.5, 1.0, 0.0, 1.0)
    assert m == pytest.approx(-0.4)
    assert V == pytest.approx(0.01 / 0.75)


@pytest.mark.parametrize("gamma,lam", [(1.0, 2.0), (0.5, 5.0), (0.0, 1.0)])
def test_unstable_mode_rejected(gamma, lam):
    with pytest.raises(UnstableModeError):
        stationary_moments(0.1, gamma, lam, 0.0, 1.0)


def test_ar1_simulation_matches_moments():
    alpha, gamma, lam, mu, s2 = 0.1, 0.5, 1.0, 2.0, 1.0
    N = 1_000_000
    z = simulate_mode_ar1(alpha, gamma, lam, mu, s2, N, np.random.default_rng(0))
    m, V = stationary_moments(alpha, gamma, lam, mu, s2)
    assert abs(z.mean() - m) <= 4 * np.sqrt(V / N)
    assert z.var() == pytest.approx(V, rel=0.02)


@given(alpha=st.floats(1e-3, 1), gamma=st.floats(0.01, 1), lam=st.floats(0.01, 1), s2=st.floats(1e-3, 10))
def test_variance_within_bounds(alpha, gamma, lam, s2):
    _, V = stationary_moments(alpha, gamma, lam, 0.0, s2)
    lo, hi = variance_bounds(alpha, gamma, lam, s2)
    assert lo * (1 - 1e-12) <= V <= hi * (1 + 1e-12)


# stability threshold


def test_stability_threshold_examples():
    assert stability_threshold(0.0, 1.0, 2.0) == pytest.approx(0.5)
    assert stability_threshold(0.3, 0.0, 4.0) == pytest.approx(0.5)
    assert stability_threshold(-1.0, 1.0, 1.0) == 0.0
    with pytest.raises(InvalidArgumentError):
        stability_threshold(0.0, 1.0, 0.0)


def disagreement_radius_oracle(W, gamma, alpha, lam):
    n = W.shape[0]
    # orthonormal basis of the complement of the ones vector
    B = np.linalg.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]))[0][:, 1:]
    A = (1 - gamma - alpha * lam) * np.eye(n) + gamma * W
    return np.max(np.abs(np.linalg.eigvals(B.T @ A @ B)))


@pytest.mark.parametrize("op", [build_complete(4), build_static_ring(4), build_static_ring(5)])
@pytest.mark.parametrize("gamma", [0.0, 0.3, 0.7, 1.0])
@pytest.mark.parametrize("lam", [0.5, 2.0])
def test_threshold_matches_spectral_radius_oracle(op, gamma, lam):
    lmin = laplacian_spectrum(op).lambda_min_w
    crit = stability_threshold(lmin, gamma, lam)
    grid = np.linspace(0.01, 1.5 * max(crit, 0.1), 200)
    step = grid[1] - grid[0]
    unstable = [a for a in grid if disagreement_radius_oracle(op.W, gamma, a, lam) >= 1 - 1e-12]
    assert unstable, "grid must reach the unstable region"
    assert abs(unstable[0] - crit) <= step
    for a in grid[::17]:
        assert mode_spectral_radius(op, gamma, a, lam) == pytest.approx(
            disagreement_radius_oracle(op.W, gamma, a, lam), abs=1e-12)


# tilt


def test_tilt_weight_example():
    assert tilt_weight(2.0, 0.1, 1.0, 0.01) == pytest.approx(2 / 0.12)


@given(lam=st.floats(1e-3, 100), ratio=st.floats(1.001, 100), gamma=st.floats(1e-3, 1),
       lam_l=st.floats(1e-3, 2), alpha=st.floats(1e-4, 1))
def test_tilt_weight_monotone(lam, ratio, gamma, lam_l, alpha):
    hi = lam * ratio
    w_lo, w_hi = tilt_weight(lam, gamma, lam_l, alpha), tilt_weight(hi, gamma, lam_l, alpha)
    assert w_hi > w_lo
    assert (hi * w_hi) / hi > (lam * w_lo) / lam


def test_tilt_zero_innovation():
    pred = tilt_prediction(0.01, 0.1, [0, 1, 1, 1], [1.0, 2.0], np.zeros((2, 4)))
    assert pred.value == 0.0 and pred.exact_value == 0.0


def test_tilt_hand_sum():
    # single Hessian mode, two graph modes: (alpha^2 / 4n) * w * q
    pred = tilt_prediction(0.01, 0.1, [0.0, 1.0], [2.0], np.array([[5.0, 3.0]]))
    assert pred.value == pytest.approx(0.01**2 / 8 * (2 / 0.12) * 3.0)
    assert pred.max_step_sum == pytest.approx(0.12)
    assert pred.small_stepsize


def test_tilt_shape_check():
    with pytest.raises(InvalidArgumentError):
        tilt_prediction(0.01, 0.1, [0, 1], [1.0, 2.0], np.zeros((2, 3)))


# innovation variances


def test_innovation_variances_need_samples():
    with pytest.raises(InsufficientDataError):
        estimate_innovation_variances(np.zeros((99, 3, 4)), np.eye(3), np.eye(4))


def test_innovation_variances_zero_noise():
    q = estimate_innovation_variances(np.zeros((200, 3, 4)), np.eye(3), np.eye(4))
    assert not q.any()


def test_innovation_variances_isotropic():
    d, n, s2 = 5, 4, 0.3
    U_L = laplacian_spectrum(build_complete(n)).eigenvectors
    U_H = random_orthonormal(d, 4)
    S = np.sqrt(s2) * np.random.default_rng(5).standard_normal((20_000, d, n))
    q = estimate_innovation_variances(S, U_H, U_L)
    np.testing.assert_allclose(q[:, 1:], s2, rtol=0.1)
    assert np.abs(q[:, 0]).max() < 1e-20
    # averaged over all graph modes, including the consensus mode
    assert q.mean() == pytest.approx(s2 * (1 - 1 / n), rel=0.1)


def test_innovation_variances_track_curvature_under_aligned_noise():
    n = 4
    prob = make_quadratic(6, 20.0, seed=1, noise=NoiseModel("hessian_aligned", c=0.2))
    x = prob.x_star + 0.7
    rng = np.random.default_rng(9)
    S = np.array([[prob.noise_sample(x, rng) for _ in range(n)] for _ in range(20_000)]).transpose(0, 2, 1)
    U_L = laplacian_spectrum(build_static_ring(n)).eigenvectors
    q = estimate_innovation_variances(S, prob.eigenvectors, U_L)
    ratio = q[:, 1:] / prob.eigenvalues[:, None]
    np.testing.assert_allclose(ratio, ratio.mean(), rtol=0.15)


# Lanczos


def test_lanczos_small_diagonal():
    H = np.diag([1.0, 2.0, 3.0])
    res = lanczos_top_eigenvalue(lambda v: H @ v, 3, iters=15)
    assert res.eigenvalue == pytest.approx(3.0, abs=1e-10)
    assert res.iterations <= 3


def test_lanczos_single_iteration_is_rayleigh_quotient():
    H = np.diag(np.arange(1.0, 9.0))
    probes = []

    def hvp(v):
        probes.append(v.copy())
        return H @ v

    res = lanczos_top_eigenvalue(hvp, 8, iters=1, seed=3)
    v = probes[0]
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert res.eigenvalue == pytest.approx(v @ H @ v, rel=1e-14)


def test_lanczos_is_deterministic():
    H = np.diag(np.linspace(1, 10, 30))
    a = lanczos_top_eigenvalue(lambda v: H @ v, 30, iters=8, seed=1)
    b = lanczos_top_eigenvalue(lambda v: H @ v, 30, iters=8, seed=1)
    assert a.eigenvalue == b.eigenvalue


def test_lanczos_breakdown_flags_early_stop():
    # every vector is an eigenvector, so the Krylov space stops growing after one step
    H = np.eye(10) * 4.0
    res = lanczos_top_eigenvalue(lambda v: H @ v, 10, iters=15)
    assert res.early_stop and res.iterations == 1
    assert res.eigenvalue == pytest.approx(4.0)


def test_lanczos_ritz_vectors_ascending():
    prob = make_quadratic(6, 10.0, seed=2)
    res = lanczos_top_eigenvalue(lambda v: prob.hvp(prob.x_star, v), 6, iters=6, ritz_vectors=3)
    np.testing.assert_allclose(res.ritz_values, prob.eigenvalues[-3:], rtol=1e-10)
    for k in range(3):
        assert abs(res.ritz_vectors[:, k] @ prob.eigenvectors[:, 3 + k]) == pytest.approx(1.0, abs=1e-8)


def test_lanczos_rejects_zero_iterations():
    with pytest.raises(InvalidArgumentError):
        lanczos_top_eigenvalue(lambda v: v, 3, iters=0)
