import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daclab.errors import InvalidArgumentError
from daclab.graph import (
    KINDS,
    ONE_PEER_KINDS,
    build_complete,
    build_static_ring,
    laplacian_spectrum,
    make_schedule,
    mixing_at,
    pairing_at,
    period_average,
    validate_mixing,
)


def test_complete_entries_uniform():
    op = build_complete(4)
    assert np.all(op.W == 0.25)


def test_complete_single_worker_is_identity():
    assert build_complete(1).W.tolist() == [[1.0]]


def test_zero_workers_rejected():
    with pytest.raises(InvalidArgumentError):
        build_complete(0)


def test_complete_laplacian_spectrum():
    spec = laplacian_spectrum(build_complete(4))
    np.testing.assert_allclose(spec.eigenvalues, [0, 1, 1, 1], atol=1e-12)


def test_static_ring_spectrum_matches_circulant_formula():
    # circulant(1/2, 1/4, 0, 1/4): L eigenvalues 1/2 - 1/2 cos(2 pi k / 4)
    spec = laplacian_spectrum(build_static_ring(4))
    np.testing.assert_allclose(spec.eigenvalues, [0, 0.5, 0.5, 1.0], atol=1e-12)
    assert spec.lambda_min_w == pytest.approx(0.0, abs=1e-12)


def test_single_worker_spectrum():
    spec = laplacian_spectrum(build_complete(1))
    assert spec.eigenvalues.tolist() == [0.0]


def test_unknown_kind_rejected():
    with pytest.raises(InvalidArgumentError):
        make_schedule("torus", 4)


def test_one_peer_ring_alternates():
    s = make_schedule("one_peer_ring", 4)
    assert pairing_at(s, 0) == [(0, 1), (2, 3)]
    assert pairing_at(s, 1) == [(1, 2), (3, 0)]
    W = mixing_at(s, 0).W
    np.testing.assert_array_equal(W[:2, :2], np.full((2, 2), 0.5))
    np.testing.assert_array_equal(W[:2, 2:], 0.0)


def test_one_peer_ring_odd_n_keeps_identity_row():
    s = make_schedule("one_peer_ring", 5)
    W = mixing_at(s, 0).W
    assert W[4, 4] == 1.0 and W[4, :4].sum() == 0.0
    assert validate_mixing(W).passed


def test_one_peer_exp_power_of_two_is_perfect_matching():
    s = make_schedule("one_peer_exp", 8)
    assert s.period == 3
    for t in range(6):
        pairs = pairing_at(s, t)
        offset = 2 ** (t % 3)
        assert len(pairs) == 4
        assert sorted(i for p in pairs for i in p) == list(range(8))
        assert all(j - i == offset or (i ^ j) == offset for i, j in pairs)
        assert validate_mixing(mixing_at(s, t)).passed


def test_one_peer_exp_non_power_of_two_stays_self():
    s = make_schedule("one_peer_exp", 6)
    for t in range(s.period):
        W = mixing_at(s, t).W
        assert validate_mixing(W).passed
        matched = {i for p in pairing_at(s, t) for i in p}
        for i in set(range(6)) - matched:
            assert W[i, i] == 1.0


def test_validate_detects_row_sum_violation():
    W = build_complete(4).W.copy()
    W[0, 0] -= 0.1
    rep = validate_mixing(W)
    assert not rep["doubly_stochastic"].passed
    assert rep["doubly_stochastic"].violation == pytest.approx(0.1)


def test_validate_detects_asymmetry():
    W = build_complete(4).W.copy()
    W[0, 1] += 1e-6
    W[0, 0] -= 1e-6
    rep = validate_mixing(W)
    assert not rep["symmetric"].passed


def test_validate_complete_all_pass():
    rep = validate_mixing(build_complete(4))
    assert rep.passed
    assert {c.name for c in rep.checks} == {"symmetric", "doubly_stochastic", "nonnegative", "spectrum"}


def test_period_average_flagged_approximate():
    op = period_average(make_schedule("one_peer_ring", 6))
    assert op.approximate
    assert validate_mixing(op).passed
    assert not period_average(make_schedule("complete", 6)).approximate


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(KINDS), n=st.integers(1, 17), t=st.integers(0, 50))
def test_every_round_is_valid(kind, n, t):
    op = mixing_at(make_schedule(kind, n), t)
    assert validate_mixing(op).passed
    if kind in ONE_PEER_KINDS:
        assert np.array_equal(op.W @ np.ones(n), np.ones(n))


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(ONE_PEER_KINDS), n=st.integers(2, 17), t=st.integers(0, 50))
def test_pair_averaging_is_idempotent(kind, n, t):
    W = mixing_at(make_schedule(kind, n), t).W
    np.testing.assert_allclose(W @ W, W, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(KINDS), n=st.integers(2, 17), seed=st.integers(0, 2**31 - 1))
def test_period_product_contracts_disagreement(kind, n, seed):
    s = make_schedule(kind, n)
    v = np.random.default_rng(seed).standard_normal(n)
    v -= v.mean()
    out = v.copy()
    for t in range(s.period):
        out = mixing_at(s, t).W @ out
    assert np.linalg.norm(out) < np.linalg.norm(v)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(KINDS), n=st.integers(1, 17))
def test_spectrum_reconstructs_laplacian(kind, n):
    op = period_average(make_schedule(kind, n))
    spec = laplacian_spectrum(op)
    U, lam = spec.eigenvectors, spec.eigenvalues
    np.testing.assert_allclose(U @ np.diag(lam) @ U.T, np.eye(n) - op.W, atol=1e-10)
    np.testing.assert_allclose(U.T @ U, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(U[:, 0], np.full(n, 1 / np.sqrt(n)), atol=1e-12)
    assert lam[0] == 0.0 and np.all(np.diff(lam) >= -1e-12) and np.all(lam >= 0)
