"""Communication topologies, mixing operators and Laplacian spectra.

A mixing operator ``W`` is a symmetric, non-negative, doubly stochastic
``n x n`` matrix; ``L = I - W`` is its Laplacian.  Static kinds return the
same ``W`` every round, one-peer kinds return a perfect (or near-perfect)
pairwise matching that changes with the round index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalError

KINDS = ("complete", "static_ring", "one_peer_ring", "one_peer_exp")
ONE_PEER_KINDS = ("one_peer_ring", "one_peer_exp")


@dataclass(frozen=True)
class MixingOperator:
    n: int
    W: np.ndarray
    kind: str
    approximate: bool = False  # True for period-averaged one-peer operators

    @property
    def laplacian(self) -> np.ndarray:
        return np.eye(self.n) - self.W


@dataclass(frozen=True)
class TopologySchedule:
    kind: str
    n: int
    period: int


@dataclass(frozen=True)
class LaplacianSpectrum:
    eigenvalues: np.ndarray  # ascending, eigenvalues[0] == 0
    eigenvectors: np.ndarray  # columns; column 0 is 1/sqrt(n)

    @property
    def lambda_min_w(self) -> float:
        """Smallest eigenvalue of ``W = I - L``."""
        return float(1.0 - self.eigenvalues[-1])


@dataclass
class CheckResult:
    name: str
    passed: bool
    violation: float


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _check_n(n) -> int:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 1:
        raise InvalidArgumentError(f"worker count must be a positive integer, got {n!r}")
    return int(n)


def build_complete(n: int) -> MixingOperator:
    n = _check_n(n)
    return MixingOperator(n, np.full((n, n), 1.0 / n), "complete")


def build_static_ring(n: int) -> MixingOperator:
    """Lazy Metropolis ring: 1/2 on the diagonal, 1/4 to each ring neighbour."""
    n = _check_n(n)
    W = np.zeros((n, n))
    if n == 1:
        W[0, 0] = 1.0
    else:
        for i in range(n):
            W[i, i] += 0.5
            W[i, (i + 1) % n] += 0.25
            W[i, (i - 1) % n] += 0.25
    return MixingOperator(n, W, "static_ring")


def _exp_offsets(n: int) -> list[int]:
    offsets = []
    s = 1
    while s < n:
        offsets.append(s)
        s *= 2
    return offsets


def make_schedule(kind: str, n: int) -> TopologySchedule:
    n = _check_n(n)
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown topology kind {kind!r}; expected one of {KINDS}")
    if kind == "one_peer_ring":
        period = 2 if n > 2 else 1
    elif kind == "one_peer_exp":
        period = max(1, len(_exp_offsets(n)))
    else:
        period = 1
    return TopologySchedule(kind, n, period)


def pairing_at(schedule: TopologySchedule, t: int) -> list[tuple[int, int]]:
    """Worker pairs averaging together at round ``t`` (one-peer kinds only).

    One-peer ring alternates the matchings (0,1),(2,3),... and (1,2),(3,4),...
    with wrap-around when ``n`` is even.  One-peer exponential pairs worker
    ``i`` with ``i XOR 2**k`` for the offset ``2**k`` of the round; workers whose
    partner index falls outside ``[0, n)`` stay with themselves.
    """
    n = schedule.n
    if schedule.kind == "one_peer_ring":
        if n == 1:
            return []
        start = t % 2
        pairs = []
        for i in range(start, n, 2):
            j = i + 1
            if j < n:
                pairs.append((i, j))
            elif n % 2 == 0 and n > 2:
                pairs.append((i, 0))
        return pairs
    if schedule.kind == "one_peer_exp":
        offsets = _exp_offsets(n)
        if not offsets:
            return []
        s = offsets[t % len(offsets)]
        return [(i, i ^ s) for i in range(n) if i < (i ^ s) < n]
    raise InvalidArgumentError(f"{schedule.kind!r} is not a one-peer topology")


def mixing_at(schedule: TopologySchedule, t: int) -> MixingOperator:
    kind, n = schedule.kind, schedule.n
    if kind == "complete":
        return build_complete(n)
    if kind == "static_ring":
        return build_static_ring(n)
    if kind not in ONE_PEER_KINDS:
        raise InvalidArgumentError(f"unknown topology kind {kind!r}")
    W = np.eye(n)
    for i, j in pairing_at(schedule, t):
        W[i, i] = W[j, j] = W[i, j] = W[j, i] = 0.5
    return MixingOperator(n, W, kind)


def period_average(schedule: TopologySchedule) -> MixingOperator:
    """Mean of the mixing operators over one schedule period.

    Analysis code that needs a fixed ``W`` uses this for time-varying
    topologies; the result is flagged ``approximate``.
    """
    if schedule.kind not in ONE_PEER_KINDS:
        return mixing_at(schedule, 0)
    W = sum(mixing_at(schedule, t).W for t in range(schedule.period)) / schedule.period
    return MixingOperator(schedule.n, W, schedule.kind, approximate=True)


def laplacian_spectrum(op: MixingOperator) -> LaplacianSpectrum:
    """Eigendecomposition of ``L = I - W`` with the consensus mode pinned first.

    The eigenproblem is solved on the orthogonal complement of the all-ones
    vector so that column 0 is exactly ``1/sqrt(n)`` with eigenvalue 0 even
    when ``L`` has a repeated zero eigenvalue (disconnected single rounds).
    """
    n = op.n
    L = np.eye(n) - np.asarray(op.W, dtype=float)
    ones = np.full((n, 1), 1.0 / np.sqrt(n))
    if n == 1:
        return LaplacianSpectrum(np.zeros(1), ones)
    basis, _ = np.linalg.qr(np.hstack([ones, np.eye(n)[:, : n - 1]]))
    comp = basis[:, 1:]
    # qr may flip the sign of the first column; the complement is unaffected
    Lc = comp.T @ L @ comp
    Lc = 0.5 * (Lc + Lc.T)
    try:
        vals, vecs = np.linalg.eigh(Lc)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"symmetric eigensolver failed: {exc}") from exc
    vals = np.clip(vals, 0.0, None)
    U = np.hstack([ones, comp @ vecs])
    return LaplacianSpectrum(np.concatenate([[0.0], vals]), U)


def validate_mixing(W, tol: float = 1e-12) -> ValidationReport:
    """Check every mixing-operator invariant and record the worst violation."""
    if isinstance(W, MixingOperator):
        W = W.W
    W = np.asarray(W, dtype=float)
    report = ValidationReport()
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        report.checks.append(CheckResult("square", False, float("inf")))
        return report
    n = W.shape[0]
    sym = float(np.max(np.abs(W - W.T))) if n else 0.0
    report.checks.append(CheckResult("symmetric", sym <= tol, sym))
    rows = np.abs(W.sum(axis=1) - 1.0)
    cols = np.abs(W.sum(axis=0) - 1.0)
    ds = float(max(rows.max(), cols.max()))
    report.checks.append(CheckResult("doubly_stochastic", ds <= tol, ds))
    neg = float(max(0.0, -W.min()))
    report.checks.append(CheckResult("nonnegative", neg <= tol, neg))
    ev = np.linalg.eigvalsh(0.5 * (W + W.T))
    # eigenvalues must lie in (-1, 1]; -1 itself is a violation
    high = max(0.0, float(ev.max()) - 1.0)
    low = max(0.0, -1.0 - float(ev.min()))
    ok = high <= max(tol, 1e-10) and float(ev.min()) > -1.0 + tol
    report.checks.append(CheckResult("spectrum", ok, max(high, low)))
    return report
