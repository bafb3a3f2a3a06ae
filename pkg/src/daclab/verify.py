"""Pass/fail harnesses for the consensus-dynamics predictions.

Every harness is deterministic given its seed, returns a report dataclass
with a ``passed`` verdict, and can dump its raw grid via :func:`write_report`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .engine import RunConfig, mix, run, worker_streams
from .errors import InvalidArgumentError
from .graph import MixingOperator, laplacian_spectrum, make_schedule, period_average
from .problems import CubicPerturbedQuadratic, QuadraticProblem, StepContext
from .schedules import ConsensusConfig

logger = logging.getLogger(__name__)

HARNESSES = ("radius", "stability", "alignment", "envelope", "tilt")


def _as_operator(W) -> MixingOperator:
    if isinstance(W, MixingOperator):
        return W
    W = np.asarray(W, dtype=float)
    return MixingOperator(W.shape[0], W, "custom")


def _cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def write_report(report, path) -> None:
    rows = report.rows()
    if not rows:
        rows = [{"verdict": report.verdict()}]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in row.items()})


def _fit_slope(x, y) -> float:
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


class _OffsetProblem:
    """Adds fixed per-worker gradient offsets (columns summing to zero)."""

    def __init__(self, base, offsets):
        self.base = base
        self.offsets = np.asarray(offsets, dtype=float)

    def worker_gradients(self, X, ctx):
        G, Xi = self.base.worker_gradients(X, ctx)
        cols = ctx.worker_ids(X.shape[1])
        return G + self.offsets[:, cols], Xi


def _steady_radius(problem, W, alpha, gamma, burn, window, seed, offsets=None):
    """Mean ``r^2`` over ``window`` constant-(alpha, gamma) rounds after ``burn`` rounds."""
    n = W.shape[0]
    init_rng, rngs = worker_streams(seed, n)
    X = np.repeat(problem.x_star[:, None], n, axis=1)
    oracle = problem if offsets is None else _OffsetProblem(problem, offsets)
    acc = 0.0
    for t in range(1, burn + window + 1):
        G, _ = oracle.worker_gradients(X, StepContext(t, 0, t - 1, 1, rngs))
        X = mix(X, W, gamma) - alpha * G
        if t > burn:
            acc += analysis.radius_sq(analysis.consensus_error(X))
    return acc / window


# ---------------------------------------------------------------------------
# radius law


@dataclass
class RadiusCell:
    p: float
    alpha: float
    gamma: float
    radius_sq: float | None
    steps: int
    skipped: bool = False
    reason: str = ""


@dataclass
class RadiusScalingReport:
    cells: list
    slopes: dict  # p -> fitted log-log exponent of r^2 vs alpha
    targets: dict  # p -> expected exponent
    tol: float
    mode: str = "variance"

    def slope_ok(self, p) -> bool:
        s = self.slopes.get(p)
        return s is not None and math.isfinite(s) and abs(s - self.targets[p]) <= self.tol

    @property
    def passed(self) -> bool:
        return bool(self.targets) and all(self.slope_ok(p) for p in self.targets)

    def verdict(self) -> str:
        parts = ", ".join(f"p={p:g}: {self.slopes.get(p, float('nan')):.3f} (target {self.targets[p]:g})"
                          for p in self.targets)
        return f"{'PASS' if self.passed else 'FAIL'} radius ({self.mode}): {parts}"

    def rows(self):
        return [{"p": c.p, "alpha": c.alpha, "gamma": c.gamma,
                 "radius_sq": "" if c.radius_sq is None else c.radius_sq, "steps": c.steps,
                 "skipped": int(c.skipped), "reason": c.reason,
                 "slope": self.slopes.get(c.p, float("nan")), "target": self.targets[c.p]}
                for c in self.cells]


def verify_radius_law(problem: QuadraticProblem, W, alphas, ps=(0, 1, 2, 3, 4, 5), g0=None, *,
                      gamma_top: float = 0.1, offsets=None, seed: int = 0, tol: float = 0.25,
                      burn_factor: float = 10.0, window_factor: float = 20.0, min_window: int = 4000,
                      max_steps: int = 400_000) -> RadiusScalingReport:
    """Stationary ``r^2`` on a ``(p, alpha)`` grid with ``gamma = g0 * alpha**p``.

    ``g0`` may be a scalar, a mapping ``p -> g0`` or ``None``; ``None`` picks
    ``gamma_top / max(alphas)**p`` so that every ``p`` shares the largest
    consensus factor at the top of the grid.  With ``offsets`` (a ``d x n``
    matrix whose rows sum to zero) the noise-free mean-driven law
    ``r^2 ~ alpha^(2-2p)`` is targeted instead of the variance law.
    """
    op = _as_operator(W)
    spec = laplacian_spectrum(op)
    lam2, lam_max_l = spec.eigenvalues[1], spec.eigenvalues[-1]
    lam_h_min, lam_h_max = problem.eigenvalues[0], problem.eigenvalues[-1]
    alphas = sorted(float(a) for a in alphas)
    if len(alphas) < 2:
        raise InvalidArgumentError("need at least two step sizes to fit a slope")
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float)
        if np.max(np.abs(offsets.sum(axis=1))) > 1e-12 * max(1.0, np.abs(offsets).max()):
            raise InvalidArgumentError("gradient offsets must sum to zero across workers")
    mode = "variance" if offsets is None else "mean"
    cells, slopes, targets = [], {}, {}
    index = 0
    for p in ps:
        p = float(p)
        if g0 is None:
            g = gamma_top / max(alphas) ** p
        elif isinstance(g0, dict):
            g = g0[p]
        else:
            g = float(g0)
        targets[p] = 2.0 - p if offsets is None else 2.0 - 2.0 * p
        good = []
        for a in alphas:
            gamma = g * a**p
            index += 1
            crit = analysis.stability_threshold(spec.lambda_min_w, gamma, lam_h_max)
            if gamma > 1 or gamma * lam_max_l >= 2 or a >= crit:
                cells.append(RadiusCell(p, a, gamma, None, 0, True, "unstable cell"))
                continue
            tau = 1.0 / (gamma * lam2 + a * lam_h_min)
            burn = int(math.ceil(burn_factor * tau))
            window = max(min_window, int(math.ceil(window_factor * tau)))
            if burn + window > max_steps:
                cells.append(RadiusCell(p, a, gamma, None, 0, True, "mixing time exceeds max_steps"))
                continue
            r2 = _steady_radius(problem, op.W, a, gamma, burn, window, _cell_seed(seed, index), offsets)
            cells.append(RadiusCell(p, a, gamma, r2, burn + window))
            good.append((a, r2))
        if len(good) >= 2 and all(r > 0 for _, r in good):
            slopes[p] = _fit_slope(*zip(*good))
        else:
            slopes[p] = float("nan")
    return RadiusScalingReport(cells, slopes, targets, tol, mode)


# ---------------------------------------------------------------------------
# mode stability


@dataclass
class ModeStabilityReport:
    gammas: np.ndarray
    lams: np.ndarray
    alphas: np.ndarray  # (len(lams), n_alpha) grid per Hessian eigenvalue
    alpha_crit: np.ndarray  # (len(gammas), len(lams))
    predicted_stable: np.ndarray  # (len(gammas), len(lams), n_alpha)
    empirical_stable: np.ndarray
    lambda_min_w: float
    required: float = 0.95

    def _first_unstable(self, flags):
        bad = np.flatnonzero(~flags)
        return int(bad[0]) if bad.size else flags.size

    @property
    def boundary_lines(self):
        """``(gamma_index, lam_index, predicted_index, empirical_index)`` for lines with a boundary."""
        out = []
        for g in range(len(self.gammas)):
            for k in range(len(self.lams)):
                pi = self._first_unstable(self.predicted_stable[g, k])
                ei = self._first_unstable(self.empirical_stable[g, k])
                if pi < self.alphas.shape[1] or ei < self.alphas.shape[1]:
                    out.append((g, k, pi, ei))
        return out

    @property
    def boundary_agreement(self) -> float:
        lines = self.boundary_lines
        if not lines:
            return 1.0
        return float(np.mean([abs(pi - ei) <= 1 for _, _, pi, ei in lines]))

    @property
    def cell_agreement(self) -> float:
        """Per-cell agreement with cells within one grid step of the predicted boundary excluded."""
        ok, total = 0, 0
        m = self.alphas.shape[1]
        for g in range(len(self.gammas)):
            for k in range(len(self.lams)):
                pi = self._first_unstable(self.predicted_stable[g, k])
                for i in range(m):
                    if abs(i - pi) <= 1 and pi < m:
                        continue
                    total += 1
                    ok += self.predicted_stable[g, k, i] == self.empirical_stable[g, k, i]
        return ok / total if total else 1.0

    @property
    def passed(self) -> bool:
        return self.boundary_agreement >= self.required

    def verdict(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'} stability: boundary agreement "
                f"{self.boundary_agreement:.3f} on {len(self.boundary_lines)} lines "
                f"(required {self.required:.2f}); off-boundary cell agreement {self.cell_agreement:.3f}")

    def rows(self):
        rows = []
        for g, gamma in enumerate(self.gammas):
            for k, lam in enumerate(self.lams):
                for i, a in enumerate(self.alphas[k]):
                    rows.append({"gamma": float(gamma), "lam_h": float(lam), "alpha": float(a),
                                 "alpha_crit": float(self.alpha_crit[g, k]),
                                 "predicted_stable": int(self.predicted_stable[g, k, i]),
                                 "empirical_stable": int(self.empirical_stable[g, k, i])})
        return rows


def verify_mode_stability(W, gammas=None, lams=(0.5, 1.0, 2.0, 4.0, 8.0), alphas=None, *,
                          n_alpha: int = 20, alpha_span: float = 2.2, steps: int = 10_000,
                          blowup: float = 1e6, noise_std: float = 1e-3, seed: int = 0,
                          required: float = 0.95) -> ModeStabilityReport:
    """Simulate ``z <- z (I - gamma L) - alpha lam z - alpha xi P`` per grid cell.

    Without explicit ``alphas`` the grid for eigenvalue ``lam`` is
    ``alpha_span * (i + 1) / (n_alpha * lam)``, so every line spans the same
    range in units of ``1 / lam``.  A cell diverges when the disagreement norm
    exceeds ``blowup`` times its initial value within ``steps`` rounds.
    """
    op = _as_operator(W)
    n = op.n
    lam_min_w = laplacian_spectrum(op).lambda_min_w
    gammas = np.linspace(0.0, 1.0, 10) if gammas is None else np.asarray(gammas, dtype=float)
    lams = np.asarray(lams, dtype=float)
    if alphas is None:
        grid = alpha_span * np.arange(1, n_alpha + 1) / n_alpha
        alpha_grid = grid[None, :] / lams[:, None]
    else:
        alpha_grid = np.broadcast_to(np.asarray(alphas, dtype=float), (lams.size, len(alphas))).copy()
    m = alpha_grid.shape[1]
    G, K = gammas.size, lams.size
    crit = np.array([[analysis.stability_threshold(lam_min_w, g, lam) for lam in lams] for g in gammas])
    predicted = alpha_grid[None, :, :] < crit[:, :, None]

    g_cell = np.broadcast_to(gammas[:, None, None], (G, K, m)).reshape(-1)
    a_cell = np.broadcast_to(alpha_grid[None], (G, K, m)).reshape(-1)
    l_cell = np.broadcast_to(lams[None, :, None], (G, K, m)).reshape(-1)
    rng = np.random.default_rng([seed, 3])
    P = np.eye(n) - np.full((n, n), 1.0 / n)
    Z = rng.standard_normal((g_cell.size, n)) @ P
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    limit = blowup  # initial norms are 1
    diag = (1.0 - g_cell - a_cell * l_cell)[:, None]
    gam = g_cell[:, None]
    a_col = a_cell[:, None]
    diverged = np.zeros(g_cell.size, dtype=bool)
    for _ in range(steps):
        xi = rng.standard_normal(Z.shape) @ P
        Z = diag * Z + gam * (Z @ op.W) - noise_std * a_col * xi
        norms = np.linalg.norm(Z, axis=1)
        hit = norms > limit
        if hit.any():
            diverged |= hit
            Z[hit] = 0.0
    empirical = ~diverged.reshape(G, K, m)
    return ModeStabilityReport(gammas, lams, alpha_grid, crit, predicted, empirical, lam_min_w, required)


# ---------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentRun:
    seed: int
    early_score: float
    late_score: float
    late_score_gamma_scaled: float
    dsgd_late_score: float
    late_radius_sq: float


@dataclass
class AlignmentReport:
    runs: list
    k: int
    d: int
    gamma_tail: float
    gamma_factor: float
    min_radius: float = 1e-10

    @property
    def baseline(self) -> float:
        return self.k / self.d

    @property
    def inconclusive(self) -> bool:
        return any(r.late_radius_sq < self.min_radius for r in self.runs)

    @property
    def exceeds_baseline(self) -> bool:
        return all(r.late_score >= 2.0 * self.baseline for r in self.runs)

    @property
    def exceeds_early(self) -> bool:
        return all(r.late_score > r.early_score for r in self.runs)

    @property
    def scaled_gamma_not_lower(self) -> bool:
        return all(r.late_score_gamma_scaled >= r.late_score for r in self.runs)

    @property
    def passed(self) -> bool:
        return not self.inconclusive and self.exceeds_baseline and self.exceeds_early

    def verdict(self) -> str:
        if self.inconclusive:
            return "INCONCLUSIVE alignment: disagreement radius collapsed"
        late = np.mean([r.late_score for r in self.runs])
        early = np.mean([r.early_score for r in self.runs])
        scaled = np.mean([r.late_score_gamma_scaled for r in self.runs])
        return (f"{'PASS' if self.passed else 'FAIL'} alignment: late top-{self.k} score {late:.3f} "
                f"(baseline {self.baseline:.3f}, early {early:.3f}, gamma x{self.gamma_factor:g} {scaled:.3f})")

    def rows(self):
        return [{"seed": r.seed, "early_score": r.early_score, "late_score": r.late_score,
                 "late_score_gamma_scaled": r.late_score_gamma_scaled, "dsgd_late_score": r.dsgd_late_score,
                 "late_radius_sq": r.late_radius_sq, "baseline": self.baseline} for r in self.runs]


def _phase_scores(problem, W, phases, seed):
    """Run constant-(alpha, gamma) phases back to back; mean Hessian-mode energy per phase."""
    n = W.shape[0]
    init_rng, rngs = worker_streams(seed, n)
    X = np.repeat(problem.initial_point(init_rng)[:, None], n, axis=1)
    U = problem.eigenvectors
    out = []
    t = 0
    for alpha, gamma, steps, burn in phases:
        acc = np.zeros(problem.dim)
        for s in range(steps):
            t += 1
            G, _ = problem.worker_gradients(X, StepContext(t, 0, s, 1, rngs))
            X = mix(X, W, gamma) - alpha * G
            if s >= burn:
                acc += analysis.hessian_projection(analysis.consensus_error(X), U)
        out.append(acc / max(steps - burn, 1))
    return out


def verify_alignment(problem: QuadraticProblem, W, *, alpha_max: float, alpha_tail: float, p: float = 3.0,
                     early_steps: int = 3000, tail_steps: int = 20_000, burn: int = 4000,
                     early_burn: int = 500, k: int | None = None, seeds=(0, 1, 2),
                     gamma_factor: float = 0.5) -> AlignmentReport:
    """Early DSGD phase (``gamma = 1`` at ``alpha_max``) followed by a long constant tail.

    The tail runs at ``alpha_tail`` with ``gamma = (alpha_tail / alpha_max)**p``.
    Each seed is repeated with the tail factor multiplied by ``gamma_factor``
    (common random numbers) and with plain DSGD (``gamma = 1``) in the tail.
    """
    op = _as_operator(W)
    d = problem.dim
    k = max(1, d // 10) if k is None else k
    gamma_tail = (alpha_tail / alpha_max) ** p
    runs = []
    for seed in seeds:
        early = (alpha_max, 1.0, early_steps, early_burn)
        e_base, l_base = _phase_scores(problem, op.W, [early, (alpha_tail, gamma_tail, tail_steps, burn)], seed)
        _, l_scaled = _phase_scores(problem, op.W,
                                    [early, (alpha_tail, gamma_factor * gamma_tail, tail_steps, burn)], seed)
        _, l_dsgd = _phase_scores(problem, op.W, [early, (alpha_tail, 1.0, tail_steps, burn)], seed)
        runs.append(AlignmentRun(int(seed), analysis.alignment_score(e_base, k),
                                 analysis.alignment_score(l_base, k), analysis.alignment_score(l_scaled, k),
                                 analysis.alignment_score(l_dsgd, k), float(l_base.sum())))
    return AlignmentReport(runs, k, d, gamma_tail, gamma_factor)


# ---------------------------------------------------------------------------
# envelope


@dataclass
class EnvelopeReport:
    max_rel_residual: float
    snapshots: int
    cubic_slope: float | None = None
    cubic_points: list = field(default_factory=list)  # (trace_sigma, |residual|)
    tol: float = 1e-9
    slope_target: float = 1.5
    slope_tol: float = 0.3

    @property
    def quadratic_ok(self) -> bool:
        return self.snapshots > 0 and self.max_rel_residual <= self.tol

    @property
    def cubic_ok(self) -> bool:
        return self.cubic_slope is None or abs(self.cubic_slope - self.slope_target) <= self.slope_tol

    @property
    def passed(self) -> bool:
        return self.quadratic_ok and self.cubic_ok

    def verdict(self) -> str:
        cub = "" if self.cubic_slope is None else f"; cubic residual slope {self.cubic_slope:.3f}"
        return (f"{'PASS' if self.passed else 'FAIL'} envelope: max relative residual "
                f"{self.max_rel_residual:.3g} over {self.snapshots} snapshots{cub}")

    def rows(self):
        rows = [{"kind": "quadratic", "trace_sigma": "", "value": self.max_rel_residual}]
        rows += [{"kind": "cubic", "trace_sigma": s, "value": r} for s, r in self.cubic_points]
        return rows


def cubic_residual_scaling(problem: CubicPerturbedQuadratic, X, scales=None):
    """Envelope residual along ``xbar + t * Delta``; returns ``(points, slope)``."""
    X = np.asarray(X, dtype=float)
    xbar = X.mean(axis=1, keepdims=True)
    delta = X - xbar
    norm = math.sqrt(analysis.radius_sq(delta))
    if norm == 0:
        raise InvalidArgumentError("snapshot has no disagreement to scale")
    scales = np.logspace(-3, -1, 9) if scales is None else np.asarray(scales, dtype=float)
    pts = []
    for s in scales:
        env = analysis.envelope_terms(xbar + (s / norm) * delta, problem)
        pts.append((env.trace_sigma, abs(env.residual)))
    slope = _fit_slope([a for a, _ in pts], [b for _, b in pts])
    return pts, slope


def verify_envelope(problem: QuadraticProblem, config: RunConfig, *, kappa: float | None = 0.5,
                    scales=None) -> EnvelopeReport:
    """Envelope residual on every snapshot of a quadratic run, plus the cubic scaling check."""
    result = run(config, problem)
    worst, count = 0.0, 0
    for row in result.records:
        if row["diverged"]:
            continue
        count += 1
        rel = abs(row["envelope_residual"]) / max(1.0, abs(row["envelope_quad"]))
        worst = max(worst, rel)
    slope, pts = None, []
    if kappa is not None:
        X = result.ensemble.X
        if analysis.radius_sq(analysis.consensus_error(X)) > 0:
            pts, slope = cubic_residual_scaling(CubicPerturbedQuadratic(problem, kappa), X, scales)
    return EnvelopeReport(worst, count, slope, pts)


# ---------------------------------------------------------------------------
# curvature tilt


@dataclass
class TiltReport:
    predicted: float
    measured: float
    exact_prediction: float
    max_step_sum: float
    samples: int
    threshold: float

    @property
    def small_stepsize(self) -> bool:
        return self.max_step_sum <= 0.2

    @property
    def rel_error(self) -> float:
        if self.predicted == 0 and self.measured == 0:
            return 0.0
        return abs(self.measured - self.predicted) / max(abs(self.measured), 1e-300)

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.threshold

    def verdict(self) -> str:
        warn = "" if self.small_stepsize else " [small-stepsize diagnostic failed; threshold relaxed]"
        return (f"{'PASS' if self.passed else 'FAIL'} tilt: predicted {self.predicted:.6g} vs measured "
                f"{self.measured:.6g} (rel. error {self.rel_error:.3f}, threshold {self.threshold:.2f}){warn}")

    def rows(self):
        return [{"predicted": self.predicted, "measured": self.measured, "exact_prediction": self.exact_prediction,
                 "rel_error": self.rel_error, "max_step_sum": self.max_step_sum,
                 "small_stepsize": int(self.small_stepsize), "samples": self.samples,
                 "threshold": self.threshold}]


def verify_tilt(problem: QuadraticProblem, topology: str, workers: int, alpha: float, gamma: float, *,
                steps: int = 200_000, burn_in: int | None = None, sample_every: int = 10,
                seed: int = 0) -> TiltReport:
    """Monte Carlo ``1/2 tr(H Sigma)`` at constant ``(alpha, gamma)`` against the spectral prediction.

    Innovation variances are estimated from the exact gradient noise recorded
    during the same run.  Burn-in defaults to ten slowest-mode time constants.
    """
    schedule = make_schedule(topology, workers)
    spec = laplacian_spectrum(period_average(schedule))
    lam_h, U_h = problem.eigenvalues, problem.eigenvectors
    slow = gamma * spec.eigenvalues[1] + alpha * lam_h[0] if workers > 1 else 1.0
    if burn_in is None:
        burn_in = int(math.ceil(10.0 / slow))
    if burn_in >= steps:
        raise InvalidArgumentError("burn-in consumes the whole run")
    cfg = RunConfig(algorithm="dsgd_ac", workers=workers, epochs=1, batches_per_epoch=steps,
                    global_batch=workers, seed=seed, topology=topology, lr_kind="constant", lr_peak=alpha,
                    lr_warmup_epochs=0, ac=ConsensusConfig(p=0.0, e_start=0, g0=gamma), metrics_every=steps)
    H = problem.hessian()
    state = {"acc": 0.0, "count": 0}
    noise = []

    def on_step(t, ens, G, Xi, a, g):
        if t <= burn_in:
            return
        E = ens.X - ens.X.mean(axis=1, keepdims=True)
        state["acc"] += 0.5 * float(np.sum(E * (H @ E))) / workers
        state["count"] += 1
        if Xi is not None and t % sample_every == 0:
            noise.append(Xi.copy())

    run(cfg, problem, on_step=on_step)
    measured = state["acc"] / max(state["count"], 1)
    if problem.noise.kind == "isotropic" and problem.noise.sigma2 == 0:
        q = np.zeros((lam_h.size, workers))
    else:
        q = analysis.estimate_innovation_variances(np.array(noise), U_h, spec.eigenvectors)
    pred = analysis.tilt_prediction(alpha, gamma, spec.eigenvalues, lam_h, q)
    threshold = 0.20 if pred.small_stepsize else 0.35
    if not pred.small_stepsize:
        logger.warning("small-stepsize diagnostic failed (max gamma*lam_L + alpha*lam_H = %.3f)",
                       pred.max_step_sum)
    return TiltReport(pred.value, measured, pred.exact_value, pred.max_step_sum, state["count"], threshold)
