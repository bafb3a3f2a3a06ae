"""Synchronous-round decentralized training loop.

Iterates are stored column-wise in a ``d x n`` matrix ``X``.  One round of
DSGD-AC reads only the previous state::

    X <- X - gamma * (X - X W) - alpha * D

where ``D`` is the per-worker update direction (raw gradient, heavy-ball
buffer, or the Adam ratio).  DSGD is the ``gamma = 1`` case and goes through
the exact same arithmetic, which is what makes ``p = 0`` runs bitwise equal
to DSGD runs.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .errors import DivergedError, InvalidArgumentError
from .graph import laplacian_spectrum, make_schedule, mixing_at, period_average
from .problems import StepContext
from .schedules import ConsensusConfig, LrSchedule, gamma_at, lr_at

logger = logging.getLogger(__name__)

ALGORITHMS = ("sync_sgd", "dsgd", "dsgd_ac", "dadam_ac")
TRACE_COLUMNS = ("iter", "epoch", "alpha", "gamma", "radius_sq", "center_loss", "mean_worker_loss",
                 "envelope_quad", "envelope_residual", "top_eig", "diverged")


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "dsgd_ac"
    workers: int = 8
    epochs: int = 10
    batches_per_epoch: int = 10
    global_batch: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adam_paper_bias_correction: bool = False
    seed: int = 0
    topology: str = "one_peer_ring"
    lr_kind: str = "cosine_warmup"
    lr_peak: float = 0.05
    lr_warmup_epochs: int = 1
    lr_min: float = 0.0
    ac: ConsensusConfig = field(default_factory=lambda: ConsensusConfig(p=3.0, e_start=1))
    metrics_every: int = 1
    top_eig: bool = False
    lanczos_iters: int = 15
    modes: bool = False
    ritz_basis: int = 10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgumentError(f"unknown algorithm {self.algorithm!r}")
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if self.epochs < 0 or self.batches_per_epoch < 1:
            raise InvalidArgumentError("epochs must be >= 0 and batches_per_epoch >= 1")
        if self.global_batch < 1 or self.global_batch % self.workers:
            raise InvalidArgumentError("global batch size must be a positive multiple of the worker count")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.metrics_every < 1:
            raise InvalidArgumentError("metrics.every must be >= 1")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.batches_per_epoch

    @property
    def local_batch(self) -> int:
        return self.global_batch // self.workers

    def lr_schedule(self) -> LrSchedule:
        T = self.batches_per_epoch
        return LrSchedule(self.lr_kind, self.lr_peak, self.lr_warmup_epochs * T,
                          max(self.total_iterations, 1), self.lr_min)


@dataclass
class WorkerEnsemble:
    X: np.ndarray
    momentum: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    t: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[1]


@dataclass
class RunResult:
    records: list
    deployed: np.ndarray
    ensemble: WorkerEnsemble
    diverged: bool = False
    diverged_at: int | None = None
    mode_rows: list = field(default_factory=list)
    final_top_eig: float | None = None
    final_metrics: dict = field(default_factory=dict)


def worker_streams(seed: int, n: int):
    """``(init_rng, [worker_rng_0, ...])`` derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(n + 1)
    return np.random.default_rng(children[0]), [np.random.default_rng(c) for c in children[1:]]


def init_ensemble(config: RunConfig, problem, init_rng=None) -> WorkerEnsemble:
    if init_rng is None:
        init_rng = worker_streams(config.seed, config.workers)[0]
    x0 = problem.initial_point(init_rng)
    n = config.workers
    X = np.repeat(x0[:, None], n, axis=1)
    mom = np.zeros_like(X) if config.momentum > 0 else None
    if config.algorithm == "dadam_ac":
        return WorkerEnsemble(X, mom, np.zeros_like(X), np.zeros_like(X))
    return WorkerEnsemble(X, mom)


def deployed_model(ensemble) -> np.ndarray:
    X = ensemble.X if isinstance(ensemble, WorkerEnsemble) else np.asarray(ensemble)
    return X.mean(axis=1)


def _check_finite(X, t):
    if not np.all(np.isfinite(X)):
        raise DivergedError(f"non-finite iterate at round {t}", iteration=t)


def _direction(ens: WorkerEnsemble, G, momentum, weight_decay):
    D = G + weight_decay * ens.X if weight_decay else G
    if momentum > 0:
        buf = momentum * ens.momentum + D if ens.momentum is not None else D.copy()
        return buf, buf
    return D, ens.momentum


def mix(X, W, gamma):
    """``X (I - gamma L)`` written so that ``gamma = 0`` returns ``X`` bitwise."""
    return X - gamma * (X - X @ W)


def dsgd_ac_step(ens: WorkerEnsemble, W, alpha, gamma, G, momentum=0.0, weight_decay=0.0) -> WorkerEnsemble:
    D, buf = _direction(ens, G, momentum, weight_decay)
    X = mix(ens.X, W, gamma) - alpha * D
    _check_finite(X, ens.t + 1)
    return WorkerEnsemble(X, buf, ens.adam_m, ens.adam_v, ens.t + 1)


def dsgd_step(ens: WorkerEnsemble, W, alpha, G, momentum=0.0, weight_decay=0.0) -> WorkerEnsemble:
    return dsgd_ac_step(ens, W, alpha, 1.0, G, momentum, weight_decay)


def sync_sgd_step(x, alpha, avg_grad, buf=None, momentum=0.0, weight_decay=0.0):
    """One centralized step; returns ``(x_new, momentum_buffer)``."""
    d = avg_grad + weight_decay * x if weight_decay else avg_grad
    if momentum > 0:
        buf = momentum * buf + d if buf is not None else d.copy()
        d = buf
    x_new = x - alpha * d
    _check_finite(x_new, -1)
    return x_new, buf


def dadam_ac_step(ens: WorkerEnsemble, W, alpha, gamma, G, beta1=0.9, beta2=0.999, eps=1e-8,
                  weight_decay=0.0, paper_bias_correction=False) -> WorkerEnsemble:
    """Per-worker Adam direction plus the scaled neighbour pull.

    ``paper_bias_correction`` divides the second moment by ``1 - beta1**t``
    instead of ``1 - beta2**t``.
    """
    if ens.adam_m is None or ens.adam_v is None:
        raise InvalidArgumentError("ensemble has no Adam moment buffers")
    t = ens.t + 1
    g = G + weight_decay * ens.X if weight_decay else G
    m = beta1 * ens.adam_m + (1.0 - beta1) * g
    v = beta2 * ens.adam_v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - (beta1 if paper_bias_correction else beta2) ** t)
    X = mix(ens.X, W, gamma) - alpha * m_hat / (np.sqrt(v_hat) + eps)
    _check_finite(X, t)
    return WorkerEnsemble(X, ens.momentum, m, v, t)


def _thread_count(threads):
    if threads is None:
        threads = int(os.environ.get("DACLAB_THREADS", "1") or 1)
    return max(1, int(threads))


def compute_gradients(problem, X, ctx: StepContext, pool=None, chunks=1):
    """Gradient phase; columns may be split across threads without changing results."""
    n = X.shape[1]
    if pool is None or chunks <= 1 or n == 1:
        return problem.worker_gradients(X, ctx)
    blocks = [b for b in np.array_split(np.arange(n), min(chunks, n)) if len(b)]

    def work(block):
        sub = replace(ctx, workers=[int(i) for i in block])
        return block, problem.worker_gradients(X[:, block], sub)

    G = np.empty_like(X)
    Xi = None
    for block, (g, xi) in pool.map(work, blocks):
        G[:, block] = g
        if xi is not None:
            if Xi is None:
                Xi = np.empty_like(X)
            Xi[:, block] = xi
    return G, Xi


def run(config: RunConfig, problem, *, on_step=None, threads=None) -> RunResult:
    """Execute ``epochs * batches_per_epoch`` synchronous rounds.

    ``on_step(t, ensemble, G, Xi, alpha, gamma)`` is called after every round
    (``Xi`` is the exact gradient noise on quadratics, else ``None``).
    """
    n, T = config.workers, config.batches_per_epoch
    total = config.total_iterations
    init_rng, rngs = worker_streams(config.seed, n)
    ens = init_ensemble(config, problem, init_rng)
    schedule = make_schedule(config.topology, n)
    lr = config.lr_schedule()
    avg_spec = laplacian_spectrum(period_average(schedule)) if config.modes else None
    adaptive = config.algorithm in ("dsgd_ac", "dadam_ac")
    alpha_max_ref = None
    records, mode_rows = [], []
    result = RunResult(records, deployed_model(ens), ens, mode_rows=mode_rows)
    nthreads = _thread_count(threads)
    pool = ThreadPoolExecutor(max_workers=nthreads) if nthreads > 1 else None
    sync_buf = None
    try:
        for t in range(1, total + 1):
            epoch, step = divmod(t - 1, T)
            alpha = lr_at(lr, t - 1)
            if adaptive and alpha_max_ref is None and epoch >= config.ac.e_start:
                alpha_max_ref = alpha
            gamma = gamma_at(config.ac, alpha, epoch, alpha_max_ref) if adaptive else 1.0
            W = mixing_at(schedule, t - 1).W
            ctx = StepContext(t, epoch, step, config.local_batch, rngs, salt=config.seed,
                              workers=list(range(n)))
            G, Xi = compute_gradients(problem, ens.X, ctx, pool, nthreads)
            try:
                if config.algorithm == "sync_sgd":
                    x_new, sync_buf = sync_sgd_step(ens.X[:, 0], alpha, G.mean(axis=1), sync_buf,
                                                    config.momentum, config.weight_decay)
                    ens = WorkerEnsemble(np.repeat(x_new[:, None], n, axis=1), t=t)
                elif config.algorithm == "dadam_ac":
                    ens = dadam_ac_step(ens, W, alpha, gamma, G, config.adam_beta1, config.adam_beta2,
                                        config.adam_eps, config.weight_decay,
                                        config.adam_paper_bias_correction)
                else:
                    ens = dsgd_ac_step(ens, W, alpha, gamma, G, config.momentum, config.weight_decay)
            except DivergedError:
                logger.warning("run diverged at round %d", t)
                result.diverged, result.diverged_at = True, t
                records.append(_diverged_row(t, epoch, alpha, gamma))
                break
            if on_step is not None:
                on_step(t, ens, G, Xi, alpha, gamma)
            if t % config.metrics_every == 0:
                at_epoch_end = t % T == 0
                row, modes = _snapshot(config, problem, ens, t, epoch, alpha, gamma, at_epoch_end, avg_spec)
                records.append(row)
                mode_rows.extend(modes)
    finally:
        if pool is not None:
            pool.shutdown()
    result.ensemble = ens
    result.deployed = deployed_model(ens)
    if not result.diverged:
        if config.top_eig:
            result.final_top_eig = _top_eig(problem, result.deployed, config)[0]
        result.final_metrics = dict(problem.extra_metrics(result.deployed))
    return result


def _diverged_row(t, epoch, alpha, gamma):
    row = dict.fromkeys(TRACE_COLUMNS, None)
    row.update(iter=t, epoch=epoch, alpha=alpha, gamma=gamma, diverged=1)
    return row


def _top_eig(problem, x, config, basis=0):
    res = analysis.lanczos_top_eigenvalue(lambda v: problem.hvp(x, v), problem.dim, config.lanczos_iters,
                                          seed=config.seed, ritz_vectors=basis)
    return res.eigenvalue, res


def _snapshot(config, problem, ens, t, epoch, alpha, gamma, at_epoch_end, avg_spec):
    X = ens.X
    env = analysis.envelope_terms(X, problem)
    delta = analysis.consensus_error(X)
    top = None
    ritz = None
    if config.top_eig and at_epoch_end:
        top, res = _top_eig(problem, env.center_point, config,
                            basis=config.ritz_basis if config.modes else 0)
        ritz = res
    row = {
        "iter": t, "epoch": epoch, "alpha": alpha, "gamma": gamma,
        "radius_sq": analysis.radius_sq(delta),
        "center_loss": env.center_loss, "mean_worker_loss": env.mean_worker_loss,
        "envelope_quad": env.quad_term, "envelope_residual": env.residual,
        "top_eig": top, "diverged": 0,
    }
    modes = []
    if config.modes:
        _, lap = analysis.laplacian_modes(delta, avg_spec.eigenvectors)
        modes += [(t, "laplacian", j, avg_spec.eigenvalues[j], lap[j]) for j in range(len(lap))]
        U = getattr(problem, "eigenvectors", None)
        if U is not None:
            hes = analysis.hessian_projection(delta, U)
            modes += [(t, "hessian", k, problem.eigenvalues[k], hes[k]) for k in range(len(hes))]
        elif ritz is not None and ritz.ritz_vectors is not None:
            hes = analysis.hessian_projection(delta, ritz.ritz_vectors)
            modes += [(t, "hessian_topk", k, ritz.ritz_values[k], hes[k]) for k in range(len(hes))]
    return row, modes
