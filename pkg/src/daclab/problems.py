"""Objective oracles: an exact quadratic and a tiny MLP on synthetic data.

Every oracle exposes the same duck-typed surface used by the engine:

``dim``, ``initial_point(rng)``, ``loss(x)``, ``grad(x)``, ``hvp(x, v)``,
``hessian(x)`` (``None`` when unavailable), ``worker_gradients(X, ctx)``
returning ``(G, Xi)`` where ``Xi`` is the gradient noise matrix or ``None``,
and ``extra_metrics(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalError

NOISE_KINDS = ("isotropic", "hessian_aligned")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "isotropic"
    sigma2: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}")
        if self.sigma2 < 0 or self.c < 0:
            raise InvalidArgumentError("noise scales must be non-negative")


@dataclass
class StepContext:
    """What a worker needs to know to draw its minibatch gradient."""

    iteration: int  # 1-based global round
    epoch: int
    step: int  # 0-based batch index inside the epoch
    local_batch: int
    rngs: list  # one private Generator per worker, indexed by global worker id
    salt: int = 0
    workers: list | None = None  # global ids of the columns passed in; None means all

    def worker_ids(self, ncols: int) -> list:
        return list(range(ncols)) if self.workers is None else self.workers


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _as_point(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise InvalidArgumentError(f"expected a point of shape ({d},), got {x.shape}")
    return x


class QuadraticProblem:
    """``F(x) = f_min + 1/2 (x - x*)^T H (x - x*)`` with ``H = U diag(lam) U^T``.

    ``f_min`` models an irreducible loss level; it keeps Hessian-aligned noise
    from vanishing at the minimizer.
    """

    def __init__(self, eigenvalues, eigenvectors, x_star, noise: NoiseModel | None = None,
                 f_min: float = 0.0, init_scale: float = 1.0):
        lam = np.asarray(eigenvalues, dtype=float)
        U = np.asarray(eigenvectors, dtype=float)
        d = lam.shape[0]
        if U.shape != (d, d):
            raise InvalidArgumentError("eigenvector matrix must be d x d")
        if np.any(lam <= 0):
            raise InvalidArgumentError("Hessian eigenvalues must be positive")
        order = np.argsort(lam, kind="stable")
        self.eigenvalues = lam[order]
        self.eigenvectors = U[:, order]
        self.x_star = _as_point(x_star, d)
        self.noise = noise or NoiseModel()
        self.f_min = float(f_min)
        self.init_scale = float(init_scale)
        self.H = (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T
        self.H = 0.5 * (self.H + self.H.T)

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        return self.x_star + self.init_scale * rng.standard_normal(self.dim)

    def loss(self, x) -> float:
        y = _as_point(x, self.dim) - self.x_star
        return self.f_min + 0.5 * float(y @ self.H @ y)

    def losses(self, X: np.ndarray) -> np.ndarray:
        Y = X - self.x_star[:, None]
        return self.f_min + 0.5 * np.einsum("ij,ij->j", Y, self.H @ Y)

    def grad(self, x) -> np.ndarray:
        return self.H @ (_as_point(x, self.dim) - self.x_star)

    def hessian(self, x=None) -> np.ndarray:
        return self.H

    def hvp(self, x, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if not np.linalg.norm(v) > 0:
            raise InvalidArgumentError("direction must be non-zero")
        return self.H @ v

    def noise_sample(self, x, rng: np.random.Generator) -> np.ndarray:
        d = self.dim
        z = rng.standard_normal(d)
        if self.noise.kind == "isotropic":
            return math.sqrt(self.noise.sigma2) * z
        scale = self.noise.c * max(self.loss(x), 0.0)
        return self.eigenvectors @ (np.sqrt(scale * self.eigenvalues) * z)

    def stochastic_grad(self, x, rng: np.random.Generator) -> np.ndarray:
        return self.grad(x) + self.noise_sample(x, rng)

    def worker_gradients(self, X: np.ndarray, ctx: StepContext):
        # column-at-a-time products keep results independent of how columns are blocked
        G = np.empty_like(X)
        Xi = np.empty_like(X)
        for col, w in enumerate(ctx.worker_ids(X.shape[1])):
            G[:, col] = self.H @ (X[:, col] - self.x_star)
            Xi[:, col] = self.noise_sample(X[:, col], ctx.rngs[w])
        return G + Xi, Xi

    def extra_metrics(self, x) -> dict:
        return {}


def make_quadratic(dim: int, cond: float = 10.0, seed: int = 0, noise: NoiseModel | None = None,
                   scale: float = 1.0, f_min: float = 0.0, init_scale: float = 1.0,
                   x_star=None) -> QuadraticProblem:
    """Quadratic with eigenvalues log-spaced in ``[scale, scale*cond]`` and a seeded random basis."""
    if dim < 1:
        raise InvalidArgumentError("dimension must be >= 1")
    if cond < 1:
        raise InvalidArgumentError("condition number must be >= 1")
    rng = np.random.default_rng([seed, 7919])
    lam = scale * np.logspace(0.0, math.log10(cond), dim) if dim > 1 else np.array([scale])
    U = random_orthogonal(dim, rng)
    if x_star is None:
        x_star = rng.standard_normal(dim)
    return QuadraticProblem(lam, U, x_star, noise=noise, f_min=f_min, init_scale=init_scale)


class CubicPerturbedQuadratic(QuadraticProblem):
    """Quadratic plus ``kappa/6 * sum_k y_k**3`` with ``y = x - x*``.

    Used to check that the envelope residual scales like the cube of the
    disagreement radius once the loss stops being exactly quadratic.
    """

    def __init__(self, base: QuadraticProblem, kappa: float):
        super().__init__(base.eigenvalues, base.eigenvectors, base.x_star, base.noise,
                         base.f_min, base.init_scale)
        self.kappa = float(kappa)

    def loss(self, x) -> float:
        y = _as_point(x, self.dim) - self.x_star
        return self.f_min + 0.5 * float(y @ self.H @ y) + self.kappa / 6.0 * float(np.sum(y**3))

    def losses(self, X):
        Y = X - self.x_star[:, None]
        return super().losses(X) + self.kappa / 6.0 * np.sum(Y**3, axis=0)

    def grad(self, x):
        y = _as_point(x, self.dim) - self.x_star
        return self.H @ y + 0.5 * self.kappa * y**2

    def hessian(self, x=None):
        if x is None:
            return self.H
        y = _as_point(x, self.dim) - self.x_star
        return self.H + np.diag(self.kappa * y)

    def hvp(self, x, v):
        return self.hessian(x) @ np.asarray(v, dtype=float)

    def worker_gradients(self, X, ctx):
        Y = X - self.x_star[:, None]
        G, Xi = super().worker_gradients(X, ctx)
        return G + 0.5 * self.kappa * Y**2, Xi


# ---------------------------------------------------------------------------
# synthetic classification task + tiny MLP


@dataclass(frozen=True)
class SyntheticTask:
    samples: int = 512
    test_samples: int = 2000
    input_dim: int = 2
    classes: int = 2
    seed: int = 0
    widths: tuple = (2, 32, 32, 2)
    activation: str = "tanh"
    clusters_per_class: int = 4
    cluster_std: float = 0.45
    label_noise: float = 0.1

    def __post_init__(self):
        if self.samples < 1 or self.classes < 2:
            raise InvalidArgumentError("task needs at least one sample and two classes")
        if self.widths[0] != self.input_dim or self.widths[-1] != self.classes:
            raise InvalidArgumentError("MLP widths must start at input_dim and end at classes")
        if self.activation not in ("tanh", "linear"):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")


@dataclass
class ShardPlan:
    epoch: int
    permutation: np.ndarray
    shards: list = field(default_factory=list)


def generate_dataset(task: SyntheticTask):
    """Gaussian-cluster classification data, bit-exact from ``task.seed``.

    Returns ``(x_train, y_train, x_test, y_test)``.  Train labels are balanced
    to within one sample per class before label noise is applied to a fixed
    subset; test labels are clean.
    """
    rng = np.random.default_rng([task.seed, 1])
    centers = rng.normal(0.0, 1.5, size=(task.classes, task.clusters_per_class, task.input_dim))

    def draw(count, gen, noisy):
        y = np.arange(count) % task.classes
        gen.shuffle(y)
        which = gen.integers(0, task.clusters_per_class, size=count)
        x = centers[y, which] + task.cluster_std * gen.standard_normal((count, task.input_dim))
        if noisy and task.label_noise > 0:
            flip = gen.random(count) < task.label_noise
            shift = gen.integers(1, task.classes, size=count)
            y = np.where(flip, (y + shift) % task.classes, y)
        return x, y

    x_tr, y_tr = draw(task.samples, np.random.default_rng([task.seed, 2]), True)
    x_te, y_te = draw(task.test_samples, np.random.default_rng([task.seed, 3]), False)
    return x_tr, y_tr, x_te, y_te


def reshuffle_partition(task: SyntheticTask, epoch: int, n: int, salt: int = 0) -> ShardPlan:
    if not 1 <= n <= task.samples:
        raise InvalidArgumentError("worker count must be between 1 and the sample count")
    perm = np.random.default_rng([task.seed, salt, epoch, 11]).permutation(task.samples)
    return ShardPlan(epoch, perm, np.array_split(perm, n))


def _param_shapes(widths):
    return [((widths[i + 1], widths[i]), (widths[i + 1],)) for i in range(len(widths) - 1)]


def param_count(widths) -> int:
    return sum(a * b + a for (a, b), _ in _param_shapes(widths))


def unpack(params: np.ndarray, widths):
    out, pos = [], 0
    for (a, b), _ in _param_shapes(widths):
        Wm = params[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bv = params[pos:pos + a]
        pos += a
        out.append((Wm, bv))
    return out


def mlp_forward(params, x, widths, activation="tanh"):
    layers = unpack(params, widths)
    acts = [x]
    h = x
    for i, (Wm, bv) in enumerate(layers):
        z = h @ Wm.T + bv
        if i < len(layers) - 1 and activation == "tanh":
            z = np.tanh(z)
        acts.append(z)
        h = z
    return acts


def _softmax_ce(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(len(y)), y]))
    return loss, np.exp(logp)


def mlp_loss_grad(params, x, y, widths, activation="tanh"):
    """Mean cross-entropy over the batch and its exact gradient."""
    if len(y) == 0:
        raise InvalidArgumentError("batch must be non-empty")
    acts = mlp_forward(params, x, widths, activation)
    loss, prob = _softmax_ce(acts[-1], y)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    B = len(y)
    delta = prob
    delta[np.arange(B), y] -= 1.0
    delta /= B
    layers = unpack(params, widths)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h_in = acts[i]
        grads[i] = (delta.T @ h_in, delta.sum(axis=0))
        if i > 0:
            delta = delta @ layers[i][0]
            if activation == "tanh":
                delta = delta * (1.0 - acts[i] ** 2)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return loss, flat


class MLPProblem:
    """Tiny MLP classifier on a :class:`SyntheticTask`, full-batch objective on the train set."""

    def __init__(self, task: SyntheticTask, fd_eps: float = 1e-4):
        self.task = task
        self.widths = tuple(task.widths)
        self.x_train, self.y_train, self.x_test, self.y_test = generate_dataset(task)
        self.fd_eps = fd_eps
        self._plan = None

    @property
    def dim(self) -> int:
        return param_count(self.widths)

    def initial_point(self, rng):
        parts = []
        for (a, b), _ in _param_shapes(self.widths):
            parts.append(rng.normal(0.0, 1.0 / math.sqrt(b), size=a * b))
            parts.append(np.zeros(a))
        return np.concatenate(parts)

    def batch_loss_grad(self, x, idx):
        return mlp_loss_grad(x, self.x_train[idx], self.y_train[idx], self.widths, self.task.activation)

    def loss(self, x) -> float:
        acts = mlp_forward(x, self.x_train, self.widths, self.task.activation)
        return _softmax_ce(acts[-1], self.y_train)[0]

    def losses(self, X):
        return np.array([self.loss(np.ascontiguousarray(X[:, i])) for i in range(X.shape[1])])

    def grad(self, x):
        return mlp_loss_grad(x, self.x_train, self.y_train, self.widths, self.task.activation)[1]

    def hessian(self, x=None):
        return None

    def hvp(self, x, v):
        v = np.asarray(v, dtype=float)
        nv = float(np.linalg.norm(v))
        if not nv > 0:
            raise InvalidArgumentError("direction must be non-zero")
        eps = self.fd_eps / nv
        out = (self.grad(x + eps * v) - self.grad(x - eps * v)) / (2.0 * eps)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite Hessian-vector product")
        return out

    def test_loss(self, x) -> float:
        acts = mlp_forward(x, self.x_test, self.widths, self.task.activation)
        return _softmax_ce(acts[-1], self.y_test)[0]

    def test_accuracy(self, x) -> float:
        acts = mlp_forward(x, self.x_test, self.widths, self.task.activation)
        return float(np.mean(np.argmax(acts[-1], axis=1) == self.y_test))

    def plan(self, epoch, n, salt=0) -> ShardPlan:
        key = (epoch, n, salt)
        cached = self._plan  # single read keeps (key, plan) consistent across threads
        if cached is None or cached[0] != key:
            cached = (key, reshuffle_partition(self.task, epoch, n, salt))
            self._plan = cached
        return cached[1]

    def batch_indices(self, worker, ctx: StepContext, n) -> np.ndarray:
        shard = self.plan(ctx.epoch, n, ctx.salt).shards[worker]
        pos = ctx.step * ctx.local_batch + np.arange(ctx.local_batch)
        return shard[pos % len(shard)]

    def worker_gradients(self, X, ctx):
        n = len(ctx.rngs)
        G = np.empty_like(X)
        for col, w in enumerate(ctx.worker_ids(X.shape[1])):
            # contiguous copy: strided parameter views can take a different matmul path
            x = np.ascontiguousarray(X[:, col])
            G[:, col] = self.batch_loss_grad(x, self.batch_indices(w, ctx, n))[1]
        return G, None

    def extra_metrics(self, x) -> dict:
        return {"test_loss": self.test_loss(x), "test_accuracy": self.test_accuracy(x)}


def quad_loss(prob: QuadraticProblem, x) -> float:
    return prob.loss(x)


def quad_stochastic_grad(prob: QuadraticProblem, x, rng: np.random.Generator) -> np.ndarray:
    return prob.stochastic_grad(x, rng)


def hvp(problem, x, v) -> np.ndarray:
    out = problem.hvp(x, v)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Hessian-vector product")
    return out
