"""Line-oriented experiment configuration.

Format: one ``section.key = value`` (or bare ``key = value``) per line, ``#``
starts a comment.  Every key has a type and a default; unknown keys, type
mismatches and constraint violations raise :class:`ConfigError` naming the
key and line.  :func:`serialize` writes every key, defaults included, in a
form that parses back to an identical config.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .engine import ALGORITHMS, RunConfig
from .errors import ConfigError, DaclabError
from .graph import KINDS
from .problems import NOISE_KINDS, MLPProblem, NoiseModel, SyntheticTask, make_quadratic
from .schedules import LR_KINDS, ConsensusConfig

PROBLEMS = ("quadratic", "synthetic_mlp")


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _at_least(k):
    return lambda v: v >= k


def _one_of(options):
    return lambda v: v in options


def _unit_open(v):
    return 0 <= v < 1


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int, float, bool, str, ints, floats, opt_float, opt_int
    default: Any
    check: Callable | None = None
    rule: str = ""


KEYS = [
    Key("workers", "int", 8, _at_least(1), ">= 1"),
    Key("topology", "str", "one_peer_ring", _one_of(KINDS), f"one of {KINDS}"),
    Key("algorithm", "str", "dsgd_ac", _one_of(ALGORITHMS), f"one of {ALGORITHMS}"),
    Key("problem", "str", "quadratic", _one_of(PROBLEMS), f"one of {PROBLEMS}"),
    Key("epochs", "int", 10, _nonneg, ">= 0"),
    Key("batches_per_epoch", "int", 10, _at_least(1), ">= 1"),
    Key("global_batch", "int", 64, _at_least(1), ">= 1"),
    Key("momentum", "float", 0.0, _unit_open, "in [0, 1)"),
    Key("weight_decay", "float", 0.0, _nonneg, ">= 0"),
    Key("seed", "int", 0, _nonneg, ">= 0"),
    Key("repeat", "int", 1, _at_least(1), ">= 1"),
    Key("output_dir", "str", "runs"),
    Key("lr.kind", "str", "cosine_warmup", _one_of(LR_KINDS), f"one of {LR_KINDS}"),
    Key("lr.peak", "float", 0.05, _positive, "> 0"),
    Key("lr.warmup_epochs", "int", 1, _nonneg, ">= 0"),
    Key("lr.min", "float", 0.0, _nonneg, ">= 0"),
    Key("ac.p", "float", 3.0, _nonneg, ">= 0"),
    Key("ac.e_start", "opt_int", None, _nonneg, ">= 0"),
    Key("ac.g0", "opt_float", None, _positive, "> 0"),
    Key("adam.beta1", "float", 0.9, _unit_open, "in [0, 1)"),
    Key("adam.beta2", "float", 0.999, _unit_open, "in [0, 1)"),
    Key("adam.eps", "float", 1e-8, _positive, "> 0"),
    Key("adam.paper_bias_correction", "bool", False),
    Key("quadratic.dim", "int", 50, _at_least(1), ">= 1"),
    Key("quadratic.cond", "float", 100.0, _at_least(1), ">= 1"),
    Key("quadratic.seed", "int", 0, _nonneg, ">= 0"),
    Key("quadratic.scale", "float", 1.0, _positive, "> 0"),
    Key("quadratic.f_min", "float", 0.0, _nonneg, ">= 0"),
    Key("quadratic.init_scale", "float", 1.0, _nonneg, ">= 0"),
    Key("noise.kind", "str", "isotropic", _one_of(NOISE_KINDS), f"one of {NOISE_KINDS}"),
    Key("noise.sigma2", "float", 0.01, _nonneg, ">= 0"),
    Key("noise.c", "float", 0.0, _nonneg, ">= 0"),
    Key("task.samples", "int", 512, _at_least(1), ">= 1"),
    Key("task.test_samples", "int", 2000, _at_least(1), ">= 1"),
    Key("task.seed", "int", 0, _nonneg, ">= 0"),
    Key("task.clusters_per_class", "int", 4, _at_least(1), ">= 1"),
    Key("task.cluster_std", "float", 0.45, _positive, "> 0"),
    Key("task.label_noise", "float", 0.1, lambda v: 0 <= v <= 1, "in [0, 1]"),
    Key("mlp.widths", "ints", (2, 32, 32, 2), lambda v: len(v) >= 2 and min(v) >= 1,
        "at least two positive widths"),
    Key("mlp.activation", "str", "tanh", _one_of(("tanh", "linear")), "tanh or linear"),
    Key("metrics.every", "int", 1, _at_least(1), ">= 1"),
    Key("metrics.top_eig", "bool", False),
    Key("metrics.lanczos_iters", "int", 15, _at_least(1), ">= 1"),
    Key("metrics.modes", "bool", False),
    Key("metrics.ritz_basis", "int", 10, _at_least(1), ">= 1"),
    # harness knobs; empty lists / none mean "use the harness default"
    Key("verify.alphas", "floats", (), lambda v: all(a > 0 for a in v), "positive values"),
    Key("verify.ps", "floats", (), lambda v: all(a >= 0 for a in v), "non-negative values"),
    Key("verify.gammas", "floats", (), lambda v: all(0 <= a <= 1 for a in v), "values in [0, 1]"),
    Key("verify.lams", "floats", (), lambda v: all(a > 0 for a in v), "positive values"),
    Key("verify.alpha", "opt_float", None, _positive, "> 0"),
    Key("verify.gamma", "opt_float", None, lambda v: 0 < v <= 1, "in (0, 1]"),
    Key("verify.steps", "opt_int", None, _at_least(1), ">= 1"),
    Key("verify.seeds", "int", 3, _at_least(1), ">= 1"),
]
KEY_INDEX = {k.name: k for k in KEYS}


def _parse_value(key: Key, raw: str):
    kind = key.kind
    if kind.startswith("opt_"):
        if raw.lower() == "none":
            return None
        kind = kind[4:]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if kind == "str":
        if not raw:
            raise ValueError("empty string")
        return raw
    if kind in ("ints", "floats"):
        conv = int if kind == "ints" else float
        parts = [p.strip() for p in raw.strip("[]() ").split(",") if p.strip()]
        return tuple(conv(p) for p in parts)
    raise AssertionError(kind)


def _format_value(kind: str, value) -> str:
    if value is None:
        return "none"
    if kind.endswith("bool"):
        return "true" if value else "false"
    if kind.endswith("float"):
        return repr(float(value))
    if kind in ("ints", "floats"):
        return ",".join(repr(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: tuple  # ((key, value), ...) in declaration order

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    def as_dict(self) -> dict:
        return dict(self.values)

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, re-validated."""
        vals = self.as_dict()
        for k, v in updates.items():
            name = k.replace("__", ".")
            if name not in KEY_INDEX:
                raise ConfigError("unknown key", key=name)
            vals[name] = v
        return _finalize(vals, {})

    def run_config(self) -> RunConfig:
        v = self.as_dict()
        return RunConfig(
            algorithm=v["algorithm"], workers=v["workers"], epochs=v["epochs"],
            batches_per_epoch=v["batches_per_epoch"], global_batch=v["global_batch"],
            momentum=v["momentum"], weight_decay=v["weight_decay"],
            adam_beta1=v["adam.beta1"], adam_beta2=v["adam.beta2"], adam_eps=v["adam.eps"],
            adam_paper_bias_correction=v["adam.paper_bias_correction"], seed=v["seed"],
            topology=v["topology"], lr_kind=v["lr.kind"], lr_peak=v["lr.peak"],
            lr_warmup_epochs=v["lr.warmup_epochs"], lr_min=v["lr.min"],
            ac=ConsensusConfig(v["ac.p"], v["ac.e_start"], v["ac.g0"]),
            metrics_every=v["metrics.every"], top_eig=v["metrics.top_eig"],
            lanczos_iters=v["metrics.lanczos_iters"], modes=v["metrics.modes"],
            ritz_basis=v["metrics.ritz_basis"],
        )

    def build_problem(self):
        v = self.as_dict()
        if v["problem"] == "quadratic":
            noise = NoiseModel(v["noise.kind"], v["noise.sigma2"], v["noise.c"])
            return make_quadratic(v["quadratic.dim"], v["quadratic.cond"], seed=v["quadratic.seed"], noise=noise,
                                  scale=v["quadratic.scale"], f_min=v["quadratic.f_min"],
                                  init_scale=v["quadratic.init_scale"])
        widths = tuple(v["mlp.widths"])
        task = SyntheticTask(samples=v["task.samples"], test_samples=v["task.test_samples"],
                             input_dim=widths[0], classes=widths[-1], seed=v["task.seed"],
                             widths=widths, activation=v["mlp.activation"],
                             clusters_per_class=v["task.clusters_per_class"],
                             cluster_std=v["task.cluster_std"], label_noise=v["task.label_noise"])
        return MLPProblem(task)


def _finalize(vals: dict, lines: dict) -> ExperimentConfig:
    if vals["ac.e_start"] is None:
        vals["ac.e_start"] = vals["lr.warmup_epochs"]
    # cross-key constraints
    checks = [
        ("global_batch", vals["global_batch"] % vals["workers"] == 0,
         "must be a multiple of workers"),
        ("lr.min", vals["lr.min"] <= vals["lr.peak"], "must not exceed lr.peak"),
    ]
    if vals["problem"] == "synthetic_mlp":
        checks.append(("workers", vals["workers"] <= vals["task.samples"], "must not exceed task.samples"))
        checks.append(("mlp.widths", vals["mlp.widths"][-1] >= 2, "last width (classes) must be >= 2"))
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(msg, key=key, line=lines.get(key))
    cfg = ExperimentConfig(tuple((k.name, vals[k.name]) for k in KEYS))
    try:
        cfg.run_config()
    except DaclabError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def default_config() -> ExperimentConfig:
    return parse_config("")


def parse_config(text: str) -> ExperimentConfig:
    vals = {k.name: k.default for k in KEYS}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        name, value = (part.strip() for part in line.split("=", 1))
        key = KEY_INDEX.get(name)
        if key is None:
            raise ConfigError("unknown key", key=name, line=lineno)
        if name in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[name]})", key=name, line=lineno)
        try:
            parsed = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"expected {key.kind}: {exc}", key=name, line=lineno) from exc
        if parsed is not None and key.check is not None and not key.check(parsed):
            raise ConfigError(f"value {value!r} violates constraint: {key.rule}", key=name, line=lineno)
        vals[name] = parsed
        lines[name] = lineno
    return _finalize(vals, lines)


def serialize(config: ExperimentConfig) -> str:
    out = []
    for key in KEYS:
        out.append(f"{key.name} = {_format_value(key.kind, config[key.name])}")
    return "\n".join(out) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
