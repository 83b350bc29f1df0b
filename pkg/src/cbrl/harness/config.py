"""Experiment configuration: a small ``key = value`` grammar with ``[section]`` headers.

Lines starting with ``;`` or ``#`` are comments. Every key is typed by the
schema below and unknown keys are rejected with their line and column.
Overrides address keys as ``section.key`` or, when unambiguous, bare ``key``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cbrl.hypergrad import RtqConfig
from cbrl.optim import ALGORITHMS, OuterConfig
from cbrl.problem import BilevelProblem
from cbrl.solvers import VARIANTS, SolverBudget

ENVIRONMENTS = ("four-rooms", "tax", "synthetic", "bandit")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, col: Optional[int] = None):
        where = f"line {line}, col {col}: " if line is not None else ""
        super().__init__(where + msg)
        self.line, self.col = line, col


def _opt(conv):
    def f(v: str):
        return None if v.lower() in ("none", "") else conv(v)
    return f


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _names(v: str) -> tuple:
    return tuple(s.strip() for s in v.split(",") if s.strip())


def parse_seeds(v: str) -> tuple:
    """``"0..9"`` (inclusive), ``"3"`` or ``"1, 4, 7"``."""
    out = []
    for part in _names(v):
        if ".." in part:
            a, b = part.split("..")
            a, b = int(a), int(b)
            if b < a:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    return tuple(out)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(s) for s in v)
    return str(v)


# (converter, default) per key
SCHEMA: dict = {
    "experiment": {
        "name": (str, "experiment"),
        "env": (str, "synthetic"),
        "algorithms": (_names, ("hpgd",)),
        "seeds": (parse_seeds, (0,)),
        "out": (str, "runs"),
        "parallel": (int, 1),
    },
    "env": {
        # shared
        "lambda": (_opt(float), None),
        "gamma": (_opt(float), None),
        # four-rooms
        "beta": (_opt(float), None),
        "budget": (_opt(float), None),
        "slip": (_opt(float), None),
        "layout": (_opt(str), None),
        # tax
        "phi": (_opt(float), None),
        "grid": (_opt(str), None),
        "box_hi": (_opt(float), None),
        # synthetic
        "n_states": (_opt(int), None),
        "n_actions": (_opt(int), None),
        "dim": (_opt(int), None),
        "instance_seed": (_opt(int), None),
        "n_contexts": (_opt(int), None),
        "decomposable": (_opt(_bool), None),
    },
    "outer": {
        "iterations": (int, 100),
        "step": (float, 0.1),
        "clip": (_opt(float), 1.0),
        "project": (_bool, True),
        "batch": (int, 1),
        "env_steps": (_opt(int), None),
        "amd_inner": (int, 10),
        "zo_c": (float, 1.0),
        "eval_every": (int, 100),
        "eval_tol": (float, 1e-10),
        "track_grad_norm": (_bool, False),
    },
    "oracle": {
        "variant": (str, "soft-vi"),
        "iterations": (_opt(int), None),
        "target_delta": (_opt(float), 1e-6),
        "warm_start": (_bool, True),
    },
    "rtq": {
        "K": (int, 4),
        "c": (float, 50.0),
        "batch_multiplier": (int, 1),
    },
}

ENV_KEYS = {
    "four-rooms": {"lambda", "gamma", "beta", "budget", "slip", "layout"},
    "tax": {"lambda", "gamma", "phi", "grid", "box_hi"},
    "synthetic": {"lambda", "gamma", "n_states", "n_actions", "dim", "instance_seed",
                  "n_contexts", "decomposable"},
    "bandit": {"lambda", "gamma"},
}


def _defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=_defaults)

    def __getitem__(self, key: str):
        sec, k = resolve_key(key)
        return self.values[sec][k]

    # convenient views
    @property
    def env(self) -> str:
        return self.values["experiment"]["env"]

    @property
    def algorithms(self) -> tuple:
        return self.values["experiment"]["algorithms"]

    @property
    def seeds(self) -> tuple:
        return self.values["experiment"]["seeds"]

    @property
    def out(self) -> str:
        return self.values["experiment"]["out"]

    @property
    def parallel(self) -> int:
        return self.values["experiment"]["parallel"]

    def set(self, key: str, raw: str, line: Optional[int] = None, col: Optional[int] = None):
        sec, k = resolve_key(key, line, col)
        conv = SCHEMA[sec][k][0]
        try:
            self.values[sec][k] = conv(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {sec}.{k}: {exc}", line, col) from None

    def validate(self) -> "ExperimentConfig":
        ex = self.values["experiment"]
        if ex["env"] not in ENVIRONMENTS:
            raise ConfigError(f"unknown env {ex['env']!r}; expected one of {ENVIRONMENTS}")
        for a in ex["algorithms"]:
            if a not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {a!r}; expected one of {ALGORITHMS}")
        if ex["parallel"] < 1:
            raise ConfigError("parallel must be >= 1")
        allowed = ENV_KEYS[ex["env"]]
        for k, v in self.values["env"].items():
            if v is not None and k not in allowed:
                raise ConfigError(f"env key {k!r} does not apply to {ex['env']!r}")
        if self.values["oracle"]["variant"] not in VARIANTS:
            raise ConfigError(f"unknown oracle variant {self.values['oracle']['variant']!r}")
        # surface range errors from the typed configs now
        try:
            self.outer_config(self.seeds[0], self.algorithms[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def dumps(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                v = self.values[sec][k]
                if sec == "env" and v is None:
                    continue
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def outer_config(self, seed: int, algorithm: str) -> OuterConfig:
        o, orc, rq = self.values["outer"], self.values["oracle"], self.values["rtq"]
        budget = SolverBudget(orc["variant"], iterations=orc["iterations"],
                              target_delta=orc["target_delta"], warm_start=orc["warm_start"])
        return OuterConfig(algorithm=algorithm, seed=seed, oracle=budget,
                           rtq=RtqConfig(K=rq["K"], c=rq["c"], batch_multiplier=rq["batch_multiplier"]),
                           **o)

    def problem(self) -> BilevelProblem:
        return build_problem(self.env, {k: v for k, v in self.values["env"].items() if v is not None})


def resolve_key(key: str, line: Optional[int] = None, col: Optional[int] = None) -> tuple:
    if "." in key:
        sec, k = key.split(".", 1)
        if sec not in SCHEMA or k not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {key!r}", line, col)
        return sec, k
    hits = [sec for sec, keys in SCHEMA.items() if key in keys]
    if not hits:
        raise ConfigError(f"unknown key {key!r}", line, col)
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of "
                          + ", ".join(f"{s}.{key}" for s in hits), line, col)
    return hits[0], key


def loads(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = None
    seen = set()
    for ln, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped[0] in ";#":
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError("unterminated section header", ln, col)
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", ln, col)
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'key = value'", ln, col)
        if section is None:
            raise ConfigError("key outside of any section", ln, col)
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]", ln, col)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", ln, col)
        seen.add((section, key))
        vcol = raw.index("=") + 2
        cfg.set(f"{section}.{key}", value, ln, vcol)
    return cfg.validate()


def load(path, overrides=()) -> ExperimentConfig:
    cfg = loads(Path(path).read_text())
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg.validate()


def build_problem(env: str, params: dict) -> BilevelProblem:
    """Construct the named environment from its ``[env]`` parameters."""
    p = dict(params)
    if env == "four-rooms":
        from cbrl.envs.four_rooms import FourRoomsSpec, four_rooms_problem
        kw = {k: p[k] for k in ("gamma", "beta", "budget", "slip") if k in p}
        if "lambda" in p:
            kw["lam"] = p["lambda"]
        return four_rooms_problem(FourRoomsSpec.load(p.get("layout"), **kw))
    if env == "tax":
        from cbrl.envs.tax import TaxDesignSpec, tax_problem
        kw = {k: p[k] for k in ("gamma", "phi") if k in p}
        if "lambda" in p:
            kw["lam"] = p["lambda"]
        if "box_hi" in p:
            kw["hi"] = p["box_hi"]
        grid = p.get("grid", "small")
        if grid not in ("small", "full"):
            raise ConfigError(f"grid must be 'small' or 'full', got {grid!r}")
        spec = TaxDesignSpec.full_grid(**kw) if grid == "full" else TaxDesignSpec(**kw)
        return tax_problem(spec)
    if env == "synthetic":
        from cbrl.envs.synthetic import synthetic_cmdp
        kw = {k: p[k] for k in ("gamma", "n_states", "n_actions", "dim", "n_contexts") if k in p}
        if "lambda" in p:
            kw["lam"] = p["lambda"]
        if "instance_seed" in p:
            kw["seed"] = p["instance_seed"]
        return synthetic_cmdp(**kw).problem(decomposable=bool(p.get("decomposable", False)))
    if env == "bandit":
        from cbrl.envs.synthetic import bandit_problem
        kw = {k: p[k] for k in ("gamma",) if k in p}
        if "lambda" in p:
            kw["lam"] = p["lambda"]
        return bandit_problem(**kw)
    raise ConfigError(f"unknown env {env!r}")
