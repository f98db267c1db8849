"""Successive-halving budget scheduler with a density-ratio configuration model.

Each iteration samples ``n`` configurations (half from the model once it can
be fitted, the rest uniformly), then runs one halving ladder: every rung keeps
the ``ceil(n/2)`` lowest validation losses and doubles their budget until one
configuration remains.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import truncnorm

__all__ = [
    "SearchSpace",
    "Trial",
    "Bracket",
    "ConfigModel",
    "HPOResult",
    "sample_random",
    "make_bracket",
    "select_survivors",
    "fit_model",
    "sample_model",
    "run_hpo",
    "random_search",
    "synthetic_objective",
    "read_ledger",
    "GAMMA",
    "N_CANDIDATES",
]

GAMMA = 0.25
N_CANDIDATES = 16
MIN_BANDWIDTH = 1e-3  # natural-log units of the learning rate

Objective = Callable[[dict, float, int], float]


@dataclass(frozen=True)
class SearchSpace:
    lr_bounds: tuple[float, float] = (1e-6, 1e-3)
    dropout_rates: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8)
    upsampling_modes: tuple[str, ...] = ("trilinear", "transposed")
    batchnorm: tuple[bool, ...] = (False, True)

    def __post_init__(self):
        lo, hi = self.lr_bounds
        if not 0 < lo < hi:
            raise ValueError(f"bad learning-rate bounds {self.lr_bounds}")
        for name, values in self.categorical().items():
            if not values:
                raise ValueError(f"{name} has no choices")

    def categorical(self) -> dict[str, tuple]:
        return {
            "dropout_rate": self.dropout_rates,
            "upsampling_mode": self.upsampling_modes,
            "batch_normalization": self.batchnorm,
        }

    @property
    def log_bounds(self) -> tuple[float, float]:
        return math.log(self.lr_bounds[0]), math.log(self.lr_bounds[1])

    @property
    def n_dims(self) -> int:
        return 1 + len(self.categorical())

    def contains(self, config: dict) -> bool:
        lo, hi = self.lr_bounds
        if not lo <= config["learning_rate"] <= hi:
            return False
        return all(config[k] in v for k, v in self.categorical().items())

    def to_dict(self) -> dict:
        return {
            "learning_rate": list(self.lr_bounds),
            "dropout_rate": list(self.dropout_rates),
            "upsampling_mode": list(self.upsampling_modes),
            "batch_normalization": list(self.batchnorm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        default = cls()
        return cls(
            tuple(d.get("learning_rate", default.lr_bounds)),
            tuple(d.get("dropout_rate", default.dropout_rates)),
            tuple(d.get("upsampling_mode", default.upsampling_modes)),
            tuple(bool(b) for b in d.get("batch_normalization", default.batchnorm)),
        )


def sample_random(space: SearchSpace, rng: np.random.Generator) -> dict:
    """Log-uniform learning rate; every categorical dimension uniform and independent."""
    lo, hi = space.log_bounds
    lr = float(np.clip(math.exp(rng.uniform(lo, hi)), *space.lr_bounds))
    config = {"learning_rate": lr}
    for name, values in space.categorical().items():
        config[name] = values[int(rng.integers(len(values)))]
    return config


@dataclass(frozen=True)
class Trial:
    index: int
    config: dict
    budget: float
    loss: float | None
    status: str  # "ok" or "failed"
    seed: int
    iteration: int = 0
    rung: int = 0
    source: str = "random"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def rank_key(self) -> tuple[float, int]:
        return (self.loss if self.ok else math.inf, self.index)


@dataclass(frozen=True)
class Bracket:
    rungs: tuple[tuple[int, float], ...]

    @property
    def total_budget(self) -> float:
        return sum(n * b for n, b in self.rungs)


def make_bracket(n: int, min_budget: float) -> Bracket:
    """Halving ladder from ``n`` configurations at ``min_budget``; survivors are ``ceil(n/2)``.

    >>> make_bracket(8, 5).rungs
    ((8, 5), (4, 10), (2, 20), (1, 40))
    """
    if n < 1:
        raise ValueError(f"need at least one configuration, got {n}")
    if not min_budget > 0:
        raise ValueError(f"budget must be positive, got {min_budget}")
    rungs = [(n, min_budget)]
    while rungs[-1][0] > 1:
        k, b = rungs[-1]
        rungs.append((-(-k // 2), b * 2))
    return Bracket(tuple(rungs))


def select_survivors(trials: Sequence[Trial], n_keep: int) -> list[Trial]:
    """The ``n_keep`` lowest losses, ties broken by trial index; failed trials rank last."""
    return sorted(trials, key=lambda t: t.rank_key)[:n_keep]


# ---------------------------------------------------------------------------
# configuration model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Density:
    """Per-dimension densities: a truncated Gaussian KDE over log-lr and smoothed tables."""

    log_lr: np.ndarray
    bandwidth: float
    tables: dict[str, np.ndarray]

    def log_pdf(self, config: dict, space: SearchSpace) -> float:
        lo, hi = space.log_bounds
        x = math.log(config["learning_rate"])
        h = self.bandwidth
        a, b = (lo - self.log_lr) / h, (hi - self.log_lr) / h
        # each kernel is renormalized over the support, so the mixture integrates to 1
        kernel = truncnorm.pdf(x, a, b, loc=self.log_lr, scale=h)
        total = math.log(max(float(np.mean(kernel)), 1e-300))
        for name, values in space.categorical().items():
            total += math.log(self.tables[name][values.index(config[name])])
        return total

    def sample(self, space: SearchSpace, rng: np.random.Generator) -> dict:
        lo, hi = space.log_bounds
        centre = float(self.log_lr[int(rng.integers(self.log_lr.size))])
        h = self.bandwidth
        x = float(truncnorm.rvs((lo - centre) / h, (hi - centre) / h, loc=centre, scale=h, random_state=rng))
        config = {"learning_rate": float(np.clip(math.exp(x), *space.lr_bounds))}
        for name, values in space.categorical().items():
            config[name] = values[int(rng.choice(len(values), p=self.tables[name]))]
        return config


def _fit_density(configs: Sequence[dict], space: SearchSpace, alpha: float = 1.0) -> _Density:
    log_lr = np.log([c["learning_rate"] for c in configs])
    sigma = float(np.std(log_lr))
    # Scott's rule in log space, floored so a single point still has a proper kernel
    bandwidth = max(1.06 * sigma * len(log_lr) ** -0.2, MIN_BANDWIDTH)
    tables = {}
    for name, values in space.categorical().items():
        counts = np.array([sum(c[name] == v for c in configs) for v in values], dtype=np.float64)
        tables[name] = (counts + alpha) / (counts.sum() + alpha * len(values))
    return _Density(log_lr, bandwidth, tables)


@dataclass(frozen=True)
class ConfigModel:
    good: _Density
    bad: _Density
    budget: float
    n_observations: int


def fit_model(trials: Sequence[Trial], space: SearchSpace, gamma: float = GAMMA, min_points: int | None = None) -> ConfigModel | None:
    """Good/bad density model at the largest budget with enough completed trials.

    Returns ``None`` (model unavailable) when no budget level has
    ``min_points`` completed trials; the default is ``space.n_dims + 2``.
    The good set is the ``ceil(gamma * n)`` lowest losses, ties broken by
    trial index.
    """
    min_points = space.n_dims + 2 if min_points is None else min_points
    done = [t for t in trials if t.ok]
    budgets = sorted({t.budget for t in done}, reverse=True)
    for budget in budgets:
        level = sorted((t for t in done if t.budget == budget), key=lambda t: t.rank_key)
        if len(level) >= max(min_points, 2):
            n_good = min(max(1, math.ceil(gamma * len(level))), len(level) - 1)
            good = _fit_density([t.config for t in level[:n_good]], space)
            bad = _fit_density([t.config for t in level[n_good:]], space)
            return ConfigModel(good, bad, budget, len(level))
    return None


def sample_model(model: ConfigModel, space: SearchSpace, rng: np.random.Generator, k: int = N_CANDIDATES) -> dict:
    """Draw ``k`` candidates from the good density and keep the best good/bad ratio."""
    best, best_score = None, -math.inf
    for _ in range(k):
        cand = model.good.sample(space, rng)
        score = model.good.log_pdf(cand, space) - model.bad.log_pdf(cand, space)
        if score > best_score:
            best, best_score = cand, score
    return best


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


@dataclass
class HPOResult:
    best: Trial
    trials: list[Trial] = field(default_factory=list)

    @property
    def total_budget(self) -> float:
        return sum(t.budget for t in self.trials)


class _Ledger:
    def __init__(self, path):
        self.trials: list[Trial] = []
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def evaluate(self, objective: Objective, config: dict, budget: float, seed: int, **where) -> Trial:
        try:
            loss = float(objective(dict(config), budget, seed))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss {loss}")
            status, error = "ok", ""
        except Exception as exc:  # a failed trial must not stop the search
            loss, status, error = None, "failed", f"{type(exc).__name__}: {exc}"
        trial = Trial(len(self.trials), dict(config), budget, loss, status, seed, error=error, **where)
        self.trials.append(trial)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(asdict(trial), sort_keys=True) + "\n")
        return trial


def _best(trials: Sequence[Trial]) -> Trial:
    done = [t for t in trials if t.ok]
    if not done:
        raise RuntimeError("every trial failed")
    return min(done, key=lambda t: t.rank_key)


def run_hpo(
    objective: Objective,
    space: SearchSpace,
    iterations: int,
    n_per_iteration: int = 8,
    min_budget: float = 5,
    rng: np.random.Generator | int | None = None,
    ledger_path=None,
    use_model: bool = True,
    min_points: int | None = None,
) -> HPOResult:
    """Run ``iterations`` halving ladders and return the best completed trial.

    ``objective(config, budget, seed)`` returns a validation loss.  A
    configuration keeps its seed across rungs.  Exceptions and non-finite
    losses mark the trial failed; it ranks last and never feeds the model.
    With ``use_model=False`` every configuration is drawn uniformly.
    """
    rng = np.random.default_rng(rng)
    ledger = _Ledger(ledger_path)
    bracket = make_bracket(n_per_iteration, min_budget)
    for it in range(iterations):
        model = fit_model(ledger.trials, space, min_points=min_points) if use_model else None
        n_model = n_per_iteration // 2 if model is not None else 0
        pool = []
        for j in range(n_per_iteration):
            if j < n_model:
                pool.append((sample_model(model, space, rng), "model"))
            else:
                pool.append((sample_random(space, rng), "random"))
        seeds = [int(s) for s in rng.integers(0, 2**31 - 1, len(pool))]
        alive = list(range(len(pool)))
        for r, (_, budget) in enumerate(bracket.rungs):
            owner = {}
            for i in alive:
                t = ledger.evaluate(objective, pool[i][0], budget, seeds[i], iteration=it, rung=r, source=pool[i][1])
                owner[t.index] = (i, t)
            if r + 1 < len(bracket.rungs):
                keep = select_survivors([t for _, t in owner.values()], bracket.rungs[r + 1][0])
                alive = [owner[t.index][0] for t in keep]
    return HPOResult(_best(ledger.trials), ledger.trials)


def random_search(
    objective: Objective,
    space: SearchSpace,
    total_budget: float,
    budget: float,
    rng: np.random.Generator | int | None = None,
    ledger_path=None,
) -> HPOResult:
    """Baseline: uniformly drawn configurations, each trained at ``budget``, until ``total_budget`` is spent."""
    rng = np.random.default_rng(rng)
    ledger = _Ledger(ledger_path)
    spent = 0.0
    while spent + budget <= total_budget + 1e-9:
        config = sample_random(space, rng)
        ledger.evaluate(objective, config, budget, int(rng.integers(0, 2**31 - 1)), source="random")
        spent += budget
    return HPOResult(_best(ledger.trials), ledger.trials)


def synthetic_objective(config: dict, budget: float, seed: int = 0) -> float:
    """Analytic stand-in for a training run: optimum at lr 1e-4, no dropout, transposed, batch norm.

    The ``1/budget`` term makes longer runs look better without changing the ranking.
    """
    loss = (math.log(config["learning_rate"]) - math.log(1e-4)) ** 2
    loss += float(config["dropout_rate"])
    loss += 0.5 * (config["upsampling_mode"] != "transposed")
    loss += 0.5 * (not config["batch_normalization"])
    return loss + 1.0 / budget


def read_ledger(path) -> list[Trial]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(Trial(**json.loads(line)))
    return out
