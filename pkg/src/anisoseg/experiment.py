"""End-to-end phantom experiment: single vs dual vs triple stream, plus a voting ensemble."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .fusion import largest_component, majority_vote
from .metrics import REGIONS, UndefinedTestError, regional_metrics, wilcoxon_signed_rank
from .network import Hyperparams, PlaneConfig, build_multistream
from .phantom import AcquisitionSpec, PhantomSpec, generate_phantom, simulate_acquisition
from .training import AugmentationSpec, Example, TrainConfig, predict, train
from .volume import Mask, normalize_percentile

__all__ = [
    "APPROACHES",
    "RESULT_COLUMNS",
    "SIGNIFICANCE_COLUMNS",
    "ExperimentConfig",
    "ExperimentResult",
    "make_cases",
    "split_cases",
    "run_experiment",
    "training_objective",
    "read_results",
    "emit_report",
    "quartiles",
]

log = logging.getLogger(__name__)

PLANES = ("axial", "sagittal", "coronal")
APPROACHES = ("single", "dual", "triple", "ensemble")
RESULT_COLUMNS = ("case", "approach", "region", "dsc", "abd_mm", "hd95_mm")
SIGNIFICANCE_COLUMNS = ("comparison", "region", "metric", "p_value")
METRICS = ("dsc", "abd_mm", "hd95_mm")
# (challenger, baseline, alternative): one-sided "challenger better" or two-sided
COMPARISONS = (
    ("dual", "single", "better"),
    ("triple", "single", "better"),
    ("triple", "ensemble", "two-sided"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    n_cases: int = 20
    n_train: int = 8
    n_val: int = 2
    approaches: tuple[str, ...] = APPROACHES
    phantom: PhantomSpec = field(default_factory=lambda: PhantomSpec(fov_voxels=32, radii_mm=(4.5, 4.0, 3.5), radius_jitter=0.1, center_jitter_mm=0.5, deformation_mm=0.5))
    thickness_mm: float = 2.0
    noise_sigma: float = 0.05
    base_width: int = 4
    hyperparams: Hyperparams = Hyperparams(0.0, True, "trilinear")
    train: TrainConfig = TrainConfig(learning_rate=3e-3, max_epochs=40, patience=15)
    threshold: float = 0.5
    apex_at_low_index: bool = True
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.approaches) - set(APPROACHES)
        if unknown:
            raise ValueError(f"unknown approaches {sorted(unknown)}")
        if self.n_train < 1 or self.n_val < 1 or self.n_train + self.n_val >= self.n_cases:
            raise ValueError("need at least one train, one validation and one test case")

    @property
    def n_test(self) -> int:
        return self.n_cases - self.n_train - self.n_val

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = json.loads(self.train.to_json())
        d["approaches"] = list(self.approaches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "phantom" in d:
            d["phantom"] = PhantomSpec.from_dict(d["phantom"])
        if "hyperparams" in d:
            d["hyperparams"] = Hyperparams(**d["hyperparams"])
        if "train" in d:
            t = dict(d["train"])
            if "augmentation" in t:
                t["augmentation"] = AugmentationSpec(**t["augmentation"])
            d["train"] = TrainConfig(**t)
        if "approaches" in d:
            d["approaches"] = tuple(d["approaches"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_cases(cfg: ExperimentConfig) -> list[Example]:
    """Phantom ``i`` uses seed ``(cfg.seed, i)``; each plane's noise has its own stream."""
    out = []
    for i in range(cfg.n_cases):
        spec = cfg.phantom.with_seed(int(np.random.default_rng([cfg.seed, i]).integers(2**31 - 1)))
        iso, mask = generate_phantom(spec)
        inputs = {}
        for p, plane in enumerate(PLANES):
            acq = AcquisitionSpec(plane, iso.grid.spacing[0], cfg.thickness_mm, cfg.noise_sigma)
            vol = simulate_acquisition(iso, acq, np.random.default_rng([cfg.seed, i, p + 1]))
            inputs[plane] = normalize_percentile(vol)
        out.append(Example(inputs, mask, f"case{i:03d}"))
    return out


def split_cases(cases: Sequence[Example], cfg: ExperimentConfig):
    """Consecutive train, validation and test blocks; test cases never reach training."""
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    return list(cases[:a]), list(cases[a:b]), list(cases[b:])


def _models_needed(approaches) -> dict[str, tuple[str, ...]]:
    need = {}
    for a in approaches:
        if a == "single":
            need["axial"] = ("axial",)
        elif a == "dual":
            need["dual"] = ("axial", "sagittal")
        elif a == "triple":
            need["triple"] = PLANES
        elif a == "ensemble":
            for p in PLANES:
                need[p] = (p,)
    return need


def _model_for(approach: str) -> tuple[str, ...]:
    return {"single": ("axial",), "dual": ("dual",), "triple": ("triple",), "ensemble": PLANES}[approach]


@dataclass
class ExperimentResult:
    rows: list[dict]
    significance: list[dict]
    summary: dict


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if c in ("case", "approach", "region", "comparison", "metric") else _fmt(r[c]) for c in columns])


def _paired(rows, approach_a, approach_b, region, metric):
    va = {r["case"]: r[metric] for r in rows if r["approach"] == approach_a and r["region"] == region}
    vb = {r["case"]: r[metric] for r in rows if r["approach"] == approach_b and r["region"] == region}
    common = [c for c in va if c in vb and math.isfinite(va[c]) and math.isfinite(vb[c])]
    return np.array([va[c] for c in common]), np.array([vb[c] for c in common])


def _significance(rows) -> list[dict]:
    present = {r["approach"] for r in rows}
    out = []
    for hi, lo, kind in COMPARISONS:
        if hi not in present or lo not in present:
            continue
        label = f"{hi}>{lo}" if kind == "better" else f"{hi}<>{lo}"
        for region in REGIONS:
            for metric in METRICS:
                a, b = _paired(rows, hi, lo, region, metric)
                if kind == "two-sided":
                    alt = "two-sided"
                else:
                    alt = "greater" if metric == "dsc" else "less"
                try:
                    p = wilcoxon_signed_rank(a, b, alt).p_value
                except UndefinedTestError:
                    p = math.nan
                out.append({"comparison": label, "region": region, "metric": metric, "p_value": p})
    return out


def _summarise(rows, significance, failures, split) -> dict:
    means = {}
    for a in sorted({r["approach"] for r in rows}):
        means[a] = {}
        for region in REGIONS:
            sel = [r for r in rows if r["approach"] == a and r["region"] == region]
            means[a][region] = {m: _nanmean([r[m] for r in sel]) for m in METRICS}
    deltas = {}
    for hi, lo, _ in COMPARISONS:
        if hi in means and lo in means:
            deltas[f"{hi}-{lo}"] = {
                region: {m: means[hi][region][m] - means[lo][region][m] for m in METRICS} for region in REGIONS
            }
    return {"means": means, "deltas": deltas, "failures": failures, "split": split}


def _nanmean(values) -> float:
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Generate phantoms, train every model the approaches need, then evaluate on the test block.

    Writes ``results.csv``, ``significance.csv``, ``summary.json`` plus per-model
    loss logs and checkpoints when ``out_dir`` is given.  A failing stage flags
    the affected cases in the summary and the run carries on.
    """
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        (out / "models").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    cases = make_cases(cfg)
    train_set, val_set, test_set = split_cases(cases, cfg)
    split = {"train": [c.case for c in train_set], "val": [c.case for c in val_set], "test": [c.case for c in test_set]}
    assert not set(split["test"]) & (set(split["train"]) | set(split["val"]))

    failures: list[dict] = []
    models = {}
    for name, planes in _models_needed(cfg.approaches).items():
        t0 = time.perf_counter()
        spec = build_multistream(PlaneConfig.from_planes(planes), cfg.base_width, cfg.hyperparams)
        try:
            log_path = None if out is None else out / "models" / f"{name}_loss.csv"
            res = train(spec, train_set, val_set, cfg.train, cfg.seed, log_path)
            models[name] = res.model
            if out is not None:
                save_checkpoint(out / "models" / f"{name}.json", res.model.state_arrays(), {"planes": list(planes), "best_epoch": res.best_epoch})
                (out / "models" / f"{name}_spec.json").write_text(spec.to_json())
            log.info("trained %s: %d epochs, best %d, %.1fs", name, len(res.history), res.best_epoch, time.perf_counter() - t0)
        except Exception as exc:
            failures.append({"stage": "train", "model": name, "error": f"{type(exc).__name__}: {exc}"})
            log.warning("training %s failed: %s", name, exc)

    rows = []
    for ex in test_set:
        masks: dict[str, Mask] = {}
        for approach in cfg.approaches:
            try:
                names = _model_for(approach)
                missing = [n for n in names if n not in models]
                if missing:
                    raise RuntimeError(f"model(s) {missing} unavailable")
                raw = [Mask(ex.target.grid, predict(models[n], ex, cfg.train.dtype) > cfg.threshold) for n in names]
                pred = majority_vote(raw) if approach == "ensemble" else raw[0]
                masks[approach] = largest_component(pred)
                report = regional_metrics(masks[approach], ex.target, ex.case, cfg.apex_at_low_index)
            except Exception as exc:
                failures.append({"stage": "evaluate", "case": ex.case, "approach": approach, "error": f"{type(exc).__name__}: {exc}"})
                continue
            for r in report.regions:
                rows.append({"case": ex.case, "approach": approach, "region": r.region, "dsc": r.dsc, "abd_mm": r.abd_mm, "hd95_mm": r.hd95_mm})

    significance = _significance(rows)
    summary = _summarise(rows, significance, failures, split)
    if out is not None:
        _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
        _write_csv(out / "significance.csv", SIGNIFICANCE_COLUMNS, significance)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(rows, significance, summary)


def training_objective(cfg: ExperimentConfig, variant: str = "triple"):
    """HPO objective: train ``variant`` on the phantom training block and return the best validation loss.

    The budget is the epoch count.  Phantoms are generated once and shared by all trials.
    """
    cases = make_cases(cfg)
    train_set, val_set, _ = split_cases(cases, cfg)
    planes = PlaneConfig.variant(variant)

    def objective(config: dict, budget: float, seed: int) -> float:
        hp = Hyperparams(config["dropout_rate"], bool(config["batch_normalization"]), config["upsampling_mode"])
        spec = build_multistream(planes, cfg.base_width, hp)
        tc = replace(cfg.train, learning_rate=config["learning_rate"], max_epochs=max(1, int(round(budget))))
        res = train(spec, train_set, val_set, tc, seed)
        return min(h.val_loss for h in res.history)

    return objective


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:6]) != RESULT_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(RESULT_COLUMNS)}")
        rows = [{**r, **{m: float(r[m]) for m in METRICS}} for r in reader]
    if not rows:
        raise ValueError(f"{path}: no result rows")
    return rows


def quartiles(values) -> dict:
    """Median and quartiles by linear interpolation between order statistics.

    >>> quartiles([1, 2, 3, 4, 10])
    {'n': 5, 'q1': 2.0, 'median': 3.0, 'q3': 4.0, 'mean': 4.0}
    """
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "q1": math.nan, "median": math.nan, "q3": math.nan, "mean": math.nan}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "q1": float(q1), "median": float(med), "q3": float(q3), "mean": float(v.mean())}


LINESTYLES = {"single": "--", "dual": ":", "triple": "-", "ensemble": "-."}


def emit_report(results_csv, out_dir) -> dict:
    """Quartile table (``summary.csv``) and grouped box plots (``boxplots.svg``)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_results(results_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    approaches = [a for a in APPROACHES if any(r["approach"] == a for r in rows)]
    approaches += sorted({r["approach"] for r in rows} - set(approaches))
    regions = [g for g in REGIONS if any(r["region"] == g for r in rows)]
    table = []
    for a in approaches:
        for g in regions:
            for m in METRICS:
                q = quartiles([r[m] for r in rows if r["approach"] == a and r["region"] == g])
                table.append({"approach": a, "region": g, "metric": m, **q})
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["approach", "region", "metric", "n", "q1", "median", "q3", "mean"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)

    matplotlib.rcParams["svg.hashsalt"] = "anisoseg"
    fig, axes = plt.subplots(1, 3, figsize=(4 * 3, 4))
    labels = {"dsc": "DSC", "abd_mm": "ABD (mm)", "hd95_mm": "95-HD (mm)"}
    width = 0.8 / max(len(approaches), 1)
    for ax, m in zip(axes, METRICS):
        for k, a in enumerate(approaches):
            data, pos = [], []
            for j, g in enumerate(regions):
                vals = [r[m] for r in rows if r["approach"] == a and r["region"] == g and math.isfinite(r[m])]
                if vals:
                    data.append(vals)
                    pos.append(j + (k - (len(approaches) - 1) / 2) * width)
            if not data:
                continue
            style = dict(linestyle=LINESTYLES.get(a, "-"))
            ax.boxplot(data, positions=pos, widths=width * 0.9, boxprops=style, whiskerprops=style, medianprops=style, manage_ticks=False)
            ax.plot([], [], "k" + LINESTYLES.get(a, "-"), label=a)
        ax.set_xticks(range(len(regions)))
        ax.set_xticklabels(regions)
        ax.set_title(labels[m])
    axes[0].legend(loc="lower left", fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "boxplots.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    return {"table": table, "svg": str(out / "boxplots.svg"), "summary": str(out / "summary.csv")}
