"""Soft-Dice training with Adam, early stopping and spatial augmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .network import Model, NetworkSpec
from .tensor import ContractError, Tape, Tensor, backward, record
from .volume import Grid3, Mask, Volume

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "AdamState",
    "AugmentationSpec",
    "Example",
    "EpochRecord",
    "TrainResult",
    "soft_dice_loss",
    "adam_step",
    "early_stop_check",
    "augment",
    "train",
    "evaluate_loss",
    "predict",
    "write_loss_csv",
]


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def soft_dice_loss(p: Tensor, g, eps: float = 1.0) -> Tensor:
    """Negative soft Dice, ``-(2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``.

    Sums run in float64; the result lies in ``[-1, 0)`` for ``eps > 0``.

    >>> soft_dice_loss(Tensor(np.full((2, 2, 2), 0.5)), np.eye(1, 8).reshape(2, 2, 2)).item()
    -0.5
    """
    g = np.asarray(g.data if isinstance(g, Tensor) else g)
    if g.shape != p.shape:
        raise ContractError(f"prediction shape {p.shape} and target shape {g.shape} differ")
    if eps <= 0:
        raise ContractError("eps must be positive")
    pd = p.data.astype(np.float64)
    gd = g.astype(np.float64)
    num = 2.0 * np.sum(pd * gd) + eps
    den = np.sum(pd * pd) + np.sum(gd * gd) + eps
    loss = np.asarray(-num / den)

    def grad_fn(up):
        dp = -(2.0 * gd * den - 2.0 * pd * num) / (den * den)
        return ((up * dp).astype(p.dtype),)

    return record(loss, [p], grad_fn)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    """Random spatial transform shared by every stream of an example.

    All ranges are symmetric around zero; a zero disables the component.
    Only left-right (first axis) flips exist; the other two mirrors would
    turn the anatomy upside down or back to front.
    """

    flip_prob: float = 0.0
    max_rotation_deg: float = 0.0  # in-plane, about the slice axis
    max_translation_mm: float = 0.0
    elastic_mm: float = 0.0
    elastic_grid: int = 4

    @property
    def is_identity(self) -> bool:
        return self.flip_prob == 0 and self.max_rotation_deg == 0 and self.max_translation_mm == 0 and self.elastic_mm == 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 270
    patience: int = 100
    min_delta: float = 0.001
    batch_size: int = 1
    epsilon_dice: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if not (self.learning_rate > 0 and self.max_epochs >= 1 and self.patience >= 1):
            raise ValueError("learning_rate, max_epochs and patience must be positive")
        if isinstance(self.augmentation, Mapping):
            object.__setattr__(self, "augmentation", AugmentationSpec(**self.augmentation))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Moments are kept in float64.  Raises :class:`DivergenceError` before
    touching anything if a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise DivergenceError(f"gradient of {name!r} has {bad} non-finite entries at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient of {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def early_stop_check(history: Sequence[float], min_delta: float = 0.001, patience: int = 100) -> str:
    """``"stop"`` when the last ``patience`` epochs failed to beat the earlier best by ``min_delta``.

    An improvement of exactly ``min_delta`` counts (up to float rounding of
    the difference), so a history falling by 0.001 per epoch keeps going.
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    if len(history) <= patience:
        return "continue"
    best_before = min(history[:-patience])
    recent = min(history[-patience:])
    tol = 1e-12 * max(1.0, abs(best_before))
    return "continue" if best_before - recent >= min_delta - tol else "stop"


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Transform:
    center: np.ndarray
    flip: bool
    angle: float  # radians, rotation of the first two axes
    shift: np.ndarray  # mm
    coarse: np.ndarray | None  # (3, k, k, k) displacement samples in mm
    lower: np.ndarray
    upper: np.ndarray

    def source_points(self, pts: np.ndarray) -> np.ndarray:
        """Map output world points (..., 3) to the world points they are read from."""
        q = pts - self.shift
        if self.coarse is not None:
            q = q + self._displacement(pts)
        q = q - self.center
        if self.angle:
            c, s = math.cos(self.angle), math.sin(self.angle)
            x, y = q[..., 0].copy(), q[..., 1].copy()
            q[..., 0] = c * x + s * y
            q[..., 1] = -s * x + c * y
        if self.flip:
            q[..., 0] = -q[..., 0]
        return q + self.center

    def _displacement(self, pts):
        k = self.coarse.shape[1]
        u = (pts - self.lower) / (self.upper - self.lower) * (k - 1)
        coords = np.moveaxis(u, -1, 0)
        return np.stack(
            [ndimage.map_coordinates(self.coarse[a], coords, order=1, mode="nearest") for a in range(3)], axis=-1
        )

    def integer_shift(self, grid: Grid3):
        """Per-axis voxel shift when this transform is an exact lattice move of ``grid``."""
        if self.angle or self.coarse is not None:
            return None
        if self.flip:
            # mirroring maps the lattice onto itself only when the grid is centered on the pivot
            mid = grid.origin[0] + 0.5 * (grid.dims[0] - 1) * grid.spacing[0]
            if abs(mid - self.center[0]) > 1e-9 * grid.spacing[0]:
                return None
        steps = self.shift / np.asarray(grid.spacing)
        r = np.round(steps)
        if np.any(np.abs(steps - r) > 1e-9):
            return None
        return r.astype(int)


def _draw_transform(spec: AugmentationSpec, ref: Grid3, rng: np.random.Generator) -> _Transform:
    lower, upper = ref.lower, ref.upper
    center = 0.5 * (lower + upper)
    flip = bool(rng.random() < spec.flip_prob) if spec.flip_prob > 0 else False
    angle = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)) if spec.max_rotation_deg > 0 else 0.0
    shift = rng.uniform(-spec.max_translation_mm, spec.max_translation_mm, 3) if spec.max_translation_mm > 0 else np.zeros(3)
    coarse = None
    if spec.elastic_mm > 0:
        k = spec.elastic_grid
        coarse = rng.uniform(-spec.elastic_mm, spec.elastic_mm, (3, k, k, k))
    return _Transform(center, flip, angle, shift, coarse, lower, upper)


def _shift_exact(arr: np.ndarray, shift, flip: bool) -> np.ndarray:
    out = arr[::-1] if flip else arr
    for axis, s in enumerate(shift):
        if s == 0:
            continue
        n = out.shape[axis]
        # output index i reads input i - s, clamped to the border
        src = np.clip(np.arange(n) - s, 0, n - 1)
        out = np.take(out, src, axis=axis)
    return np.ascontiguousarray(out)


def _apply(arr: np.ndarray, grid: Grid3, tf: _Transform, order: int) -> np.ndarray:
    steps = tf.integer_shift(grid)
    if steps is not None:
        return _shift_exact(arr, steps, tf.flip)
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in grid.dims], indexing="ij"), axis=-1)
    src = grid.world_to_index(tf.source_points(grid.index_to_world(idx)))
    coords = np.moveaxis(src, -1, 0)
    out = ndimage.map_coordinates(arr.astype(np.float64), coords, order=order, mode="nearest")
    return out.astype(arr.dtype)


def augment(vols: Sequence[Volume], mask: Mask, spec: AugmentationSpec, rng: np.random.Generator):
    """Apply one random world-space transform to every volume and the mask.

    The volumes may sit on different grids as long as they image the same
    field; the transform pivots on the mask grid's center.  Volumes are
    interpolated linearly, labels by nearest neighbour, so the mask stays
    binary.  Flips and lattice-aligned translations are exact index moves.
    """
    if spec.is_identity:
        return list(vols), mask
    tf = _draw_transform(spec, mask.grid, rng)
    out_vols = [Volume(v.grid, _apply(v.samples, v.grid, tf, 1)) for v in vols]
    out_mask = Mask(mask.grid, _apply(mask.labels, mask.grid, tf, 0))
    return out_vols, out_mask


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    """One case: a volume per stream name and the isotropic target mask."""

    inputs: Mapping[str, Volume]
    target: Mask
    case: str = ""


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


def _tensors(example: Example, streams, dtype):
    return {s: Tensor(example.inputs[s].samples.astype(dtype)[None, None]) for s in streams}


def _example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def evaluate_loss(model: Model, examples: Sequence[Example], cfg: TrainConfig) -> float:
    streams = model.spec.planes.names
    losses = []
    for ex in examples:
        y = model(_tensors(ex, streams, cfg.dtype), "infer")
        losses.append(soft_dice_loss(y, ex.target.labels[None, None], cfg.epsilon_dice).item())
    return float(np.mean(losses))


def predict(model: Model, example: Example, dtype="float32") -> np.ndarray:
    """Probability map on the target grid, shape ``target.grid.dims``."""
    y = model(_tensors(example, model.spec.planes.names, dtype), "infer")
    return y.data[0, 0]


def train(
    spec: NetworkSpec,
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    cfg: TrainConfig,
    seed: int,
    log_path=None,
    init_model: Model | None = None,
) -> TrainResult:
    """Train with Adam on the soft-Dice loss, one example per step.

    Returns the model restored to its best validation epoch.  Every random
    draw derives from ``seed`` (initialization, shuffling, augmentation and
    dropout per epoch and example), so a fixed seed gives a bitwise
    identical history.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must both be nonempty")
    streams = spec.planes.names
    model = init_model or Model.create(spec, np.random.default_rng([seed, 0]), np.dtype(cfg.dtype))
    state = AdamState()
    history: list[EpochRecord] = []
    best_val, best_epoch, best_state = math.inf, 0, model.snapshot()
    stopped = False
    params = list(model.params.values())
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        losses = []
        for index in order:
            ex = train_set[index]
            rng = _example_rng(seed, epoch, int(index))
            if not cfg.augmentation.is_identity:
                names = list(ex.inputs)
                vols, target = augment([ex.inputs[s] for s in names], ex.target, cfg.augmentation, rng)
                ex = Example(dict(zip(names, vols)), target, ex.case)
            with Tape() as tape:
                y = model(_tensors(ex, streams, cfg.dtype), "train", rng)
                loss = soft_dice_loss(y, ex.target.labels[None, None], cfg.epsilon_dice)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"training loss became {loss.item()} at epoch {epoch}")
            grads = backward(tape, loss, params)
            adam_step(model.params, {k: grads[t] for k, t in model.params.items()}, state, cfg)
            losses.append(loss.item())
        val = evaluate_loss(model, val_set, cfg)
        if not math.isfinite(val):
            raise DivergenceError(f"validation loss became {val} at epoch {epoch}")
        history.append(EpochRecord(epoch, float(np.mean(losses)), val))
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.snapshot()
        if early_stop_check([h.val_loss for h in history], cfg.min_delta, cfg.patience) == "stop":
            stopped = True
            break
    model.load_state_arrays(best_state)
    if log_path is not None:
        write_loss_csv(log_path, history)
    return TrainResult(model, history, best_epoch, stopped)


def write_loss_csv(path, history: Sequence[EpochRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss)])
