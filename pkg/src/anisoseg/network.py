"""Multi-stream anisotropic U-Net: graph construction, shape inference, execution.

Each input orientation gets its own branch for the first two resolution
levels.  A branch pools only along its two thin axes, so after two poolings
every stream reaches the same grid and the streams are concatenated on
entering level three.  Levels three and four are shared.  On the way back up,
the skip tensors of the branch levels are upsampled along their thick axis to
the isotropic decoder grid.

Channel plan for base width ``w`` (two 3x3x3 convs per level; the conv right
before a pooling doubles its input width)::

    level 1   w, 2w        (per stream)
    level 2   2w, 4w       (per stream)
    level 3   4w, 8w       (after the stream concat)
    level 4   8w, 8w
    decoder   4w, 4w | 2w, 2w | w, w   then a 1x1x1 conv and a sigmoid
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .layers import (
    BatchNormState,
    batchnorm,
    conv3d,
    dropout,
    maxpool3d,
    transposed_conv3d,
    upsample_trilinear,
)
from .tensor import ContractError, Tensor, concat_channels, relu, sigmoid

__all__ = [
    "ConfigError",
    "ShapeInferenceError",
    "PLANE_THICK_AXIS",
    "BEST_HYPERPARAMS",
    "PARAMETER_TARGETS",
    "StreamConfig",
    "PlaneConfig",
    "Hyperparams",
    "Node",
    "NetworkSpec",
    "ShapeReport",
    "build_multistream",
    "infer_shapes",
    "count_parameters",
    "calibrate_base_width",
    "DEFAULT_BASE_WIDTH",
    "init_params",
    "forward",
    "Model",
]


class ConfigError(ValueError):
    pass


class ShapeInferenceError(ValueError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


# The thick (slice-selection) axis of each orientation in (axis0, axis1, axis2) = (x, y, z).
PLANE_THICK_AXIS = {"axial": 2, "sagittal": 0, "coronal": 1}
VARIANTS = {
    "single": ("axial",),
    "dual": ("axial", "sagittal"),
    "triple": ("axial", "sagittal", "coronal"),
}
# thick/thin spacing ratio the branch poolings compensate (2.0 mm / 0.5 mm)
ANISOTROPY = 4


@dataclass(frozen=True)
class StreamConfig:
    name: str
    thick_axis: int
    pools: tuple[tuple[int, int, int], tuple[int, int, int]]

    @classmethod
    def for_plane(cls, plane: str) -> "StreamConfig":
        if plane not in PLANE_THICK_AXIS:
            raise ConfigError(f"unknown plane {plane!r}; expected one of {sorted(PLANE_THICK_AXIS)}")
        t = PLANE_THICK_AXIS[plane]
        pool = tuple(1 if a == t else 2 for a in range(3))
        return cls(plane, t, (pool, pool))


@dataclass(frozen=True)
class PlaneConfig:
    streams: tuple[StreamConfig, ...]

    def __post_init__(self):
        if not self.streams:
            raise ConfigError("at least one stream is required")
        names = [s.name for s in self.streams]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate stream names {names}")
        for s in self.streams:
            if len(s.pools) != 2 or any(len(p) != 3 for p in s.pools):
                raise ConfigError(f"stream {s.name!r} needs two pool triples")
            if any(p not in (1, 2) for pool in s.pools for p in pool):
                raise ConfigError(f"stream {s.name!r}: pool factors must be 1 or 2, got {s.pools}")
            total = tuple(s.pools[0][a] * s.pools[1][a] for a in range(3))
            want = tuple(1 if a == s.thick_axis else ANISOTROPY for a in range(3))
            if total != want:
                raise ConfigError(
                    f"stream {s.name!r}: pools {s.pools} give total reduction {total}, "
                    f"but equal concat shapes need {want} for thick axis {s.thick_axis}"
                )

    @classmethod
    def variant(cls, name: str) -> "PlaneConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        return cls.from_planes(VARIANTS[name])

    @classmethod
    def from_planes(cls, planes: Sequence[str]) -> "PlaneConfig":
        return cls(tuple(StreamConfig.for_plane(p) for p in planes))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.streams)


@dataclass(frozen=True)
class Hyperparams:
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    upsampling_mode: str = "trilinear"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.upsampling_mode not in ("trilinear", "transposed"):
            raise ConfigError(f"upsampling_mode must be 'trilinear' or 'transposed', got {self.upsampling_mode!r}")


# Best configurations reported per variant; the parameter targets refer to these.
BEST_HYPERPARAMS = {
    "single": Hyperparams(0.6, False, "trilinear"),
    "dual": Hyperparams(0.2, False, "transposed"),
    "triple": Hyperparams(0.2, True, "transposed"),
}
PARAMETER_TARGETS = {"single": 1.4e6, "dual": 1.6e6, "triple": 1.7e6}


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    attrs: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "op": self.op, "inputs": list(self.inputs), "attrs": _jsonable(self.attrs)}


def _jsonable(attrs):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


def _untuple(attrs):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in attrs.items()}


@dataclass(frozen=True)
class NetworkSpec:
    """A topologically ordered layer graph plus the settings it was built from."""

    nodes: tuple[Node, ...]
    planes: PlaneConfig
    hp: Hyperparams
    base_width: int

    @property
    def inputs(self) -> dict[str, str]:
        """Stream name -> input node name."""
        return {n.attrs["stream"]: n.name for n in self.nodes if n.op == "input"}

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Learnable arrays in deterministic (graph) order."""
        out: dict[str, tuple[int, ...]] = {}
        for n in self.nodes:
            a = n.attrs
            if n.op == "conv":
                k = a["k"]
                out[f"{n.name}.weight"] = (a["cout"], a["cin"], k, k, k)
                out[f"{n.name}.bias"] = (a["cout"],)
            elif n.op == "tconv":
                out[f"{n.name}.weight"] = (a["cin"], a["cout"], *a["stride"])
                out[f"{n.name}.bias"] = (a["cout"],)
            elif n.op == "batchnorm":
                out[f"{n.name}.gamma"] = (a["channels"],)
                out[f"{n.name}.beta"] = (a["channels"],)
        return out

    def batchnorm_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "batchnorm"]

    def to_json(self) -> str:
        doc = {
            "base_width": self.base_width,
            "hyperparameters": asdict(self.hp),
            "streams": [
                {"name": s.name, "thick_axis": s.thick_axis, "pools": [list(p) for p in s.pools]}
                for s in self.planes.streams
            ],
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [[i, n.name] for n in self.nodes for i in n.inputs],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        planes = PlaneConfig(
            tuple(StreamConfig(s["name"], s["thick_axis"], tuple(tuple(p) for p in s["pools"])) for s in doc["streams"])
        )
        nodes = tuple(Node(n["name"], n["op"], tuple(n["inputs"]), _untuple(n["attrs"])) for n in doc["nodes"])
        spec = cls(nodes, planes, Hyperparams(**doc["hyperparameters"]), int(doc["base_width"]))
        _check_topology(spec.nodes)
        return spec


def _check_topology(nodes) -> None:
    seen = set()
    for n in nodes:
        for i in n.inputs:
            if i not in seen:
                raise ConfigError(f"node {n.name!r} consumes {i!r} before it is defined")
        if n.name in seen:
            raise ConfigError(f"duplicate node name {n.name!r}")
        seen.add(n.name)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, hp: Hyperparams):
        self.nodes: list[Node] = []
        self.hp = hp

    def add(self, name, op, inputs=(), **attrs) -> str:
        self.nodes.append(Node(name, op, tuple(inputs), attrs))
        return name

    def conv_block(self, prefix, x, cin, widths):
        for j, cout in enumerate(widths, 1):
            x = self.add(f"{prefix}.conv{j}", "conv", [x], cin=cin, cout=cout, k=3)
            if self.hp.use_batchnorm:
                x = self.add(f"{prefix}.bn{j}", "batchnorm", [x], channels=cout)
            x = self.add(f"{prefix}.relu{j}", "relu", [x])
            cin = cout
        return x

    def upsample(self, name, x, channels, factor):
        factor = tuple(int(f) for f in factor)
        if factor == (1, 1, 1):
            return x
        if self.hp.upsampling_mode == "transposed":
            return self.add(name, "tconv", [x], cin=channels, cout=channels, stride=factor)
        return self.add(name, "upsample", [x], factor=factor)


def build_multistream(config: PlaneConfig | str, base_width: int | None = None, hp: Hyperparams | None = None) -> NetworkSpec:
    """Build the layer graph for a plane configuration.

    ``config`` may be a :class:`PlaneConfig` or one of ``"single"``,
    ``"dual"``, ``"triple"``.  ``base_width`` defaults to the calibrated
    :data:`DEFAULT_BASE_WIDTH`.
    """
    if isinstance(config, str):
        config = PlaneConfig.variant(config)
    base_width = DEFAULT_BASE_WIDTH if base_width is None else int(base_width)
    if base_width < 1:
        raise ConfigError(f"base_width must be >= 1, got {base_width}")
    hp = hp or Hyperparams()
    w = base_width
    b = _Builder(hp)
    n_streams = len(config.streams)

    skip1, skip2, merged = {}, {}, []
    for s in config.streams:
        x = b.add(f"{s.name}.input", "input", stream=s.name, channels=1)
        x = b.conv_block(f"{s.name}.enc1", x, 1, (w, 2 * w))
        skip1[s.name] = x
        x = b.add(f"{s.name}.pool1", "maxpool", [x], pool=s.pools[0])
        x = b.conv_block(f"{s.name}.enc2", x, 2 * w, (2 * w, 4 * w))
        skip2[s.name] = x
        merged.append(b.add(f"{s.name}.pool2", "maxpool", [x], pool=s.pools[1]))

    x = merged[0] if n_streams == 1 else b.add("merge", "concat", merged)
    x = b.conv_block("enc3", x, 4 * w * n_streams, (4 * w, 8 * w))
    skip3 = x
    x = b.add("pool3", "maxpool", [x], pool=(2, 2, 2))
    x = b.conv_block("enc4", x, 8 * w, (8 * w, 8 * w))

    def decoder_level(prefix, x, channels, skips, widths):
        x = b.upsample(f"{prefix}.up", x, channels, (2, 2, 2))
        x = b.add(f"{prefix}.cat", "concat", [x, *[name for name, _ in skips]])
        cin = channels + sum(c for _, c in skips)
        x = b.conv_block(prefix, x, cin, widths)
        return b.add(f"{prefix}.drop", "dropout", [x], rate=hp.dropout_rate)

    x = decoder_level("dec3", x, 8 * w, [(skip3, 8 * w)], (4 * w, 4 * w))

    skips = []
    for s in config.streams:
        # level-2 skips still carry one thin-axis pooling less than the decoder grid
        f = tuple(2 // s.pools[1][a] for a in range(3))
        skips.append((b.upsample(f"{s.name}.skip2.up", skip2[s.name], 4 * w, f), 4 * w))
    x = decoder_level("dec2", x, 4 * w, skips, (2 * w, 2 * w))

    skips = []
    for s in config.streams:
        f = tuple(4 // (s.pools[0][a] * s.pools[1][a]) for a in range(3))
        skips.append((b.upsample(f"{s.name}.skip1.up", skip1[s.name], 2 * w, f), 2 * w))
    x = decoder_level("dec1", x, 2 * w, skips, (w, w))

    x = b.add("head.conv", "conv", [x], cin=w, cout=1, k=1)
    b.add("head.sigmoid", "sigmoid", [x])
    spec = NetworkSpec(tuple(b.nodes), config, hp, base_width)
    _check_topology(spec.nodes)
    return spec


# ---------------------------------------------------------------------------
# shape inference and counting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeReport:
    shapes: dict[str, tuple[int, int, int, int]]  # node -> (channels, d0, d1, d2)
    parameter_count: int
    stream_trace: dict[str, list[tuple[str, tuple[int, int, int, int]]]]

    @property
    def output_shape(self) -> tuple[int, int, int, int]:
        return list(self.shapes.values())[-1]


def infer_shapes(spec: NetworkSpec, input_dims) -> ShapeReport:
    """Propagate ``(channels, d0, d1, d2)`` through the graph.

    ``input_dims`` maps stream name to its spatial triple (a sequence is read
    in stream order).  Errors name the node where propagation fails.
    """
    names = spec.planes.names
    if not isinstance(input_dims, Mapping):
        input_dims = dict(zip(names, input_dims))
    missing = set(names) - set(input_dims)
    if missing:
        raise ShapeInferenceError(spec.inputs[sorted(missing)[0]], "no input dims given")
    shapes: dict[str, tuple[int, ...]] = {}
    for n in spec.nodes:
        a = n.attrs
        ins = [shapes[i] for i in n.inputs]
        if n.op == "input":
            d = tuple(int(v) for v in input_dims[a["stream"]])
            if len(d) != 3 or min(d) < 1:
                raise ShapeInferenceError(n.name, f"bad input dims {d}")
            out = (a["channels"], *d)
        elif n.op == "conv":
            if ins[0][0] != a["cin"]:
                raise ShapeInferenceError(n.name, f"expects {a['cin']} channels, receives {ins[0][0]}")
            out = (a["cout"], *ins[0][1:])
        elif n.op == "maxpool":
            c, *d = ins[0]
            if any(di % p for di, p in zip(d, a["pool"])):
                raise ShapeInferenceError(n.name, f"spatial dims {tuple(d)} not divisible by pool {a['pool']}")
            out = (c, *(di // p for di, p in zip(d, a["pool"])))
        elif n.op in ("upsample", "tconv"):
            factor = a["factor"] if n.op == "upsample" else a["stride"]
            if n.op == "tconv" and ins[0][0] != a["cin"]:
                raise ShapeInferenceError(n.name, f"expects {a['cin']} channels, receives {ins[0][0]}")
            c = ins[0][0] if n.op == "upsample" else a["cout"]
            out = (c, *(di * f for di, f in zip(ins[0][1:], factor)))
        elif n.op == "concat":
            spatial = {s[1:] for s in ins}
            if len(spatial) != 1:
                raise ShapeInferenceError(n.name, f"spatial dims differ across inputs: {[s[1:] for s in ins]}")
            out = (sum(s[0] for s in ins), *ins[0][1:])
        elif n.op in ("relu", "sigmoid", "dropout", "batchnorm"):
            out = ins[0]
        else:
            raise ShapeInferenceError(n.name, f"unknown op {n.op!r}")
        shapes[n.name] = tuple(out)

    trace = {s: [(k, v) for k, v in shapes.items() if k.startswith(f"{s}.") and ".skip" not in k] for s in names}
    return ShapeReport(shapes, count_parameters(spec), trace)


def count_parameters(spec: NetworkSpec) -> int:
    """Exact number of learnable scalars (kernels, biases, batch-norm scale and shift)."""
    return int(sum(math.prod(s) for s in spec.param_shapes().values()))


def calibrate_base_width(targets: Mapping[str, float] = PARAMETER_TARGETS, hparams=BEST_HYPERPARAMS, max_width: int = 64) -> int:
    """Base width minimizing the worst relative deviation from the target parameter counts."""
    best, best_err = None, math.inf
    for w in range(1, max_width + 1):
        err = max(
            abs(count_parameters(build_multistream(v, w, hparams[v])) - t) / t for v, t in targets.items()
        )
        if err < best_err:
            best, best_err = w, err
    return best


# Output of calibrate_base_width() with the defaults; a test keeps the two in sync.
DEFAULT_BASE_WIDTH = 13


# ---------------------------------------------------------------------------
# parameters and execution
# ---------------------------------------------------------------------------


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases, unit batch-norm scale."""
    params = {}
    for name, shape in spec.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            node = spec.node(name.rsplit(".", 1)[0])
            if node.op == "conv":
                fan_in = shape[1] * math.prod(shape[2:])
            else:
                # each output voxel of a stride-sized transposed conv sees cin inputs
                fan_in = shape[0]
            params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
        elif kind == "gamma":
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return params


def new_bn_states(spec: NetworkSpec) -> dict[str, BatchNormState]:
    return {n.name: BatchNormState(n.attrs["channels"]) for n in spec.batchnorm_nodes()}


def forward(
    spec: NetworkSpec,
    params: Mapping[str, Tensor],
    inputs,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    bn_states: Mapping[str, BatchNormState] | None = None,
) -> Tensor:
    """Run the graph.  ``inputs`` maps stream name to a ``(N, 1, d0, d1, d2)`` tensor."""
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not isinstance(inputs, Mapping):
        inputs = dict(zip(spec.planes.names, inputs))
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in params:
            raise ContractError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ContractError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
    if spec.batchnorm_nodes() and bn_states is None:
        raise ContractError("network uses batch norm; pass bn_states")

    def p(name):
        v = params[name]
        return v if isinstance(v, Tensor) else Tensor(v)

    values: dict[str, Tensor] = {}
    for n in spec.nodes:
        a = n.attrs
        x = [values[i] for i in n.inputs]
        if n.op == "input":
            t = inputs[a["stream"]]
            t = t if isinstance(t, Tensor) else Tensor(t)
            if t.ndim != 5 or t.shape[1] != a["channels"]:
                raise ContractError(f"input for stream {a['stream']!r} must be (N, 1, d0, d1, d2), got {t.shape}")
            out = t
        elif n.op == "conv":
            out = conv3d(x[0], p(f"{n.name}.weight"), p(f"{n.name}.bias"))
        elif n.op == "batchnorm":
            out = batchnorm(x[0], p(f"{n.name}.gamma"), p(f"{n.name}.beta"), bn_states[n.name], mode)
        elif n.op == "relu":
            out = relu(x[0])
        elif n.op == "sigmoid":
            out = sigmoid(x[0])
        elif n.op == "maxpool":
            out = maxpool3d(x[0], a["pool"])
        elif n.op == "upsample":
            out = upsample_trilinear(x[0], a["factor"])
        elif n.op == "tconv":
            out = transposed_conv3d(x[0], p(f"{n.name}.weight"), p(f"{n.name}.bias"))
        elif n.op == "concat":
            out = concat_channels(x)
        elif n.op == "dropout":
            out = dropout(x[0], a["rate"], mode, rng)
        else:
            raise ContractError(f"unknown op {n.op!r} at node {n.name!r}")
        values[n.name] = out
    return values[spec.output]


class Model:
    """A spec with its parameters (as differentiable tensors) and batch-norm statistics."""

    def __init__(self, spec: NetworkSpec, params: Mapping[str, np.ndarray], bn_states=None):
        self.spec = spec
        self.params = {k: Tensor(np.asarray(v), requires_grad=True, name=k) for k, v in params.items()}
        self.bn_states = bn_states if bn_states is not None else new_bn_states(spec)

    @classmethod
    def create(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> "Model":
        return cls(spec, init_params(spec, rng, dtype))

    def __call__(self, inputs, mode="infer", rng=None) -> Tensor:
        return forward(self.spec, self.params, inputs, mode, rng, self.bn_states)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters followed by running statistics, in graph order."""
        out = {k: t.data for k, t in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.asarray(arrays[k], dtype=t.data.dtype).copy()
        for name, st in self.bn_states.items():
            st.running_mean = np.asarray(arrays[f"{name}.running_mean"], dtype=np.float64).copy()
            st.running_var = np.asarray(arrays[f"{name}.running_var"], dtype=np.float64).copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}
