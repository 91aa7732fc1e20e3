"""Scoring network: convolutional backbone, normal head, and anomaly head.

The backbone is a small stack of 3x3 convs with stride-2 average pools.
The normal head is a 2-layer MLP over the flattened feature map; the
anomaly head gathers four random half-size patches of the feature map,
forms their alternating residual, projects it to a single score map with
a learnable 1x1 kernel, and averages the top-K locations.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, DimensionError

CHECKPOINT_MAGIC = b"SCUT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Backbone and head dimensions; parameter shapes follow from this alone."""

    input_size: int = 64
    in_channels: int = 3
    channels: tuple = (16, 32, 64, 64)
    mlp_hidden: int = 64
    topk_fraction: float = 0.1

    def __post_init__(self):
        if self.input_size < 4 or self.in_channels < 1 or self.mlp_hidden < 1:
            raise ConfigError(f"invalid arch dimensions: {self}")
        if len(self.channels) < 1 or any(c < 1 for c in self.channels):
            raise ConfigError(f"invalid channel list: {self.channels}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ConfigError(f"topk_fraction must be in (0, 1], got {self.topk_fraction}")
        down = 2 ** (len(self.channels) - 1)
        if self.input_size % down:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by pooling factor {down}"
            )
        if self.feature_size % 2:
            raise ConfigError(f"feature map size {self.feature_size} must be even")

    @property
    def feature_size(self):
        return self.input_size // 2 ** (len(self.channels) - 1)

    @property
    def feature_channels(self):
        return self.channels[-1]

    @property
    def feature_len(self):
        return self.feature_channels * self.feature_size * self.feature_size


def param_shapes(arch):
    """Parameter (name, shape) pairs in checkpoint declaration order."""
    shapes = []
    prev = arch.in_channels
    for i, ch in enumerate(arch.channels):
        shapes.append((f"conv{i}_w", (ch, prev, 3, 3)))
        shapes.append((f"conv{i}_b", (ch,)))
        prev = ch
    shapes.append(("fc1_w", (arch.feature_len, arch.mlp_hidden)))
    shapes.append(("fc1_b", (arch.mlp_hidden,)))
    shapes.append(("fc2_w", (arch.mlp_hidden, 1)))
    shapes.append(("fc2_b", (1,)))
    shapes.append(("proj_w", (1, arch.feature_channels, 1, 1)))
    return shapes


@dataclass
class ModelState:
    """Trainable parameters plus the architecture that shaped them."""

    arch: ArchConfig
    params: dict = field(default_factory=dict)

    def param_count(self):
        return sum(int(np.prod(s)) for _, s in param_shapes(self.arch))

    def copy(self):
        return ModelState(self.arch, {k: v.copy() for k, v in self.params.items()})


def init_model(arch=None, rng=None):
    """He-initialized convs and first MLP layer; small-scale scoring layers."""
    arch = arch or ArchConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {}
    for name, shape in param_shapes(arch):
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        elif name in ("fc2_w", "proj_w"):
            params[name] = rng.normal(0.0, 0.05, shape)
        elif name == "fc1_w":
            params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    return ModelState(arch, params)


@dataclass
class PatchSet:
    """Four half-size feature-map crops and the offsets they were cut at."""

    w1: T.Tensor
    w2: T.Tensor
    w3: T.Tensor
    w4: T.Tensor
    origins: np.ndarray  # [4, 2] row/col offsets

    def __post_init__(self):
        shapes = {t.shape for t in (self.w1, self.w2, self.w3, self.w4)}
        if len(shapes) != 1:
            raise DimensionError(f"patches must share one shape, got {shapes}")

    @property
    def patches(self):
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass
class HeadScores:
    phi1: float
    phi2: float

    def __post_init__(self):
        if not (np.isfinite(self.phi1) and np.isfinite(self.phi2)):
            raise ContractError(f"non-finite head scores: {self}")


def bind_params(graph, state, requires_grad):
    """Attach state parameters to a graph as leaves, in declaration order."""
    return {
        name: graph.leaf(state.params[name], requires_grad=requires_grad)
        for name, _ in param_shapes(state.arch)
    }


def _as_image_tensor(graph, image, arch):
    if isinstance(image, T.Tensor):
        data = image.data
    else:
        data = np.asarray(image, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    n, c, h, w = data.shape if data.ndim == 4 else (0, 0, 0, 0)
    if data.ndim != 4 or c != arch.in_channels or h != arch.input_size or w != arch.input_size:
        raise DimensionError(
            f"expected [N,{arch.in_channels},{arch.input_size},{arch.input_size}] "
            f"image, got {np.shape(image)}"
        )
    if isinstance(image, T.Tensor) and image.graph is not None:
        return image if image.data.ndim == 4 else T.reshape(image, data.shape)
    return graph.leaf(data)


def backbone_apply(params, arch, x):
    """Backbone on a graph tensor x [N,C,H,W] -> features [N,Cf,Hf,Wf]."""
    h = x
    last = len(arch.channels) - 1
    for i in range(len(arch.channels)):
        h = T.conv2d(h, params[f"conv{i}_w"], stride=1, padding=1)
        h = T.relu(T.add_bias(h, params[f"conv{i}_b"]))
        if i < last:
            h = T.avg_pool2d(h, 2)
    return h


def normal_head_apply(params, features):
    """2-layer MLP on flattened features -> [N] scores."""
    z = T.flatten(features)
    z = T.relu(T.add_bias(T.matmul(z, params["fc1_w"]), params["fc1_b"]))
    z = T.add_bias(T.matmul(z, params["fc2_w"]), params["fc2_b"])
    return T.reshape(z, (z.shape[0],))


def anomaly_head_apply(params, arch, features, origins):
    """Patch residual + 1x1 projection + top-K mean -> [N] scores.

    origins: int array [N, 4, 2] of per-sample patch offsets.
    """
    n = features.shape[0]
    half = arch.feature_size // 2
    origins = np.asarray(origins, dtype=np.int64).reshape(n, 4, 2)
    patches = [
        T.crop_batch(features, origins[:, p, 0], origins[:, p, 1], half, half)
        for p in range(4)
    ]
    residual = T.sub(patches[3], T.sub(patches[2], T.sub(patches[1], patches[0])))
    score_map = T.flatten(T.conv2d(residual, params["proj_w"]))
    count = math.ceil(arch.topk_fraction * half * half)
    return T.topk_mean(score_map, count)


def forward_scores(graph, params, arch, images, origins):
    """Both heads on a batch: returns (phi1 [N], phi2 [N]) graph tensors."""
    x = _as_image_tensor(graph, images, arch)
    features = backbone_apply(params, arch, x)
    return normal_head_apply(params, features), anomaly_head_apply(
        params, arch, features, origins
    )


def draw_origins(arch, rng, n=1):
    """Uniform patch origins over the valid offset grid, [n, 4, 2]."""
    half = arch.feature_size // 2
    return rng.integers(0, half + 1, size=(n, 4, 2))


def quadrant_origins(arch, n=1):
    """Deterministic raster-order quadrant tiling used at inference."""
    half = arch.feature_size // 2
    quad = np.array([[0, 0], [0, half], [half, 0], [half, half]], dtype=np.int64)
    return np.broadcast_to(quad, (n, 4, 2))


def backbone_forward(image, state):
    """Feature map [1,Cf,Hf,Wf] for a single image; differentiable."""
    graph = T.Graph()
    params = bind_params(graph, state, requires_grad=False)
    x = _as_image_tensor(graph, image, state.arch)
    return backbone_apply(params, state.arch, x)


def normal_head(features, state):
    """Normal-head score of a single feature map as a graph tensor."""
    graph = features.graph or T.Graph()
    params = {
        k: graph.leaf(state.params[k]) for k in ("fc1_w", "fc1_b", "fc2_w", "fc2_b")
    }
    if features.size != state.arch.feature_len:
        raise DimensionError(
            f"features of size {features.size} do not match MLP width "
            f"{state.arch.feature_len}"
        )
    return normal_head_apply(params, features)


def split_patches(features, rng):
    """Four random half-size crops of a [1,C,Hf,Wf] feature map."""
    if features.data.ndim != 4 or features.shape[0] != 1:
        raise DimensionError(f"split_patches expects [1,C,H,W], got {features.shape}")
    _, _, hf, wf = features.shape
    if hf % 2 or wf % 2:
        raise ContractError(f"feature map {hf}x{wf} must have even spatial size")
    half_h, half_w = hf // 2, wf // 2
    origins = np.stack(
        [
            np.asarray(
                [rng.integers(0, half_h + 1), rng.integers(0, half_w + 1)],
                dtype=np.int64,
            )
            for _ in range(4)
        ]
    )
    crops = [
        T.crop_batch(features, [origins[p, 0]], [origins[p, 1]], half_h, half_w)
        for p in range(4)
    ]
    return PatchSet(*crops, origins=origins)


def patch_residual(patches):
    """Alternating residual w4 - (w3 - (w2 - w1)) of a patch set."""
    w1, w2, w3, w4 = patches.patches
    return T.sub(w4, T.sub(w3, T.sub(w2, w1)))


def topk_score(residual, state, k_fraction=None):
    """Mean of the top ceil(k * L) locations of the projected residual map."""
    k = state.arch.topk_fraction if k_fraction is None else float(k_fraction)
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"k_fraction must be in (0, 1], got {k}")
    graph = residual.graph or T.Graph()
    proj = graph.leaf(state.params["proj_w"]) if residual.graph else T.Tensor(
        state.params["proj_w"]
    )
    score_map = T.flatten(T.conv2d(residual, proj))
    length = score_map.shape[1]
    return T.topk_mean(score_map, math.ceil(k * length))


def forward_two_heads(image, state, rng):
    """HeadScores for one image with freshly drawn random patch origins."""
    graph = T.Graph()
    params = bind_params(graph, state, requires_grad=False)
    phi1, phi2 = forward_scores(
        graph, params, state.arch, image, draw_origins(state.arch, rng, 1)
    )
    return HeadScores(float(phi1.data[0]), float(phi2.data[0]))


def inference_score(image, state, rng=None):
    """Anomaly score phi2 - phi1 with the fixed quadrant patch tiling.

    The rng argument is accepted for signature parity with the training-time
    forward and ignored: inference is deterministic.
    """
    del rng
    graph = T.Graph()
    params = bind_params(graph, state, requires_grad=False)
    phi1, phi2 = forward_scores(
        graph, params, state.arch, image, quadrant_origins(state.arch, 1)
    )
    return float(phi2.data[0] - phi1.data[0])


def inference_heads(image, state):
    """(phi1, phi2, phi2 - phi1) at inference-time deterministic origins."""
    graph = T.Graph()
    params = bind_params(graph, state, requires_grad=False)
    phi1, phi2 = forward_scores(
        graph, params, state.arch, image, quadrant_origins(state.arch, 1)
    )
    p1, p2 = float(phi1.data[0]), float(phi2.data[0])
    return p1, p2, p2 - p1


def _arch_to_text(arch):
    lines = [
        f"input_size = {arch.input_size}",
        f"in_channels = {arch.in_channels}",
        "channels = " + ",".join(str(c) for c in arch.channels),
        f"mlp_hidden = {arch.mlp_hidden}",
        f"topk_fraction = {arch.topk_fraction!r}",
    ]
    return "\n".join(lines) + "\n"


def _arch_from_text(text):
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        return ArchConfig(
            input_size=int(fields["input_size"]),
            in_channels=int(fields["in_channels"]),
            channels=tuple(int(c) for c in fields["channels"].split(",")),
            mlp_hidden=int(fields["mlp_hidden"]),
            topk_fraction=float(fields["topk_fraction"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed arch block: {exc}") from exc


def save_model(state, path):
    """Versioned binary checkpoint; round-trips bit-exactly."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    arch_block = _arch_to_text(state.arch).encode("utf-8")
    buf.write(struct.pack("<I", len(arch_block)))
    buf.write(arch_block)
    for name, shape in param_shapes(state.arch):
        arr = np.ascontiguousarray(state.params[name], dtype=np.float64)
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name} has shape {arr.shape}, want {shape}")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = struct.unpack("<I", view[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (arch_len,) = struct.unpack("<I", view[8:12])
    pos = 12 + arch_len
    arch = _arch_from_text(bytes(view[12:pos]).decode("utf-8"))
    params = {}
    for name, shape in param_shapes(arch):
        (ndim,) = struct.unpack("<I", view[pos : pos + 4])
        pos += 4
        got = struct.unpack(f"<{ndim}I", view[pos : pos + 4 * ndim])
        pos += 4 * ndim
        if got != shape:
            raise CheckpointError(f"parameter {name} has shape {got}, want {shape}")
        count = int(np.prod(shape))
        params[name] = (
            np.frombuffer(view[pos : pos + 8 * count], dtype="<f8")
            .reshape(shape)
            .copy()
        )
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in {path}")
    return ModelState(arch, params)
