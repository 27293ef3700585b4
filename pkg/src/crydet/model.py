"""BlazeNet backbone, anomaly head, and the CRYD weight format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crydet import diffcore as dc
from crydet.diffcore import Tensor
from crydet.errors import DimensionError, FormatError

INPUT_SIZE = 64
FEATURE_DIM = 224
CRY = 1  # class index of "cry" in the backbone logits


@dataclass(frozen=True)
class BlazeBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("BlazeBlock kernel must be odd")
        if self.stride not in (1, 2):
            raise ValueError("BlazeBlock stride must be 1 or 2")
        if self.out_channels < self.in_channels:
            raise ValueError("BlazeBlock cannot reduce channels (parameter-free shortcut)")

    @property
    def param_count(self) -> int:
        k2 = self.kernel * self.kernel
        return k2 * self.in_channels + self.in_channels + self.in_channels * self.out_channels + self.out_channels


BLOCKS = (
    BlazeBlockSpec(24, 24),
    BlazeBlockSpec(24, 28),
    BlazeBlockSpec(28, 32, stride=2),
    BlazeBlockSpec(32, 36),
    BlazeBlockSpec(36, 42),
    BlazeBlockSpec(42, 48, stride=2),
    BlazeBlockSpec(48, 56),
    BlazeBlockSpec(56, 64),
    BlazeBlockSpec(64, 72),
    BlazeBlockSpec(72, 80),
    BlazeBlockSpec(80, 88),
    BlazeBlockSpec(88, 96, stride=2),
    BlazeBlockSpec(96, 96),
    BlazeBlockSpec(96, 96),
    BlazeBlockSpec(96, 96),
    BlazeBlockSpec(96, 96),
)
STEM = (3, 24, 5, 2)  # in, out, kernel, stride
FC1_AFTER, FC2_AFTER = 11, 16  # 1-based block indices feeding the two per-position projections
FC1_OUT, FC2_OUT = 2, 6


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def blazenet_shapes() -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in), in network order."""
    cin, cout, k, _ = STEM
    shapes = {"stem.weight": ((cout, cin, k, k), cin * k * k), "stem.bias": ((cout,), cin * k * k)}
    for i, b in enumerate(BLOCKS, start=1):
        k2 = b.kernel * b.kernel
        shapes[f"block{i}.dw.weight"] = ((b.in_channels, 1, b.kernel, b.kernel), k2)
        shapes[f"block{i}.dw.bias"] = ((b.in_channels,), k2)
        shapes[f"block{i}.pw.weight"] = ((b.out_channels, b.in_channels, 1, 1), b.in_channels)
        shapes[f"block{i}.pw.bias"] = ((b.out_channels,), b.in_channels)
    c1, c2 = BLOCKS[FC1_AFTER - 1].out_channels, BLOCKS[FC2_AFTER - 1].out_channels
    shapes["fc1.weight"] = ((c1, FC1_OUT), c1)
    shapes["fc1.bias"] = ((FC1_OUT,), c1)
    shapes["fc2.weight"] = ((c2, FC2_OUT), c2)
    shapes["fc2.bias"] = ((FC2_OUT,), c2)
    shapes["fc.weight"] = ((FEATURE_DIM, 2), FEATURE_DIM)
    shapes["fc.bias"] = ((2,), FEATURE_DIM)
    return shapes


def _per_position(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # (N, C, H, W) -> (N, H*W*out), projecting every spatial position independently
    n, c, h, w = x.shape
    flat = dc.reshape(dc.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    out = dc.linear(flat, weight, bias)
    return dc.reshape(out, (n, h * w * weight.shape[1]))


@dataclass
class BlazeNet:
    params: dict[str, Tensor]

    @property
    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Batch forward on (N, 3, 64, 64) input; returns (features N x 224, logits N x 2)."""
        if x.data.ndim != 4 or x.shape[1:] != (3, INPUT_SIZE, INPUT_SIZE):
            raise DimensionError(f"BlazeNet expects (N, 3, 64, 64) input, got {x.shape}")
        p = self.params
        h = dc.relu(dc.conv2d(x, p["stem.weight"], p["stem.bias"], stride=STEM[3], padding=STEM[2] // 2))
        parts = []
        for i, spec in enumerate(BLOCKS, start=1):
            h = blaze_block(h, spec, p[f"block{i}.dw.weight"], p[f"block{i}.dw.bias"],
                            p[f"block{i}.pw.weight"], p[f"block{i}.pw.bias"])
            if i == FC1_AFTER:
                parts.append(_per_position(h, p["fc1.weight"], p["fc1.bias"]))
            elif i == FC2_AFTER:
                parts.append(_per_position(h, p["fc2.weight"], p["fc2.bias"]))
        feature = dc.concat(parts, axis=1)
        logits = dc.linear(feature, p["fc.weight"], p["fc.bias"])
        return feature, logits

    def weights(self) -> "ModelWeights":
        return ModelWeights({k: v.data.copy() for k, v in self.params.items()})

    def load(self, weights: "ModelWeights") -> None:
        weights.check_against({k: v.shape for k, v in self.params.items()})
        for k, v in weights.tensors.items():
            self.params[k].data = v.astype(np.float32).copy()


def blaze_block(x: Tensor, spec: BlazeBlockSpec, dw_w: Tensor, dw_b: Tensor, pw_w: Tensor, pw_b: Tensor) -> Tensor:
    h = dc.depthwise_conv2d(x, dw_w, dw_b, stride=spec.stride, padding=spec.kernel // 2)
    h = dc.pointwise_conv2d(h, pw_w, pw_b)
    shortcut = x if spec.stride == 1 else dc.max_pool2d(x, 2, 2)
    shortcut = dc.pad_channels(shortcut, spec.out_channels)
    return dc.relu(h + shortcut)


def build_blazenet(seed: int = 0) -> BlazeNet:
    rng = np.random.default_rng(seed)
    params = {name: dc.parameter(_uniform(rng, shape, fan_in), name=name)
              for name, (shape, fan_in) in blazenet_shapes().items()}
    return BlazeNet(params)


def spectrogram_batch(specs) -> Tensor:
    """Stack 64x64 arrays into an (N, 3, 64, 64) input, replicating the single channel."""
    arr = np.stack([np.asarray(getattr(s, "data", s), dtype=np.float32) for s in specs])
    if arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE):
        raise DimensionError(f"BlazeNet input must be 64x64, got {arr.shape[1:]}")
    return Tensor(np.repeat(arr[:, None], 3, axis=1))


def blazenet_forward(net: BlazeNet, spectrogram) -> tuple[np.ndarray, np.ndarray]:
    """Single-spectrogram forward: (224-d feature, 2 logits)."""
    feature, logits = net.forward(spectrogram_batch([spectrogram]))
    return feature.data[0], logits.data[0]


def cry_probability(logits: np.ndarray) -> np.ndarray:
    return dc.softmax(np.atleast_2d(logits))[:, CRY]


def classify(net: BlazeNet, spectrogram, threshold: float = 0.5) -> tuple[float, bool]:
    """Cry probability and label; a score equal to the threshold counts as cry."""
    _, logits = blazenet_forward(net, spectrogram)
    score = float(cry_probability(logits)[0])
    return score, score >= threshold


# ----------------------------------------------------------------------
# anomaly head


HEAD_HIDDEN = 512
HEAD_REFINED = 128
HEAD_DROPOUT = 0.7


def head_shapes(input_dim: int) -> dict[str, tuple[tuple[int, ...], int]]:
    return {
        "head.fc1.weight": ((input_dim, HEAD_HIDDEN), input_dim),
        "head.fc1.bias": ((HEAD_HIDDEN,), input_dim),
        "head.fc2.weight": ((HEAD_HIDDEN, HEAD_REFINED), HEAD_HIDDEN),
        "head.fc2.bias": ((HEAD_REFINED,), HEAD_HIDDEN),
        "head.score.weight": ((HEAD_REFINED, 1), HEAD_REFINED),
        "head.score.bias": ((1,), HEAD_REFINED),
    }


@dataclass
class HeadOutput:
    refined: Tensor  # (N, 128)
    score: Tensor  # (N,)
    magnitude: Tensor  # (N,)


@dataclass
class AnomalyHead:
    params: dict[str, Tensor]
    dropout: float = HEAD_DROPOUT

    @property
    def input_dim(self) -> int:
        return self.params["head.fc1.weight"].shape[0]

    @property
    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def forward(self, features: Tensor, rng: np.random.Generator | None = None, training: bool = False) -> HeadOutput:
        if features.data.ndim != 2 or features.shape[1] != self.input_dim:
            raise DimensionError(f"head expects (N, {self.input_dim}) features, got {features.shape}")
        p = self.params
        h = dc.relu(dc.linear(features, p["head.fc1.weight"], p["head.fc1.bias"]))
        h = dc.dropout(h, self.dropout, rng, training)
        refined = dc.relu(dc.linear(h, p["head.fc2.weight"], p["head.fc2.bias"]))
        pre = dc.linear(refined, p["head.score.weight"], p["head.score.bias"])
        score = dc.reshape(dc.sigmoid(pre), (features.shape[0],))
        return HeadOutput(refined, score, dc.l2_norm(refined, axis=1))

    def weights(self) -> "ModelWeights":
        return ModelWeights({k: v.data.copy() for k, v in self.params.items()})

    def load(self, weights: "ModelWeights") -> None:
        weights.check_against({k: v.shape for k, v in self.params.items()})
        for k, v in weights.tensors.items():
            self.params[k].data = v.astype(np.float32).copy()


def build_head(input_dim: int = FEATURE_DIM, seed: int = 0, dropout: float = HEAD_DROPOUT) -> AnomalyHead:
    rng = np.random.default_rng(seed)
    params = {name: dc.parameter(_uniform(rng, shape, fan_in), name=name)
              for name, (shape, fan_in) in head_shapes(input_dim).items()}
    return AnomalyHead(params, dropout)


def head_from_weights(weights: "ModelWeights", dropout: float = HEAD_DROPOUT) -> AnomalyHead:
    if "head.fc1.weight" not in weights.tensors:
        raise FormatError("weight file does not hold an anomaly head")
    head = build_head(weights.tensors["head.fc1.weight"].shape[0], dropout=dropout)
    head.load(weights)
    return head


def blazenet_from_weights(weights: "ModelWeights") -> BlazeNet:
    net = build_blazenet(0)
    net.load(weights)
    return net


def head_forward(head: AnomalyHead, feature) -> tuple[np.ndarray, float, float]:
    """Inference on one feature vector: (refined 128-vector, score, magnitude)."""
    x = np.asarray(feature, dtype=np.float32)
    if x.ndim != 1:
        raise DimensionError(f"head_forward takes one feature vector, got shape {x.shape}")
    out = head.forward(Tensor(x[None]))
    return out.refined.data[0], float(out.score.data[0]), float(out.magnitude.data[0])


# ----------------------------------------------------------------------
# CRYD weight files

CRYD_MAGIC = b"CRYD"
CRYD_VERSION = 1


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CRYD_VERSION

    def check_against(self, shapes: dict[str, tuple[int, ...]]) -> None:
        if set(self.tensors) != set(shapes):
            missing = sorted(set(shapes) - set(self.tensors))[:3]
            extra = sorted(set(self.tensors) - set(shapes))[:3]
            raise FormatError(f"shape table mismatch: missing {missing}, unexpected {extra}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != tuple(shape):
                raise FormatError(f"shape table mismatch for {name}: {self.tensors[name].shape} vs {shape}")

    def equals(self, other: "ModelWeights") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            self.tensors[k].dtype == other.tensors[k].dtype and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def encode_weights(weights: ModelWeights) -> bytes:
    out = [struct.pack("<4sII", CRYD_MAGIC, weights.version, len(weights.tensors))]
    for name, arr in weights.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(data: bytes) -> ModelWeights:
    def need(n):
        if pos + n > len(data):
            raise FormatError("weight file truncated")

    pos = 0
    need(12)
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != CRYD_MAGIC:
        raise FormatError(f"bad weight-file magic {magic!r}")
    if version != CRYD_VERSION:
        raise FormatError(f"unsupported weight-file version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen + 1)
        try:
            name = data[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("tensor name is not UTF-8") from e
        pos += nlen
        rank = data[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        need(4 * n)
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return ModelWeights(tensors, version)


def save_weights(weights: ModelWeights, path) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path) -> ModelWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read weight file {path}: {e}") from e
    return decode_weights(data)
