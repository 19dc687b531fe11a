"""CNN assembly on top of the tensor kernels: the four-conv/three-fc patch
classifier, its architecture variants, training, and binary checkpoints.

Layer stack: [conv3x3 same-pad -> LeakyReLU -> maxpool2x2] for every conv
layer but the last, then conv3x3 -> LeakyReLU -> global max pool (which turns
the final feature maps into one value per kernel), then
[fc -> LeakyReLU -> dropout] for every hidden fc layer and a final fc feeding
the 3-way softmax. On 36x36 input the baseline maps run 36 -> 18 -> 9 -> 4 and
the global pool yields the 180-long feature vector the fc sizing assumes.
"""

import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DataError, DimensionError, FormatError, ParameterError
from .tensor_ops import (
    GradPair,
    conv2d_backward_batch,
    conv2d_forward_batch,
    dropout,
    dropout_backward,
    global_maxpool_backward_batch,
    global_maxpool_batch,
    leaky_relu,
    leaky_relu_backward,
    linear,
    linear_backward,
    maxpool2x2_backward_batch,
    maxpool2x2_batch,
    sgd_step,
    softmax_cross_entropy_batch,
)

N_CLASSES = 3

BASELINE_CONV = (45, 80, 125, 180)
BASELINE_FC = (1080, 360, 3)


class Variant(str, Enum):
    BASELINE = "baseline"
    HALF = "half"
    PLUS50 = "plus50"
    EXTRA_FC = "extra_fc"
    DROP_FIRST_CONV = "drop_first_conv"


@dataclass(frozen=True)
class Architecture:
    conv_kernel_counts: tuple[int, ...] = BASELINE_CONV
    fc_sizes: tuple[int, ...] = BASELINE_FC
    dropout_rate: float = 0.5
    leaky_slope: float = 0.01
    input_shape: tuple[int, int, int] = (1, 36, 36)
    variant_tag: Variant = Variant.BASELINE

    def __post_init__(self):
        if len(self.conv_kernel_counts) < 1 or any(c < 1 for c in self.conv_kernel_counts):
            raise ParameterError(f"bad conv kernel counts {self.conv_kernel_counts}")
        if len(self.fc_sizes) < 1 or any(s < 1 for s in self.fc_sizes):
            raise ParameterError(f"bad fc sizes {self.fc_sizes}")
        if self.fc_sizes[-1] != N_CLASSES:
            raise ParameterError(f"last fc size must be {N_CLASSES}, got {self.fc_sizes[-1]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout rate {self.dropout_rate} outside [0,1)")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ParameterError(f"leaky slope {self.leaky_slope} outside (0,1)")

    @property
    def feature_length(self) -> int:
        """Length of the vector the global max pool hands to the fc stack."""
        return self.conv_kernel_counts[-1]

    def layer_shapes(self) -> list[tuple]:
        """Parameter shapes in declaration order: (kernels, bias) per conv
        layer, then (weight, bias) per fc layer."""
        shapes: list[tuple] = []
        cin = self.input_shape[0]
        for cout in self.conv_kernel_counts:
            shapes.append((cout, cin, 3, 3))
            shapes.append((cout,))
            cin = cout
        n_in = self.feature_length
        for size in self.fc_sizes:
            shapes.append((size, n_in))
            shapes.append((size,))
            n_in = size
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.layer_shapes())


def make_architecture(
    variant: Variant | str = Variant.BASELINE,
    dropout_rate: float = 0.5,
    leaky_slope: float = 0.01,
) -> Architecture:
    """Build the baseline architecture or one of the four studied variants."""
    variant = Variant(variant)
    conv, fc = BASELINE_CONV, BASELINE_FC
    if variant is Variant.HALF:
        conv = tuple(math.ceil(c / 2) for c in conv)
        fc = tuple(math.ceil(s / 2) for s in fc[:-1]) + (N_CLASSES,)
    elif variant is Variant.PLUS50:
        conv = tuple(math.ceil(c * 1.5) for c in conv)
        fc = tuple(math.ceil(s * 1.5) for s in fc[:-1]) + (N_CLASSES,)
    elif variant is Variant.EXTRA_FC:
        fc = fc[:-1] + (180, N_CLASSES)
    elif variant is Variant.DROP_FIRST_CONV:
        conv = conv[1:]
    return Architecture(
        conv_kernel_counts=conv,
        fc_sizes=fc,
        dropout_rate=dropout_rate,
        leaky_slope=leaky_slope,
        variant_tag=variant,
    )


@dataclass
class CnnModel:
    arch: Architecture
    params: list[GradPair]
    rng_seed: int
    trained_iterations: int = 0

    def conv_pairs(self) -> list[tuple[GradPair, GradPair]]:
        n = len(self.arch.conv_kernel_counts)
        return [(self.params[2 * i], self.params[2 * i + 1]) for i in range(n)]

    def fc_pairs(self) -> list[tuple[GradPair, GradPair]]:
        off = 2 * len(self.arch.conv_kernel_counts)
        n = len(self.arch.fc_sizes)
        return [(self.params[off + 2 * j], self.params[off + 2 * j + 1]) for j in range(n)]


def build_model(arch: Architecture, seed: int) -> CnnModel:
    """Initialize all layers: fan-in-scaled uniform weights (bound
    sqrt(6/fan_in)) and zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params: list[GradPair] = []
    for shape in arch.layer_shapes():
        if len(shape) == 1:  # bias
            params.append(GradPair.of(np.zeros(shape)))
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            params.append(GradPair.of(rng.uniform(-bound, bound, shape)))
    return CnnModel(arch=arch, params=params, rng_seed=seed)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0,1), got {self.momentum}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    verify_accuracy: float | None = None


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _ConvCache:
    x_shape: tuple
    cols: np.ndarray
    pre: np.ndarray            # conv output before activation
    act_shape: tuple
    pool_idx: np.ndarray
    last: bool                 # global pool instead of 2x2


@dataclass
class _FcCache:
    x: np.ndarray
    z: np.ndarray | None       # pre-activation; None for the output layer
    mask: np.ndarray | None


def _forward_batch(
    model: CnnModel,
    x: np.ndarray,
    training: bool,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list]:
    arch = model.arch
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} != expected {arch.input_shape}")
    caches: list = []
    h = np.asarray(x, dtype=np.float64)
    conv_pairs = model.conv_pairs()
    for i, (kern, bias) in enumerate(conv_pairs):
        pre, cols = conv2d_forward_batch(h, kern.value, bias.value, padding="same")
        act = leaky_relu(pre, arch.leaky_slope)
        last = i == len(conv_pairs) - 1
        if last:
            pooled, idx = global_maxpool_batch(act)
        else:
            pooled, idx = maxpool2x2_batch(act)
        caches.append(_ConvCache(h.shape, cols, pre, act.shape, idx, last))
        h = pooled
    fc_pairs = model.fc_pairs()
    for j, (weight, bias) in enumerate(fc_pairs):
        z = linear(h, weight.value, bias.value)
        if j == len(fc_pairs) - 1:
            caches.append(_FcCache(h, None, None))
            h = z
        else:
            a = leaky_relu(z, arch.leaky_slope)
            d, mask = dropout(a, arch.dropout_rate, rng, training)
            caches.append(_FcCache(h, z, mask))
            h = d
    return h, caches


def _backward_batch(model: CnnModel, caches: list, grad_logits: np.ndarray) -> None:
    """Accumulate parameter gradients of the batch loss into model.params."""
    arch = model.arch
    n_conv = len(arch.conv_kernel_counts)
    g = grad_logits
    for j, (weight, bias) in reversed(list(enumerate(model.fc_pairs()))):
        cache: _FcCache = caches[n_conv + j]
        if cache.z is not None:  # hidden layer: undo dropout and activation
            g = dropout_backward(g, cache.mask, arch.dropout_rate)
            g = leaky_relu_backward(cache.z, g, arch.leaky_slope)
        gx, gw, gb = linear_backward(cache.x, weight.value, g)
        weight.grad += gw
        bias.grad += gb
        g = gx
    for i, (kern, bias) in reversed(list(enumerate(model.conv_pairs()))):
        cache: _ConvCache = caches[i]
        if cache.last:
            g = global_maxpool_backward_batch(g, cache.pool_idx, cache.act_shape)
        else:
            g = maxpool2x2_backward_batch(g, cache.pool_idx, cache.act_shape)
        g = leaky_relu_backward(cache.pre, g, arch.leaky_slope)
        g, gk, gb = conv2d_backward_batch(
            cache.x_shape, cache.cols, kern.value, g, "same", need_input_grad=i > 0
        )
        kern.grad += gk
        bias.grad += gb


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def forward_proba(model: CnnModel, patch: np.ndarray) -> np.ndarray:
    """Class probabilities for one [1,36,36] patch, dropout in inference mode."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != model.arch.input_shape:
        raise DimensionError(f"patch shape {patch.shape} != {model.arch.input_shape}")
    logits, _ = _forward_batch(model, patch[None], training=False)
    return _softmax(logits[0])


def forward_proba_batch(model: CnnModel, patches: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Probabilities for a stack of patches [N,1,36,36], evaluated in chunks."""
    out = np.empty((patches.shape[0], N_CLASSES))
    for start in range(0, patches.shape[0], chunk):
        block = patches[start:start + chunk]
        logits, _ = _forward_batch(model, block, training=False)
        out[start:start + chunk] = _softmax(logits)
    return out


def classify_batch(model: CnnModel, patches: np.ndarray) -> np.ndarray:
    return forward_proba_batch(model, patches).argmax(axis=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def stack_patches(patches) -> tuple[np.ndarray, np.ndarray]:
    """Stack a list of labeled patches into (pixels [N,1,36,36], labels [N])."""
    x = np.stack([p.pixels for p in patches]).astype(np.float64)
    y = np.array([p.label for p in patches], dtype=np.int64)
    return x, y


def train(
    model: CnnModel,
    patches,
    cfg: TrainConfig,
    verify=None,
) -> TrainReport:
    """Mini-batch momentum SGD over the labeled patches.

    Shuffling and dropout are driven by cfg.seed, so identical
    (model, data, config) gives bit-identical parameters.
    """
    x, y = stack_patches(patches)
    present = set(np.unique(y).tolist())
    if not present <= set(range(N_CLASSES)):
        raise DataError(f"labels outside 0..{N_CLASSES - 1}: {sorted(present)}")
    missing = sorted(set(range(N_CLASSES)) - present)
    if missing:
        raise DataError(f"training set has no patches for class(es) {missing}")

    rng = np.random.default_rng(cfg.seed)
    velocity = [np.zeros_like(p.value) for p in model.params]
    n = x.shape[0]
    report = TrainReport()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            logits, caches = _forward_batch(model, x[sel], training=True, rng=rng)
            loss, _, grad = softmax_cross_entropy_batch(logits, y[sel])
            _backward_batch(model, caches, grad)
            sgd_step(model.params, velocity, cfg.learning_rate, cfg.momentum)
            epoch_loss += loss * len(sel)
            model.trained_iterations += 1
        report.epoch_losses.append(epoch_loss / n)
    if verify is not None:
        vx, vy = stack_patches(verify)
        report.verify_accuracy = float((classify_batch(model, vx) == vy).mean())
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1

_VARIANT_CODES = {v: i for i, v in enumerate(Variant)}
_VARIANT_FROM_CODE = {i: v for v, i in _VARIANT_CODES.items()}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"checkpoint truncated: wanted {n} bytes, {len(self.data) - self.pos} left",
                offset=self.pos,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]


def save_checkpoint(model: CnnModel, path) -> None:
    """Binary model file: magic, version, variant tag, architecture integers
    (all u32 LE), dropout/slope as f64, training state, then every parameter
    tensor in declaration order as a length-prefixed little-endian f64 array."""
    arch = model.arch
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<B", _VARIANT_CODES[arch.variant_tag])
    ints = [*arch.input_shape, len(arch.conv_kernel_counts), *arch.conv_kernel_counts,
            len(arch.fc_sizes), *arch.fc_sizes]
    out += struct.pack(f"<{len(ints)}I", *ints)
    out += struct.pack("<dd", arch.dropout_rate, arch.leaky_slope)
    out += struct.pack("<QQ", model.rng_seed, model.trained_iterations)
    for p in model.params:
        flat = np.ascontiguousarray(p.value, dtype="<f8").reshape(-1)
        out += struct.pack("<Q", flat.size)
        out += flat.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> CnnModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    code = r.take(1)[0]
    if code not in _VARIANT_FROM_CODE:
        raise FormatError(f"unknown variant tag {code}", offset=8)
    variant = _VARIANT_FROM_CODE[code]
    input_shape = (r.u32(), r.u32(), r.u32())
    conv = tuple(r.u32() for _ in range(r.u32()))
    fc = tuple(r.u32() for _ in range(r.u32()))
    dropout_rate = r.f64()
    leaky_slope = r.f64()
    rng_seed = r.u64()
    trained_iterations = r.u64()
    try:
        arch = Architecture(
            conv_kernel_counts=conv,
            fc_sizes=fc,
            dropout_rate=dropout_rate,
            leaky_slope=leaky_slope,
            input_shape=input_shape,
            variant_tag=variant,
        )
    except ParameterError as e:
        raise FormatError(f"checkpoint architecture invalid: {e}", offset=9) from e
    params: list[GradPair] = []
    for shape in arch.layer_shapes():
        declared_at = r.pos
        count = r.u64()
        if count != math.prod(shape):
            raise FormatError(
                f"parameter length {count} != expected {math.prod(shape)} for shape {shape}",
                offset=declared_at,
            )
        raw = r.take(8 * count)
        params.append(GradPair.of(np.frombuffer(raw, dtype="<f8").reshape(shape).copy()))
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after parameters", offset=r.pos)
    return CnnModel(arch=arch, params=params, rng_seed=rng_seed,
                    trained_iterations=trained_iterations)


def clone_params(model: CnnModel) -> list[np.ndarray]:
    """Snapshot of all parameter values (for determinism comparisons)."""
    return [p.value.copy() for p in model.params]


def toy_architecture() -> Architecture:
    """A tiny network used by gradient checks: conv [2,2,2,2], fc [12,6,3]."""
    return Architecture(conv_kernel_counts=(2, 2, 2, 2), fc_sizes=(12, 6, 3))


def replace_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
