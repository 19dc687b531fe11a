"""Dense numeric kernels for the patch CNN: convolution, pooling, linear,
activations, dropout, cross-entropy loss and the SGD update.

All arrays are float64 throughout; every backward pass is hand-written and
checked against finite differences in the test suite. Each kernel comes in a
single-sample form (``[C,H,W]`` / ``[n]``) and, where training needs it, a
batched form operating on a leading sample axis.

Convolutions are fixed to 3x3 kernels (the only size this architecture uses)
and are evaluated as an im2col matrix product so the inner loop is a single
BLAS call.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

KERNEL = 3  # spatial kernel size of every conv layer


@dataclass
class GradPair:
    """A parameter tensor together with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "GradPair":
        value = np.asarray(value, dtype=np.float64)
        return cls(value=value, grad=np.zeros_like(value))


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, padding: str) -> tuple[int, int, int]:
    """Return (out_h, out_w, pad) for a 3x3 convolution."""
    if padding == "same":
        if h < 1 or w < 1:
            raise DimensionError(f"same-padded conv needs spatial dims >= 1, got {h}x{w}")
        return h, w, 1
    if padding == "valid":
        if h < KERNEL or w < KERNEL:
            raise DimensionError(f"valid conv needs spatial dims >= 3, got {h}x{w}")
        return h - 2, w - 2, 0
    raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(x: np.ndarray, padding: str) -> tuple[np.ndarray, int, int]:
    """Unfold batched input [N,C,H,W] into columns [N, C*9, out_h*out_w]."""
    n, c, h, w = x.shape
    oh, ow, pad = _conv_geometry(h, w, padding)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, KERNEL, KERNEL, oh, ow))
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + oh, dx:dx + ow]
    return cols.reshape(n, c * KERNEL * KERNEL, oh * ow), oh, ow


def _check_conv_shapes(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None):
    if x.ndim != 4:
        raise DimensionError(f"conv input must be [N,C,H,W], got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != KERNEL or kernels.shape[3] != KERNEL:
        raise DimensionError(f"kernels must be [Cout,Cin,3,3], got shape {kernels.shape}")
    if kernels.shape[1] != x.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({kernels.shape[0]},)")


def conv2d_forward_batch(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str = "same"
) -> tuple[np.ndarray, np.ndarray]:
    """3x3 convolution over a batch. Returns (output, im2col columns).

    The columns are the cache the backward pass reuses.
    """
    x, kernels, bias = _as_f64(x), _as_f64(kernels), _as_f64(bias)
    _check_conv_shapes(x, kernels, bias)
    n = x.shape[0]
    cout, cin = kernels.shape[:2]
    cols, oh, ow = _im2col(x, padding)
    out = kernels.reshape(cout, cin * 9) @ cols  # [N, Cout, oh*ow] via broadcast
    out += bias[:, None]
    return out.reshape(n, cout, oh, ow), cols


def conv2d_backward_batch(
    x_shape: tuple,
    cols: np.ndarray,
    kernels: np.ndarray,
    grad_out: np.ndarray,
    padding: str = "same",
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv(x)) w.r.t. input, kernels and bias.

    Pass need_input_grad=False for the network's first layer, where nothing
    consumes the input gradient.
    """
    n, cin, h, w = x_shape
    cout = kernels.shape[0]
    oh, ow, pad = _conv_geometry(h, w, padding)
    if grad_out.shape != (n, cout, oh, ow):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != expected {(n, cout, oh, ow)}"
        )
    g = _as_f64(grad_out).reshape(n, cout, oh * ow)

    grad_bias = g.sum(axis=(0, 2))
    grad_kernels = (g @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)

    if not need_input_grad:
        return None, grad_kernels, grad_bias
    gcols = kernels.reshape(cout, cin * 9).T @ g  # [N, Cin*9, oh*ow]
    gcols = gcols.reshape(n, cin, KERNEL, KERNEL, oh, ow)
    gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            gxp[:, :, dy:dy + oh, dx:dx + ow] += gcols[:, :, dy, dx]
    grad_input = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return grad_input, grad_kernels, grad_bias


def conv2d_forward(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str = "same"
) -> np.ndarray:
    """Single-sample 3x3 convolution: [Cin,H,W] -> [Cout,H',W']."""
    x = _as_f64(x)
    if x.ndim != 3:
        raise DimensionError(f"expected [C,H,W] input, got shape {x.shape}")
    out, _ = conv2d_forward_batch(x[None], kernels, bias, padding)
    return out[0]


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray, padding: str = "same"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-sample conv gradients for upstream grad_out [Cout,H',W']."""
    x, kernels = _as_f64(x), _as_f64(kernels)
    if x.ndim != 3:
        raise DimensionError(f"expected [C,H,W] input, got shape {x.shape}")
    _check_conv_shapes(x[None], kernels, None)
    cols, _, _ = _im2col(x[None], padding)
    gx, gk, gb = conv2d_backward_batch(x[None].shape, cols, kernels, grad_out[None], padding)
    return gx[0], gk, gb


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

# window positions in row-major order: index k = 2*dy + dx
_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2x2_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool over [N,C,H,W]; trailing odd row/column dropped.

    Returns (pooled, argmax index in each 2x2 window, first maximum on ties).
    """
    x = _as_f64(x)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2x2 needs spatial dims >= 2, got {h}x{w}")
    oh, ow = h // 2, w // 2
    out = x[:, :, 0:2 * oh:2, 0:2 * ow:2].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for k in (1, 2, 3):
        dy, dx = _POOL_OFFSETS[k]
        part = x[:, :, dy:2 * oh:2, dx:2 * ow:2]
        better = part > out  # strict: ties keep the earliest window position
        idx[better] = k
        np.copyto(out, part, where=better)
    return out, idx


def maxpool2x2_backward_batch(
    grad_out: np.ndarray, idx: np.ndarray, x_shape: tuple
) -> np.ndarray:
    """Route each upstream gradient to the argmax position of its window."""
    grad_out = _as_f64(grad_out)
    oh, ow = grad_out.shape[2:]
    gx = np.zeros(x_shape)
    for k, (dy, dx) in enumerate(_POOL_OFFSETS):
        gx[:, :, dy:2 * oh:2, dx:2 * ow:2] += grad_out * (idx == k)
    return gx


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample 2x2 max pool: [C,H,W] -> ([C,H//2,W//2], window argmax)."""
    x = _as_f64(x)
    if x.ndim != 3:
        raise DimensionError(f"expected [C,H,W] input, got shape {x.shape}")
    out, idx = maxpool2x2_batch(x[None])
    return out[0], idx[0]


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray, x_shape: tuple) -> np.ndarray:
    return maxpool2x2_backward_batch(grad_out[None], idx[None], (1, *x_shape))[0]


def global_maxpool_batch(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel spatial maximum: [N,C,H,W] -> ([N,C], flat argmax)."""
    x = _as_f64(x)
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def global_maxpool_backward_batch(
    grad_out: np.ndarray, idx: np.ndarray, x_shape: tuple
) -> np.ndarray:
    n, c, h, w = x_shape
    gflat = np.zeros((n, c, h * w))
    np.put_along_axis(gflat, idx[..., None], _as_f64(grad_out)[..., None], axis=-1)
    return gflat.reshape(x_shape)


def global_maxpool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-sample global max pool: [C,H,W] -> ([C], flat argmax)."""
    x = _as_f64(x)
    if x.ndim != 3:
        raise DimensionError(f"expected [C,H,W] input, got shape {x.shape}")
    out, idx = global_maxpool_batch(x[None])
    return out[0], idx[0]


def global_maxpool_backward(grad_out: np.ndarray, idx: np.ndarray, x_shape: tuple) -> np.ndarray:
    return global_maxpool_backward_batch(grad_out[None], idx[None], (1, *x_shape))[0]


# ---------------------------------------------------------------------------
# linear, activations, dropout
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map weight @ x + bias. Accepts [n] or batched [N,n] input."""
    x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input dim {x.shape[-1] if x.ndim else '?'} vs weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def linear_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * linear(x)) w.r.t. x, weight, bias."""
    x, weight, grad_out = _as_f64(x), _as_f64(weight), _as_f64(grad_out)
    grad_x = grad_out @ weight
    if x.ndim == 1:
        grad_w = np.outer(grad_out, x)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """f(x) = x for x >= 0 else slope*x, elementwise."""
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky_relu slope must be in (0,1), got {slope}")
    x = _as_f64(x)
    # for slope in (0,1), max(x, slope*x) equals the piecewise definition
    return np.maximum(x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """Derivative is 1 for x >= 0 (including exactly 0) and slope otherwise."""
    x, grad_out = _as_f64(x), _as_f64(grad_out)
    return np.where(x >= 0.0, grad_out, slope * grad_out)


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Training: zero each element with probability `rate`
    and scale survivors by 1/(1-rate); inference: exact identity.

    Returns (output, mask); mask is None on the identity path.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0,1), got {rate}")
    x = _as_f64(x)
    if not training or rate == 0.0:
        return x, None
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None, rate: float) -> np.ndarray:
    if mask is None:
        return _as_f64(grad_out)
    return _as_f64(grad_out) * mask / (1.0 - rate)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(
    logits: np.ndarray, true_class: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Stable softmax + cross-entropy for one sample.

    Returns (loss, probabilities, gradient w.r.t. logits). The loss is
    evaluated in log-space (log-sum-exp) so it stays finite even when the
    true-class probability underflows.
    """
    logits = _as_f64(logits)
    if logits.ndim != 1:
        raise DimensionError(f"logits must be rank 1, got shape {logits.shape}")
    c = logits.shape[0]
    if not 0 <= true_class < c:
        raise IndexError(f"true_class {true_class} out of range for {c} classes")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    total = exps.sum()
    loss = float(np.log(total) - shifted[true_class])
    probs = exps / total
    grad = probs.copy()
    grad[true_class] -= 1.0
    return loss, probs, grad


def softmax_cross_entropy_batch(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over a batch; gradient already divided by N."""
    logits = _as_f64(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    totals = exps.sum(axis=1)
    losses = np.log(totals) - shifted[rows, labels]
    probs = exps / totals[:, None]
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= n
    return float(losses.mean()), probs, grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(
    params: list[GradPair], velocity: list[np.ndarray], lr: float, momentum: float
) -> None:
    """Momentum SGD: v <- momentum*v - lr*grad; value <- value + v; grads zeroed."""
    if lr <= 0.0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ParameterError(f"momentum must be in [0,1), got {momentum}")
    if len(params) != len(velocity):
        raise DimensionError("params and velocity lists differ in length")
    for p, v in zip(params, velocity):
        if v.shape != p.value.shape:
            raise DimensionError(f"velocity shape {v.shape} != param shape {p.value.shape}")
        v *= momentum
        v -= lr * p.grad
        p.value += v
        p.grad[...] = 0.0
