"""Dense tensor primitives with matching forward/backward passes.

Tensors are plain numpy arrays: float32, C-order (row-major). Convolution
and affine products accumulate in float64 and store float32 results. All
functions are pure; the only randomness is the caller-supplied generator
for dropout.

Layouts: convolution/pooling/LRN inputs are batch-first with an explicit
channel axis, ``[N, C, L]`` for one spatial dim or ``[N, C, H, W]`` for
two. Affine inputs are flattened rows ``[N, D]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F32 = np.float32


def _store_dtype(x: np.ndarray) -> np.dtype:
    # float64 passes through (finite-difference diagnostics); everything
    # else is stored as float32.
    return x.dtype if x.dtype == np.float64 else np.dtype(F32)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution layer (cross-correlation, no kernel flip)."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        nd = len(self.kernel)
        if nd not in (1, 2):
            raise ValueError(f"conv supports 1 or 2 spatial dims, got {nd}")
        if len(self.stride) != nd or len(self.padding) != nd:
            raise ValueError("kernel/stride/padding rank mismatch")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError("kernel extents and strides must be positive")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding must be non-negative")


@dataclass(frozen=True)
class LrnSpec:
    """Local response normalization across channels.

    out[c] = in[c] / (k + (alpha/size) * sum_{c' in N(c)} in[c']^2)^beta
    with N(c) a window of ``size`` channels centred on c, clipped at the
    channel boundaries.
    """

    size: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"LRN neighborhood must be odd and positive, got {self.size}")
        if self.k < 0 or self.alpha <= 0 or self.beta <= 0:
            raise ValueError("LRN constants out of range")


def conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    padded = extent + 2 * padding
    if kernel > padded:
        raise ValueError(
            f"kernel extent {kernel} exceeds padded input extent {padded}"
        )
    return (padded - kernel) // stride + 1


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec):
    nd = len(spec.kernel)
    if x.ndim != nd + 2:
        raise ValueError(f"input rank {x.ndim} does not match conv rank {nd + 2}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input channel dim is {x.shape[1]}, spec expects {spec.in_channels}"
        )
    want_w = (spec.out_channels, spec.in_channels) + spec.kernel
    if w.shape != want_w:
        raise ValueError(f"weights shaped {w.shape}, spec expects {want_w}")
    if b.shape != (spec.out_channels,):
        raise ValueError(
            f"bias length {b.shape} does not match out_channels {spec.out_channels}"
        )


def _pad_spatial(x: np.ndarray, padding: tuple[int, ...]) -> np.ndarray:
    if not any(padding):
        return x
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths)


def _im2col(x_pad: np.ndarray, spec: ConvSpec, out_sp: tuple[int, ...]) -> np.ndarray:
    """Return patches shaped [N, *out_sp, C * prod(kernel)] (a copy)."""
    nd = len(spec.kernel)
    axes = tuple(range(2, 2 + nd))
    win = np.lib.stride_tricks.sliding_window_view(x_pad, spec.kernel, axis=axes)
    # win: [N, C, *slid_sp, *kernel]; subsample by stride per spatial dim
    slicer = (slice(None), slice(None)) + tuple(
        slice(None, None, s) for s in spec.stride
    )
    win = win[slicer]
    n = x_pad.shape[0]
    # [N, *out_sp, C, *kernel] -> flatten patch dims
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    patch = int(spec.in_channels * np.prod(spec.kernel))
    return np.ascontiguousarray(win.transpose(order)).reshape((n,) + out_sp + (patch,))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` with filter bank ``w`` and add per-channel bias.

    Output spatial extent per dim is floor((in + 2*pad - kernel)/stride) + 1.
    """
    _check_conv_shapes(x, w, b, spec)
    nd = len(spec.kernel)
    out_sp = tuple(
        conv_out_extent(x.shape[2 + d], spec.kernel[d], spec.stride[d], spec.padding[d])
        for d in range(nd)
    )
    cols = _im2col(_pad_spatial(x, spec.padding), spec, out_sp)
    w_mat = w.reshape(spec.out_channels, -1).astype(np.float64)
    out = cols.astype(np.float64) @ w_mat.T + b.astype(np.float64)
    # [N, *out_sp, O] -> [N, O, *out_sp]
    out = np.moveaxis(out, -1, 1)
    return np.ascontiguousarray(out, dtype=_store_dtype(x))


def conv_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv_forward.

    Returns (grad_input, grad_weights, grad_bias).
    """
    b_dummy = np.zeros(spec.out_channels, dtype=F32)
    _check_conv_shapes(x, w, b_dummy, spec)
    nd = len(spec.kernel)
    out_sp = tuple(
        conv_out_extent(x.shape[2 + d], spec.kernel[d], spec.stride[d], spec.padding[d])
        for d in range(nd)
    )
    if grad_out.shape != (x.shape[0], spec.out_channels) + out_sp:
        raise ValueError(
            f"grad_out shaped {grad_out.shape}, forward output is "
            f"{(x.shape[0], spec.out_channels) + out_sp}"
        )
    x_pad = _pad_spatial(x, spec.padding)
    cols = _im2col(x_pad, spec, out_sp).astype(np.float64)

    n = x.shape[0]
    n_out = int(np.prod(out_sp))
    dt = _store_dtype(x)
    g_mat = (
        np.moveaxis(grad_out, 1, -1).astype(np.float64).reshape(n * n_out, spec.out_channels)
    )
    grad_b = g_mat.sum(axis=0).astype(dt)
    grad_w = (g_mat.T @ cols.reshape(n * n_out, -1)).reshape(w.shape).astype(dt)

    # Scatter patch gradients back onto the padded input.
    w_mat = w.reshape(spec.out_channels, -1).astype(np.float64)
    g_cols = (g_mat @ w_mat).reshape(
        (n,) + out_sp + (spec.in_channels,) + spec.kernel
    )
    grad_pad = np.zeros(x_pad.shape, dtype=np.float64)
    if nd == 1:
        (ko,), (so,), (lo,) = spec.kernel, spec.stride, out_sp
        for i in range(ko):
            grad_pad[:, :, i : i + so * lo : so] += np.moveaxis(g_cols[..., i], -1, 1)
    else:
        (kh, kw), (sh, sw), (ho, wo) = spec.kernel, spec.stride, out_sp
        for i in range(kh):
            for j in range(kw):
                grad_pad[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.moveaxis(
                    g_cols[..., i, j], -1, 1
                )
    unpad = (slice(None), slice(None)) + tuple(
        slice(p, p + x.shape[2 + d]) for d, p in enumerate(spec.padding)
    )
    return grad_pad[unpad].astype(dt), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Subgradient at 0 is 0: pass only where strictly positive.
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def _pool_out_shape(x: np.ndarray, window: tuple[int, ...], stride: tuple[int, ...]):
    nd = len(window)
    if x.ndim != nd + 2:
        raise ValueError(f"input rank {x.ndim} does not match pool rank {nd + 2}")
    out_sp = []
    for d in range(nd):
        extent = x.shape[2 + d]
        if window[d] > extent:
            raise ValueError(
                f"pool window {window[d]} exceeds input extent {extent} in dim {d}"
            )
        out_sp.append((extent - window[d]) // stride[d] + 1)
    return tuple(out_sp)


def maxpool_forward(
    x: np.ndarray, window: tuple[int, ...], stride: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Max over each window; also returns flat spatial argmax per output cell.

    Ties resolve to the first (lowest linear index) position, which is what
    np.argmax yields on the row-major window layout.
    """
    out_sp = _pool_out_shape(x, window, stride)
    nd = len(window)
    axes = tuple(range(2, 2 + nd))
    win = np.lib.stride_tricks.sliding_window_view(x, window, axis=axes)
    slicer = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    win = win[slicer].reshape(x.shape[:2] + out_sp + (-1,))
    k = win.argmax(axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]

    # Convert window-local argmax to a flat index into the input's spatial dims.
    if nd == 1:
        starts = np.arange(out_sp[0]) * stride[0]
        flat = starts[None, None, :] + k
    else:
        (sh, sw), (kh, kw) = stride, window
        row = k // kw
        col = k % kw
        hs = (np.arange(out_sp[0]) * sh)[None, None, :, None]
        ws = (np.arange(out_sp[1]) * sw)[None, None, None, :]
        flat = (hs + row) * x.shape[3] + (ws + col)
    return np.ascontiguousarray(out), flat.astype(np.int64)


def maxpool_backward(
    grad_out: np.ndarray,
    argmax: np.ndarray,
    input_shape: tuple[int, ...],
) -> np.ndarray:
    """Route each output gradient to its stored argmax position."""
    if grad_out.shape != argmax.shape:
        raise ValueError(f"grad_out {grad_out.shape} vs argmax {argmax.shape}")
    n, c = input_shape[:2]
    spatial = int(np.prod(input_shape[2:]))
    grad = np.zeros((n * c, spatial), dtype=np.float64)
    rows = np.repeat(np.arange(n * c), argmax[0, 0].size)
    np.add.at(grad, (rows, argmax.reshape(n * c, -1).ravel()), grad_out.reshape(n * c, -1).ravel())
    return grad.reshape(input_shape).astype(grad_out.dtype)


def _channel_window_sum(v: np.ndarray, size: int) -> np.ndarray:
    """Sum over a size-wide channel window (axis 1), clipped at boundaries."""
    c = v.shape[1]
    half = size // 2
    cs = np.cumsum(v, axis=1, dtype=np.float64)
    hi = np.minimum(np.arange(c) + half, c - 1)
    lo = np.arange(c) - half
    out = cs[:, hi].copy()
    inner = lo > 0
    out[:, inner] -= cs[:, lo[inner] - 1]
    return out


def lrn_forward(x: np.ndarray, spec: LrnSpec) -> np.ndarray:
    if x.ndim < 3:
        raise ValueError("LRN input must have a channel axis: [N, C, ...]")
    xd = x.astype(np.float64)
    s = _channel_window_sum(xd * xd, spec.size)
    denom = (spec.k + (spec.alpha / spec.size) * s) ** spec.beta
    return (xd / denom).astype(x.dtype)


def lrn_backward(grad_out: np.ndarray, x: np.ndarray, spec: LrnSpec) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ValueError(f"grad_out {grad_out.shape} vs input {x.shape}")
    xd = x.astype(np.float64)
    g = grad_out.astype(np.float64)
    ratio = spec.alpha / spec.size
    p = spec.k + ratio * _channel_window_sum(xd * xd, spec.size)
    pow_b = p ** (-spec.beta)
    # d out[c]/d x[e] couples channels through the shared window energy.
    t = _channel_window_sum(g * xd * pow_b / p, spec.size)
    grad = g * pow_b - 2.0 * ratio * spec.beta * xd * t
    return grad.astype(x.dtype)


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b with x: [N, D], w: [D, M], b: [M]."""
    if x.ndim != 2:
        raise ValueError(f"affine input must be [N, D], got rank {x.ndim}")
    if w.shape[0] != x.shape[1]:
        raise ValueError(
            f"weight inner dim {w.shape[0]} does not match input width {x.shape[1]}"
        )
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias length {b.shape} does not match output width {w.shape[1]}")
    out = x.astype(np.float64) @ w.astype(np.float64) + b.astype(np.float64)
    return out.astype(_store_dtype(x))


def affine_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ValueError(
            f"grad_out shaped {grad_out.shape}, expected {(x.shape[0], w.shape[1])}"
        )
    g = grad_out.astype(np.float64)
    dt = _store_dtype(x)
    grad_x = (g @ w.astype(np.float64).T).astype(dt)
    grad_w = (x.astype(np.float64).T @ g).astype(dt)
    grad_b = g.sum(axis=0).astype(dt)
    return grad_x, grad_w, grad_b


def dropout(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns (output, mask); mask values are 0 or 1/(1-rate).

    Train mode zeroes each element with probability ``rate`` and scales
    survivors; infer mode is the identity (mask of ones).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("train-mode dropout requires an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / F32(1.0 - rate)
    return x * mask, mask


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. pred: (2/N)(pred - target)."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss on empty input")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / pred.size) * diff
    return loss, grad.astype(_store_dtype(pred))
