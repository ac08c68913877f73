"""Dense NCHW float64 kernels used by the block forwards.

Tensors are plain ``numpy.ndarray`` values of rank 4 in (N, C, H, W) layout
and dtype float64. No function here mutates its inputs.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between operands; ``axes`` names the offending axes."""

    def __init__(self, message: str, axes: Sequence[str] = ()):
        super().__init__(message)
        self.axes = tuple(axes)


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous rank-4 float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"expected rank-4 NCHW tensor, got rank {arr.ndim}", ("rank",))
    return arr


def shape_of(x: np.ndarray) -> Shape:
    return Shape(*as_tensor(x).shape)


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    """2-D cross-correlation (no kernel flip).

    ``weight`` has shape (C_out, C_in // groups, kH, kW). Output spatial size is
    ``(H + 2*padding - kH) // stride + 1`` and likewise for W.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    n, c_in, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}", ("stride",))
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(
            f"channels in={c_in} out={c_out} not divisible by groups={groups}",
            ("C_in", "C_out", "groups"),
        )
    if c_per_group != c_in // groups:
        raise DimensionError(
            f"weight expects {c_per_group} input channels per group, input has {c_in // groups}",
            ("C_in", "weight.C_in"),
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}",
            ("H", "W"),
        )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape[0] != c_out:
            raise DimensionError(f"bias length {bias.shape[0]} != C_out {c_out}", ("bias", "C_out"))

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((n, c_out, h_out, w_out))
    oc_per_group = c_out // groups
    h_span = (h_out - 1) * stride + 1
    w_span = (w_out - 1) * stride + 1
    for g in range(groups):
        xs = xp[:, g * c_per_group:(g + 1) * c_per_group]
        ws = weight[g * oc_per_group:(g + 1) * oc_per_group]
        acc = out[:, g * oc_per_group:(g + 1) * oc_per_group]
        # one small GEMM per kernel tap keeps memory at O(input)
        for i in range(kh):
            for j in range(kw):
                patch = xs[:, :, i:i + h_span:stride, j:j + w_span:stride]
                acc += np.einsum("oc,nchw->nohw", ws[:, :, i, j], patch, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def pool(x: np.ndarray, kind: str, kernel: int = 1, stride: int = 1, padding: int | None = None) -> np.ndarray:
    """Pooling.

    kind is one of ``max2d``, ``global_avg2d``, ``avg_along_w`` (reduces W,
    giving N×C×H×1) and ``avg_along_h`` (reduces H, giving N×C×1×W).
    ``max2d`` pads with -inf; padding defaults to ``kernel // 2``.
    """
    x = as_tensor(x)
    if kind == "global_avg2d":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "avg_along_w":
        return x.mean(axis=3, keepdims=True)
    if kind == "avg_along_h":
        return x.mean(axis=2, keepdims=True)
    if kind != "max2d":
        raise ValueError(f"unknown pool kind {kind!r}")

    if padding is None:
        padding = kernel // 2
    n, c, h, w = x.shape
    if kernel < 1 or stride < 1:
        raise DimensionError("kernel and stride must be >= 1", ("kernel", "stride"))
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise DimensionError(
            f"kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}", ("H", "W")
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return np.ascontiguousarray(windows[:, :, ::stride, ::stride].max(axis=(-2, -1)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "silu":
        return x * sigmoid(x)
    if kind in ("identity", "none"):
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}", ("axis",))
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def concat(tensors: Sequence[np.ndarray], axis: int = 1) -> np.ndarray:
    if not tensors:
        raise DimensionError("concat of zero tensors", ("inputs",))
    arrays = [np.asarray(t, dtype=np.float64) for t in tensors]
    ref = arrays[0].shape
    for k, a in enumerate(arrays[1:], start=1):
        if a.ndim != len(ref):
            raise DimensionError(f"input {k} has rank {a.ndim}, expected {len(ref)}", ("rank",))
        bad = [d for d in range(len(ref)) if d != axis % len(ref) and a.shape[d] != ref[d]]
        if bad:
            names = ["NCHW"[d] if len(ref) == 4 else str(d) for d in bad]
            raise DimensionError(f"input {k} shape {a.shape} disagrees with {ref} on axes {names}", names)
    return np.concatenate(arrays, axis=axis)


def split(x: np.ndarray, parts: int | Sequence[int], axis: int = 1) -> list[np.ndarray]:
    """Split into ``parts`` equal chunks, or chunks of the listed sizes."""
    x = np.asarray(x, dtype=np.float64)
    extent = x.shape[axis]
    if isinstance(parts, int):
        if parts < 1 or extent % parts:
            raise DimensionError(f"axis extent {extent} not divisible into {parts} parts", (str(axis),))
        sizes = [extent // parts] * parts
    else:
        sizes = list(parts)
        if sum(sizes) != extent or any(s < 0 for s in sizes):
            raise DimensionError(f"split sizes {sizes} do not sum to extent {extent}", (str(axis),))
    bounds = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, bounds, axis=axis)]


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    x = as_tensor(x)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise DimensionError(f"upsample factor must be a positive integer, got {factor!r}", ("factor",))
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def transpose(x: np.ndarray, axes: Sequence[int] | None = None) -> np.ndarray:
    """Permute axes; default swaps the last two."""
    x = np.asarray(x, dtype=np.float64)
    if axes is None:
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    return np.ascontiguousarray(np.transpose(x, axes))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the last two axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}", ("K",))
    return np.matmul(a, b)


def batch_norm_inference(x, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    c = x.shape[1]
    params = [np.asarray(v, dtype=np.float64).reshape(-1) for v in (mean, var, gamma, beta)]
    for name, v in zip(("mean", "var", "gamma", "beta"), params):
        if v.shape[0] != c:
            raise DimensionError(f"{name} has length {v.shape[0]}, input has {c} channels", (name, "C"))
    mean, var, gamma, beta = params
    if eps <= 0 or np.any(var < 0):
        raise ValueError("batch norm requires var >= 0 and eps > 0")
    scale = gamma / np.sqrt(var + eps)
    return x * scale[None, :, None, None] + (beta - mean * scale)[None, :, None, None]
