"""2-D convolution lowered to im2col + batched matmul, with col2im backward.

Both the plain and the grouped form go through :func:`_conv`; a grouped
convolution simply batches the matmul over groups. Zero padding, square
kernels and stride 1 or 2 only.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make

# Number of kernel invocations per entry point; tests reset and inspect it.
call_counts: Counter = Counter()


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.groups) < 1:
            raise ValueError(f"non-positive size in {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(f"channels ({self.c_in}, {self.c_out}) not divisible by groups={self.groups}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self} produces empty output for input {h}x{w}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.k, self.k)


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, k, k, Ho, Wo) patch array (a copy)."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back into an (N, C, H, W) array."""
    n, c, h, w = shape
    ho, wo = cols.shape[-2:]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for m in range(k):
        for q in range(k):
            out[:, :, m:m + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += cols[:, :, m, q]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _check(h: Tensor, w: Tensor, spec: ConvSpec) -> tuple[int, int]:
    if h.ndim != 4 or h.shape[1] != spec.c_in:
        raise ShapeError(f"conv input {h.shape} does not match c_in={spec.c_in}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv weight {w.shape} does not match expected {spec.weight_shape}")
    return spec.out_size(h.shape[2], h.shape[3])


def _conv(h: Tensor, w: Tensor, spec: ConvSpec, op: str) -> Tensor:
    ho, wo = _check(h, w, spec)
    n = h.shape[0]
    g, k = spec.groups, spec.k
    cg_in, cg_out = spec.c_in // g, spec.c_out // g
    kk = cg_in * k * k
    cols = im2col(h.data, k, spec.stride, spec.padding).reshape(n, g, kk, ho * wo)
    wmat = w.data.reshape(g, cg_out, kk)
    out = np.matmul(wmat[None], cols).reshape(n, spec.c_out, ho, wo)

    def backward(grad):
        gr = grad.reshape(n, g, cg_out, ho * wo)
        dw = dh = None
        if w.requires_grad:
            gl = gr.transpose(1, 2, 0, 3).reshape(g, cg_out, n * ho * wo)
            cl = cols.transpose(1, 0, 3, 2).reshape(g, n * ho * wo, kk)
            dw = np.matmul(gl, cl).reshape(w.shape)
        if h.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1)[None], gr)
            dh = col2im(dcols.reshape(n, spec.c_in, k, k, ho, wo), h.shape, k, spec.stride, spec.padding)
        return dh, dw

    call_counts[op] += 1
    return _make(out, (h, w), backward, op)


def conv2d(h: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Dense convolution: h (B, C_in, H, W) with w (C_out, C_in, k, k)."""
    if spec.groups != 1:
        raise ValueError("conv2d requires groups == 1; use grouped_conv2d")
    return _conv(h, w, spec, "conv2d")


def grouped_conv2d(h: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Grouped convolution; group g sees only its own input channels and filters.

    With ``h`` of shape (1, B*C_in, H, W) and ``w`` of shape (B*C_out, C_in, k, k)
    and ``groups=B`` this runs B independent convolutions in one call.
    """
    return _conv(h, w, spec, "grouped_conv2d")


def conv_flops(spec: ConvSpec, h: int, w: int) -> int:
    """Per-sample FLOPs, counting one multiply-add as 2: ``2 * (C_in/g) * k^2 * C_out * Ho * Wo``."""
    ho, wo = spec.out_size(h, w)
    return 2 * (spec.c_in // spec.groups) * spec.k * spec.k * spec.c_out * ho * wo
