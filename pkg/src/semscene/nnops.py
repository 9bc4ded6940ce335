"""Differentiable network primitives: N-D convolution, pooling, and the
two-layer attention perceptron.

Convolution works for any number of spatial axes (2 for images, 3 for
volumes) on channels-first single-sample tensors.  The implementation
gathers kernel taps into a column matrix so forward and both backward
passes are single BLAS calls plus one strided copy per kernel tap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, as_tensor, make_op, relu

_AXIS_NAMES = {2: ("h", "w"), 3: ("d", "h", "w")}


def _per_axis(value, n_axes: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * n_axes
    value = tuple(int(v) for v in value)
    if len(value) != n_axes:
        raise ContractViolation(f"{name} must have {n_axes} entries, got {value}")
    return value


@dataclass
class ConvSpec:
    """Geometry of one convolution: kernel extents, stride, dilation, padding."""

    in_channels: int
    out_channels: int
    kernel_extent: tuple[int, ...]
    stride: tuple[int, ...] | int = 1
    dilation: tuple[int, ...] | int = 1
    padding: tuple[int, ...] | int = 0

    def __post_init__(self):
        self.kernel_extent = tuple(int(k) for k in self.kernel_extent)
        n = len(self.kernel_extent)
        self.stride = _per_axis(self.stride, n, "stride")
        self.dilation = _per_axis(self.dilation, n, "dilation")
        self.padding = _per_axis(self.padding, n, "padding")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractViolation(
                f"channel counts must be positive, got in={self.in_channels} "
                f"out={self.out_channels}")
        for name, values, low in (("kernel_extent", self.kernel_extent, 1),
                                  ("stride", self.stride, 1),
                                  ("dilation", self.dilation, 1),
                                  ("padding", self.padding, 0)):
            for axis, v in enumerate(values):
                if v < low:
                    raise ContractViolation(
                        f"{name} must be >= {low} on axis {axis}, got {v}")

    @property
    def n_axes(self) -> int:
        return len(self.kernel_extent)

    def output_extent(self, input_extent: tuple[int, ...]) -> tuple[int, ...]:
        if len(input_extent) != self.n_axes:
            raise ContractViolation(
                f"expected {self.n_axes} spatial axes, got {len(input_extent)}")
        out = []
        for axis, (n, k, s, d, p) in enumerate(zip(
                input_extent, self.kernel_extent, self.stride,
                self.dilation, self.padding)):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ContractViolation(
                    f"convolution output extent < 1 on spatial axis {axis}: "
                    f"input {n}, kernel {k}, stride {s}, dilation {d}, padding {p}")
            out.append(o)
        return tuple(out)


def same_padding(kernel_extent: tuple[int, ...],
                 dilation: tuple[int, ...] | int = 1) -> tuple[int, ...]:
    """Extent-preserving padding for odd kernels at stride 1."""
    dilation = _per_axis(dilation, len(kernel_extent), "dilation")
    pads = []
    for k, d in zip(kernel_extent, dilation):
        if k % 2 == 0:
            raise ContractViolation(f"same padding needs odd kernel extents, got {k}")
        pads.append(d * (k - 1) // 2)
    return tuple(pads)


def _tap_slices(spec: ConvSpec, out_extent: tuple[int, ...]):
    """For each kernel tap, the padded-input slice it reads over all outputs."""
    slices = []
    for taps in itertools.product(*(range(k) for k in spec.kernel_extent)):
        sl = tuple(
            slice(t * d, t * d + s * (o - 1) + 1, s)
            for t, d, s, o in zip(taps, spec.dilation, spec.stride, out_extent))
        slices.append((slice(None),) + sl)
    return slices


def _tap_offsets(spec: ConvSpec) -> list[tuple[int, ...]]:
    """Signed per-axis input offset of each kernel tap relative to its output
    position (valid when the convolution preserves spatial extent)."""
    return [tuple(t * d - p for t, d, p in
                  zip(taps, spec.dilation, spec.padding))
            for taps in itertools.product(*(range(k) for k in spec.kernel_extent))]


def _zero_border(view: np.ndarray, offsets: tuple[int, ...]) -> None:
    """Zero the slabs an offset shifted past the array border (in place)."""
    for axis, off in enumerate(offsets):
        if off > 0:
            view[(slice(None),) * (axis + 1) + (slice(-off, None),)] = 0.0
        elif off < 0:
            view[(slice(None),) * (axis + 1) + (slice(None, -off),)] = 0.0


def _cols_by_shift(x: np.ndarray, spec: ConvSpec,
                   offsets: list[tuple[int, ...]]) -> np.ndarray:
    """im2col for extent-preserving stride-1 convs via flat segment copies.

    Each tap is the input shifted by a constant flat offset; copying the two
    wrapped segments and zeroing the out-of-range border slabs is much faster
    than a strided N-D gather (the wrap lands entirely inside those slabs)."""
    cin = x.shape[0]
    spatial = x.shape[1:]
    n = math.prod(spatial)
    axis_strides = np.cumprod((spatial + (1,))[::-1])[::-1][1:]
    flat = x.reshape(cin, n)
    cols = np.empty((cin, len(offsets), n))
    for j, offs in enumerate(offsets):
        s = int(np.dot(offs, axis_strides))
        tap = cols[:, j, :]
        if s >= 0:
            tap[:, :n - s] = flat[:, s:]
            if s:
                tap[:, n - s:] = flat[:, :s]
        else:
            tap[:, -s:] = flat[:, :n + s]
            tap[:, :-s] = flat[:, n + s:]
        _zero_border(tap.reshape((cin,) + spatial), offs)
    return cols


def _scatter_by_shift(gcols: np.ndarray, x_shape: tuple[int, ...],
                      spec: ConvSpec, offsets: list[tuple[int, ...]]) -> np.ndarray:
    """Adjoint of :func:`_cols_by_shift`: accumulate tap gradients back."""
    cin = x_shape[0]
    spatial = x_shape[1:]
    n = math.prod(spatial)
    axis_strides = np.cumprod((spatial + (1,))[::-1])[::-1][1:]
    gx = np.zeros((cin, n))
    for j, offs in enumerate(offsets):
        s = int(np.dot(offs, axis_strides))
        tap = gcols[:, j, :]
        _zero_border(tap.reshape((cin,) + spatial), offs)
        if s >= 0:
            gx[:, s:] += tap[:, :n - s]
            if s:
                gx[:, :s] += tap[:, n - s:]
        else:
            gx[:, :n + s] += tap[:, -s:]
            gx[:, n + s:] += tap[:, :-s]
    return gx.reshape(x_shape)


def conv(x: Tensor, weights: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Convolve a [Cin, *spatial] tensor with [Cout, Cin, *kernel] weights."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.data.ndim != spec.n_axes + 1:
        raise ContractViolation(
            f"input must have shape [C, {spec.n_axes} spatial axes], got {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ContractViolation(
            f"input channel axis has {x.shape[0]} channels, spec expects "
            f"{spec.in_channels}")
    expected_w = (spec.out_channels, spec.in_channels) + spec.kernel_extent
    if weights.shape != expected_w:
        if len(weights.shape) == len(expected_w):
            axis = next(i for i, (a, e) in enumerate(zip(weights.shape, expected_w))
                        if a != e)
            raise ContractViolation(
                f"weights shape {weights.shape} does not match spec {expected_w} "
                f"on axis {axis}")
        raise ContractViolation(
            f"weights shape {weights.shape} does not match spec {expected_w}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ContractViolation(
                f"bias shape {bias.shape} must be ({spec.out_channels},)")

    out_extent = spec.output_extent(x.shape[1:])
    n_taps = math.prod(spec.kernel_extent)
    n_out = math.prod(out_extent)
    w2 = weights.data.reshape(spec.out_channels, spec.in_channels * n_taps)

    pointwise = (n_taps == 1 and spec.stride == (1,) * spec.n_axes
                 and spec.padding == (0,) * spec.n_axes)
    preserving = (not pointwise and spec.stride == (1,) * spec.n_axes
                  and out_extent == x.shape[1:])

    if pointwise:
        cols2 = x.data.reshape(spec.in_channels, n_out)
        scatter = None
    elif preserving:
        offsets = _tap_offsets(spec)
        cols2 = _cols_by_shift(x.data, spec, offsets).reshape(
            spec.in_channels * n_taps, n_out)

        def scatter(gcols):
            return _scatter_by_shift(gcols, x.shape, spec, offsets)
    else:
        pad = [(0, 0)] + [(p, p) for p in spec.padding]
        xp = np.pad(x.data, pad) if any(spec.padding) else x.data
        taps = _tap_slices(spec, out_extent)
        cols = np.empty((spec.in_channels, n_taps, n_out))
        for j, sl in enumerate(taps):
            cols[:, j, :] = xp[sl].reshape(spec.in_channels, n_out)
        cols2 = cols.reshape(spec.in_channels * n_taps, n_out)

        def scatter(gcols):
            gxp = np.zeros_like(xp)
            for j, sl in enumerate(taps):
                gxp[sl] += gcols[:, j, :].reshape(
                    (spec.in_channels,) + out_extent)
            if any(spec.padding):
                trim = (slice(None),) + tuple(
                    slice(p, p + e) for p, e in zip(spec.padding, x.shape[1:]))
                gxp = np.ascontiguousarray(gxp[trim])
            return gxp

    y = w2 @ cols2
    if bias is not None:
        y += bias.data[:, None]
    out_data = y.reshape((spec.out_channels,) + out_extent)

    def backward(g):
        gy = g.reshape(spec.out_channels, n_out)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gy.sum(axis=1))
        if weights.requires_grad:
            weights.accumulate_grad((gy @ cols2.T).reshape(weights.shape))
        if x.requires_grad:
            gflat = w2.T @ gy
            if scatter is None:
                x.accumulate_grad(gflat.reshape(x.shape))
            else:
                x.accumulate_grad(scatter(gflat.reshape(
                    spec.in_channels, n_taps, n_out)))

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_op(out_data, parents, backward)


_DDR_EXTENTS = ((1, 1, 3), (1, 3, 1), (3, 1, 1))


def ddr_conv3d(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """Factorized 3x3x3 convolution: three bias-free stages with kernel
    extents 1x1x3, 1x3x1, 3x1x1, each padded to preserve spatial extent."""
    stages = (as_tensor(w1), as_tensor(w2), as_tensor(w3))
    out = as_tensor(x)
    prev_out_channels = out.shape[0]
    for i, (w, extent) in enumerate(zip(stages, _DDR_EXTENTS)):
        if w.data.ndim != 5 or w.shape[2:] != extent:
            raise ContractViolation(
                f"ddr stage {i + 1} weights must end in kernel extent {extent}, "
                f"got shape {w.shape}")
        if w.shape[1] != prev_out_channels:
            raise ContractViolation(
                f"ddr stage {i + 1} expects {w.shape[1]} input channels but the "
                f"previous stage emits {prev_out_channels}")
        spec = ConvSpec(w.shape[1], w.shape[0], extent, padding=same_padding(extent))
        out = conv(out, w, None, spec)
        prev_out_channels = w.shape[0]
    return out


def pool(x: Tensor, kind: str, axes: str) -> Tensor:
    """Global pooling: ``axes='spatial'`` reduces a [C, *S] tensor to [C];
    ``axes='channel'`` reduces it to [1, *S].  Max routes its gradient to the
    first argmax in row-major scan order."""
    x = as_tensor(x)
    if x.size == 0:
        raise ContractViolation("pool of an empty tensor")
    if kind not in ("avg", "max"):
        raise ContractViolation(f"unknown pool kind {kind!r}")
    if axes not in ("spatial", "channel"):
        raise ContractViolation(f"unknown pool axes {axes!r}")

    channels = x.shape[0]
    spatial = x.shape[1:]
    n_spatial = math.prod(spatial)
    flat = x.data.reshape(channels, n_spatial)

    if axes == "spatial":
        if kind == "avg":
            out_data = flat.mean(axis=1)

            def backward(g):
                x.accumulate_grad(np.broadcast_to(
                    g[:, None] / n_spatial, flat.shape).reshape(x.shape))
        else:
            arg = flat.argmax(axis=1)
            out_data = flat[np.arange(channels), arg]

            def backward(g):
                gx = np.zeros_like(flat)
                gx[np.arange(channels), arg] = g
                x.accumulate_grad(gx.reshape(x.shape))
    else:
        if kind == "avg":
            out_data = flat.mean(axis=0).reshape((1,) + spatial)

            def backward(g):
                x.accumulate_grad(np.broadcast_to(
                    g.reshape(1, n_spatial) / channels, flat.shape).reshape(x.shape))
        else:
            arg = flat.argmax(axis=0)
            out_data = flat[arg, np.arange(n_spatial)].reshape((1,) + spatial)

            def backward(g):
                gx = np.zeros_like(flat)
                gx[arg, np.arange(n_spatial)] = g.reshape(n_spatial)
                x.accumulate_grad(gx.reshape(x.shape))

    return make_op(np.ascontiguousarray(out_data), (x,), backward)


def matvec(w: Tensor, v: Tensor) -> Tensor:
    """y = W @ v for a 2-D weight and 1-D vector."""
    w, v = as_tensor(w), as_tensor(v)
    if w.data.ndim != 2 or v.data.ndim != 1 or w.shape[1] != v.shape[0]:
        raise ContractViolation(
            f"matvec shapes incompatible: {w.shape} @ {v.shape}")
    out_data = w.data @ v.data

    def backward(g):
        if w.requires_grad:
            w.accumulate_grad(np.outer(g, v.data))
        if v.requires_grad:
            v.accumulate_grad(w.data.T @ g)

    return make_op(out_data, (w, v), backward)


def mlp_hidden_size(channels: int) -> int:
    """Hidden width of the channel-attention perceptron: max(1, C // 8)."""
    if channels < 1:
        raise ContractViolation(f"channel count must be >= 1, got {channels}")
    return max(1, channels // 8)


def mlp2(x: Tensor, w_hidden: Tensor, w_out: Tensor) -> Tensor:
    """Two-layer perceptron C -> max(1, C//8) -> C with relu on the hidden layer."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ContractViolation(f"mlp2 input must be a vector, got shape {x.shape}")
    c = x.shape[0]
    hidden = mlp_hidden_size(c)
    w_hidden, w_out = as_tensor(w_hidden), as_tensor(w_out)
    if w_hidden.shape != (hidden, c):
        raise ContractViolation(
            f"w_hidden shape {w_hidden.shape} must be ({hidden}, {c})")
    if w_out.shape != (c, hidden):
        raise ContractViolation(
            f"w_out shape {w_out.shape} must be ({c}, {hidden})")
    return matvec(w_out, relu(matvec(w_hidden, x)))
