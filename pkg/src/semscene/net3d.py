"""3D volume network: a one-hot ROI guidance branch and an attention-gated
completion branch, fused multiplicatively into per-voxel class scores.

The completion branch projects the scattered 64-channel feature volume down
to its working width, runs four residual attention blocks (each: factorized
DDR convolution -> channel attention -> spatial attention, added back onto
the block input), concatenates the four block outputs, fuses them 1x1x1,
expands context with a dilated-conv pyramid, and finishes with four cascaded
convolutions emitting one score channel per category plus empty.

Forward passes append block names to the active operation trace
(:func:`op_trace`), which the ablation harness uses to prove that disabled
branches really are absent from the computation.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .net2d import ParamBank, aspp, _conv_layer
from .nnops import mlp2, mlp_hidden_size, pool
from .tensor import (Tensor, concat_channels, relu, reshape, sigmoid,
                     softmax_channel)

_TRACE: list[str] | None = None


@contextmanager
def op_trace():
    """Collect the names of network blocks executed inside the context."""
    global _TRACE
    previous = _TRACE
    _TRACE = []
    try:
        yield _TRACE
    finally:
        _TRACE = previous


def _record(name: str) -> None:
    if _TRACE is not None:
        _TRACE.append(name)


@dataclass
class Net3dConfig:
    channels: int = 16            # completion branch working width C
    guidance_channels: int = 8
    spatial_attn_channels: int = 8
    aspp_dilations: tuple[int, ...] = (1, 2, 3)
    num_categories: int = 11
    feature_in: int = 64          # channels of the projected 2D feature volume
    n_rabs: int = 4
    # Kernel extents of the four cascaded head convolutions; context comes
    # from the dilated pyramid, so the tail stays mostly pointwise.
    tail_kernels: tuple[tuple[int, int, int], ...] = (
        (3, 3, 3), (1, 1, 1), (1, 1, 1), (1, 1, 1))

    def __post_init__(self):
        if self.channels < 1 or self.guidance_channels < 1:
            raise ContractViolation("3D network widths must be >= 1")
        if len(self.tail_kernels) != 4:
            raise ContractViolation("the completion head has four convolutions")


def build_guidance_params(cfg: Net3dConfig, rng: np.random.Generator,
                          bank: ParamBank | None = None) -> ParamBank:
    bank = bank if bank is not None else ParamBank(rng)
    n, g = cfg.num_categories, cfg.guidance_channels
    bank.conv_pair("guidance/conv1", g, n, (3, 3, 3))
    bank.conv_pair("guidance/conv2", g, g, (3, 3, 3))
    bank.conv_pair("guidance/conv3", cfg.num_categories + 1, g, (3, 3, 3))
    return bank


def build_completion_params(cfg: Net3dConfig, rng: np.random.Generator,
                            attention: bool = True,
                            bank: ParamBank | None = None) -> ParamBank:
    bank = bank if bank is not None else ParamBank(rng)
    c = cfg.channels
    bank.conv_pair("completion/proj", c, cfg.feature_in, (1, 1, 1))
    for i in range(cfg.n_rabs):
        p = f"completion/rab{i}"
        bank.conv_pair(f"{p}/ddr1", c, c, (1, 1, 3))
        bank.conv_pair(f"{p}/ddr2", c, c, (1, 3, 1))
        bank.conv_pair(f"{p}/ddr3", c, c, (3, 1, 1))
        if attention:
            hidden = mlp_hidden_size(c)
            bank.matrix(f"{p}/ca/hidden", hidden, c)
            bank.matrix(f"{p}/ca/out", c, hidden)
            bank.conv_pair(f"{p}/sa/conv1", cfg.spatial_attn_channels, 2,
                           (5, 5, 5))
            bank.conv_pair(f"{p}/sa/conv2", 1, cfg.spatial_attn_channels,
                           (1, 1, 1))
    bank.conv_pair("completion/fuse", c, cfg.n_rabs * c, (1, 1, 1))
    for i in range(len(cfg.aspp_dilations)):
        bank.conv_pair(f"completion/aspp/branch{i}", c, c, (3, 3, 3))
    bank.conv_pair("completion/aspp/project", c, c, (1, 1, 1))
    for i, kernel in enumerate(cfg.tail_kernels):
        out_c = cfg.num_categories + 1 if i == 3 else c
        bank.conv_pair(f"completion/tail{i + 1}", out_c, c, kernel)
    return bank


def one_hot_roi_encode(labels: np.ndarray, n_categories: int) -> Tensor:
    """Axis-aligned bounding-box indicator per category: channel c-1 is one
    inside the inclusive bounding box of all voxels labeled c, else zero."""
    if labels.ndim != 3:
        raise ContractViolation(f"label volume must be 3-D, got {labels.shape}")
    out = np.zeros((n_categories,) + labels.shape)
    for cat in range(1, n_categories + 1):
        coords = np.argwhere(labels == cat)
        if coords.size == 0:
            continue
        lo = coords.min(axis=0)
        hi = coords.max(axis=0) + 1
        out[cat - 1, lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
    return Tensor(out)


def guidance_forward(encoded: Tensor, params) -> Tensor:
    """Three extent-preserving dense convolutions, sigmoid output in (0, 1)."""
    _record("guidance")
    h = relu(_conv_layer(encoded, params, "guidance/conv1"))
    h = relu(_conv_layer(h, params, "guidance/conv2"))
    return sigmoid(_conv_layer(h, params, "guidance/conv3"))


def channel_attention(x: Tensor, params, prefix: str) -> Tensor:
    """Per-channel gate: shared MLP over global avg- and max-pooled
    descriptors, summed, squashed to (0, 1)."""
    _record("channel_attention")
    hidden = params[f"{prefix}/ca/hidden"]
    out = params[f"{prefix}/ca/out"]
    avg = mlp2(pool(x, "avg", "spatial"), hidden, out)
    mx = mlp2(pool(x, "max", "spatial"), hidden, out)
    return sigmoid(avg + mx)


def spatial_attention(x: Tensor, params, prefix: str) -> Tensor:
    """Per-voxel gate from channel-pooled descriptors through a 5x5x5 and a
    1x1x1 convolution."""
    _record("spatial_attention")
    desc = concat_channels([pool(x, "avg", "channel"), pool(x, "max", "channel")])
    h = relu(_conv_layer(desc, params, f"{prefix}/sa/conv1"))
    return sigmoid(_conv_layer(h, params, f"{prefix}/sa/conv2", padding=0))


def _ddr_stack(x: Tensor, params, prefix: str) -> Tensor:
    """Factorized 3x3x3 block with relu after the first two stages; the last
    stage stays linear so attention can modulate both signs."""
    h = relu(_conv_layer(x, params, f"{prefix}/ddr1"))
    h = relu(_conv_layer(h, params, f"{prefix}/ddr2"))
    return _conv_layer(h, params, f"{prefix}/ddr3")


def rab_forward(x: Tensor, params, prefix: str, attention: bool = True) -> Tensor:
    """Residual attention block: y = A(D(x)) + x, where D is the DDR stack
    and A applies channel then spatial attention.  With ``attention`` off the
    block is exactly DDR + shortcut."""
    _record("rab")
    d = _ddr_stack(x, params, prefix)
    if d.shape != x.shape:
        raise ContractViolation(
            f"rab branch changed shape {x.shape} -> {d.shape}")
    if attention:
        cw = channel_attention(d, params, prefix)
        refined = d * reshape(cw, cw.shape + (1, 1, 1))
        s = spatial_attention(refined, params, prefix)
        attended = refined * s
    else:
        attended = d
    return attended + x


def completion_forward(feature_volume: Tensor, params, cfg: Net3dConfig,
                       attention: bool = True) -> Tensor:
    """Score volume [num_categories + 1, Dx, Dy, Dz] from the projected
    feature volume [feature_in, Dx, Dy, Dz]."""
    _record("completion")
    h = _conv_layer(feature_volume, params, "completion/proj", padding=0)
    outputs = []
    for i in range(cfg.n_rabs):
        h = rab_forward(h, params, f"completion/rab{i}", attention=attention)
        outputs.append(h)
    fused = _conv_layer(concat_channels(outputs), params, "completion/fuse",
                        padding=0)
    fused = aspp(fused, cfg.aspp_dilations, params, "completion/aspp")
    fused = relu(_conv_layer(fused, params, "completion/tail1"))
    fused = relu(_conv_layer(fused, params, "completion/tail2"))
    fused = relu(_conv_layer(fused, params, "completion/tail3"))
    return _conv_layer(fused, params, "completion/tail4")


def fuse_and_classify(completion: Tensor, guidance: Tensor | None) -> Tensor:
    """Per-voxel class probabilities.  With a guidance volume the scores are
    gated elementwise before the channel softmax; without one (the guidance
    branch ablated away) the softmax applies directly."""
    if guidance is None:
        return softmax_channel(completion)
    if guidance.shape != completion.shape:
        raise ContractViolation(
            f"guidance shape {guidance.shape} does not match completion "
            f"{completion.shape}")
    _record("fuse_multiply")
    return softmax_channel(completion * guidance)
