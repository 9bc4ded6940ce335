"""Two-stream 2D segmentation network.

RGB and HHA images run through structurally identical (but independently
parameterized) encoder/ASPP/decoder streams; the stream outputs are
concatenated and fused by a 1x1 convolution into a 64-channel feature map,
from which a second 1x1 convolution produces per-pixel category logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .nnops import ConvSpec, conv, same_padding
from .tensor import Tensor, relu, reshape, upsample_nearest

STREAMS = ("rgb", "hha")


@dataclass
class Seg2dConfig:
    stem_channels: int = 12
    encoder_blocks: tuple[tuple[int, int], ...] = ((20, 2), (28, 1))
    aspp_dilations: tuple[int, ...] = (1, 2, 4)
    decoder_channels: int = 16
    feature_channels: int = 64
    num_categories: int = 11

    def __post_init__(self):
        if self.feature_channels < 1:
            raise ContractViolation("feature_channels must be >= 1")
        if len(set(self.aspp_dilations)) != len(self.aspp_dilations):
            raise ContractViolation(
                f"aspp dilations must be distinct, got {self.aspp_dilations}")
        if any(d < 1 for d in self.aspp_dilations):
            raise ContractViolation("aspp dilations must be >= 1")

    @property
    def downsample_factor(self) -> int:
        return math.prod(s for _, s in self.encoder_blocks)


@dataclass
class Seg2dOutput:
    features: Tensor   # [feature_channels, H, W]
    logits: Tensor     # [num_categories + 1, H, W]
    seg_map: np.ndarray  # [H, W] argmax ids, ties to the smallest id


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class ParamBank(dict):
    """Named parameter dictionary with seeded initializers."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.rng = rng

    def conv_pair(self, name: str, out_c: int, in_c: int,
                  kernel: tuple[int, ...]) -> None:
        k = math.prod(kernel)
        weight = glorot_uniform(self.rng, (out_c, in_c) + kernel,
                                in_c * k, out_c * k)
        self[name + "/weight"] = Tensor(weight, requires_grad=True)
        self[name + "/bias"] = Tensor(np.zeros(out_c), requires_grad=True)

    def matrix(self, name: str, rows: int, cols: int) -> None:
        self[name] = Tensor(glorot_uniform(self.rng, (rows, cols), cols, rows),
                            requires_grad=True)


def _conv_layer(x: Tensor, params, name: str, stride=1, dilation=1,
                padding=None) -> Tensor:
    w = params[name + "/weight"]
    b = params[name + "/bias"]
    kernel = w.shape[2:]
    if padding is None:
        padding = same_padding(kernel, dilation)
    spec = ConvSpec(w.shape[1], w.shape[0], kernel, stride=stride,
                    dilation=dilation, padding=padding)
    return conv(x, w, b, spec)


def aspp(x: Tensor, dilations: tuple[int, ...], params, prefix: str) -> Tensor:
    """Parallel dilated conv branches (each relu'd) summed, then a 1x1
    projection.  Works for 2-D and 3-D inputs alike."""
    if len(dilations) < 1:
        raise ContractViolation("aspp needs at least one dilation")
    if len(set(dilations)) != len(dilations):
        raise ContractViolation(f"aspp dilations must be distinct: {dilations}")
    total = None
    for i, d in enumerate(dilations):
        branch = relu(_conv_layer(x, params, f"{prefix}/branch{i}", dilation=d))
        total = branch if total is None else total + branch
    return _conv_layer(total, params, f"{prefix}/project")


def _residual_stage(x: Tensor, params, name: str, stride: int) -> Tensor:
    h = relu(_conv_layer(x, params, name + "/conv1", stride=stride))
    h = _conv_layer(h, params, name + "/conv2")
    if name + "/shortcut/weight" in params:
        sc = _conv_layer(x, params, name + "/shortcut", stride=stride,
                         padding=0)
    else:
        sc = x
    return relu(h + sc)


def build_stream_params(bank: ParamBank, cfg: Seg2dConfig, stream: str,
                        in_channels: int = 3) -> None:
    c = cfg.stem_channels
    bank.conv_pair(f"{stream}/stem", c, in_channels, (3, 3))
    prev = c
    for i, (channels, stride) in enumerate(cfg.encoder_blocks):
        bank.conv_pair(f"{stream}/enc{i}/conv1", channels, prev, (3, 3))
        bank.conv_pair(f"{stream}/enc{i}/conv2", channels, channels, (3, 3))
        if channels != prev or stride != 1:
            bank.conv_pair(f"{stream}/enc{i}/shortcut", channels, prev, (1, 1))
        prev = channels
    for i in range(len(cfg.aspp_dilations)):
        bank.conv_pair(f"{stream}/aspp/branch{i}", prev, prev, (3, 3))
    bank.conv_pair(f"{stream}/aspp/project", prev, prev, (1, 1))
    for i, (_, stride) in enumerate(reversed(cfg.encoder_blocks)):
        if stride == 1:
            continue
        bank.conv_pair(f"{stream}/dec{i}", cfg.decoder_channels, prev, (3, 3))
        prev = cfg.decoder_channels


def build_seg2d_params(cfg: Seg2dConfig, rng: np.random.Generator) -> ParamBank:
    bank = ParamBank(rng)
    for stream in STREAMS:
        build_stream_params(bank, cfg, stream)
    # The 1x1 fusion conv over the concatenated streams, stored as one
    # half-kernel per stream: the same linear map, but summing the two halves
    # explicitly keeps the stream-swap symmetry exact in floating point.
    for stream in STREAMS:
        bank.conv_pair(f"fuse/{stream}", cfg.feature_channels,
                       cfg.decoder_channels, (1, 1))
    del bank["fuse/rgb/bias"]
    bank["fuse/bias"] = bank.pop("fuse/hha/bias")
    bank["fuse/bias"].data[...] = 0.0
    bank.conv_pair("classify", cfg.num_categories + 1, cfg.feature_channels,
                   (1, 1))
    return bank


def _stream_forward(x: Tensor, params, cfg: Seg2dConfig, stream: str) -> Tensor:
    h = relu(_conv_layer(x, params, f"{stream}/stem"))
    for i, (_, stride) in enumerate(cfg.encoder_blocks):
        h = _residual_stage(h, params, f"{stream}/enc{i}", stride)
    h = aspp(h, cfg.aspp_dilations, params, f"{stream}/aspp")
    for i, (_, stride) in enumerate(reversed(cfg.encoder_blocks)):
        if stride == 1:
            continue
        h = upsample_nearest(h, stride)
        h = relu(_conv_layer(h, params, f"{stream}/dec{i}"))
    return h


def seg2d_forward(rgb: Tensor, hha: Tensor, params, cfg: Seg2dConfig) -> Seg2dOutput:
    """Run both streams, fuse, and classify.  Inputs are [3, H, W]."""
    if rgb.shape != hha.shape:
        raise ContractViolation(
            f"rgb {rgb.shape} and hha {hha.shape} extents differ")
    h, w = rgb.shape[1:]
    factor = cfg.downsample_factor
    if h % factor or w % factor:
        raise ContractViolation(
            f"image extent {h}x{w} is not divisible by the encoder "
            f"downsampling factor {factor}")
    spec = ConvSpec(cfg.decoder_channels, cfg.feature_channels, (1, 1))
    halves = (conv(_stream_forward(rgb, params, cfg, "rgb"),
                   params["fuse/rgb/weight"], None, spec)
              + conv(_stream_forward(hha, params, cfg, "hha"),
                     params["fuse/hha/weight"], None, spec))
    fused = halves + reshape(params["fuse/bias"],
                             (cfg.feature_channels, 1, 1))
    features = relu(fused)
    logits = _conv_layer(features, params, "classify", padding=0)
    seg_map = logits.data.argmax(axis=0).astype(np.uint8)
    return Seg2dOutput(features=features, logits=logits, seg_map=seg_map)
