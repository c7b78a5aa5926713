"""Convolutional potential network: image + initial segmentation -> (psi_u, k).

Layout per block ``b`` (dilation ``2**b``)::

    f, g   = dilated 3×3 convs of the block input       (channels each)
    a      = tanh(f) * sigmoid(g) + bias_1x1(init_seg)  (post-gate conditioning)
    x     += residual_1x1(a)                            (stem_channels wide)
    skip_b = relu(skip_1x1(a))

The skips are concatenated, passed through a 1×1 relu head, then split into a
linear unary head (P channels) and an exponential kernel head (4 channels).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import crf as crf_mod
from . import tensor as T
from .tensor import Tensor

VARIANTS = ("cnn", "cnngan", "cnnrnn", "cnnrnngan")


def receptive_field(q: int) -> int:
    return 3 + 2 * sum(2**i for i in range(q))


def num_blocks(h: int, w: int) -> int:
    """Largest q whose receptive field 2**(q+1)+1 fits in min(h, w)."""
    side = min(h, w)
    if side < 3:
        raise ValueError(f"min(h, w) = {side} < 3: the stem does not fit")
    q = 0
    while receptive_field(q + 1) <= side:
        q += 1
    return q


def normalize_variant(variant: str) -> str:
    v = variant.lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


def uses_crf(variant: str) -> bool:
    return "rnn" in normalize_variant(variant)


def uses_gan(variant: str) -> bool:
    return normalize_variant(variant).endswith("gan")


@dataclass
class GeneratorConfig:
    num_labels: int = 3
    input_hw: tuple[int, int] = (96, 96)
    channels: int = 64
    stem_channels: int = 32
    head_channels: int = 160
    in_channels: int = 3
    variant: str = "cnnrnngan"
    bias_mode: str = "post"  # "post": add after the gate, "pre": add to filter/gate pre-activations
    crf_iterations: int = 5
    q_init: str = "softmax"
    mu_init: str = "potts"  # "potts" | "zero" | "he"
    num_blocks: int = field(init=False)

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.variant = normalize_variant(self.variant)
        if self.bias_mode not in ("post", "pre"):
            raise ValueError(f"bias_mode must be 'post' or 'pre', got {self.bias_mode!r}")
        self.num_blocks = num_blocks(*self.input_hw)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, s, hd, p = self.channels, self.stem_channels, self.head_channels, self.num_labels
        shapes: dict[str, tuple[int, ...]] = {
            "stem.w": (s, self.in_channels, 3, 3),
            "stem.b": (s,),
        }
        for b in range(self.num_blocks):
            pre = f"block{b}."
            for path in ("filter", "gate"):
                shapes[pre + path + ".w"] = (c, s, 3, 3)
                shapes[pre + path + ".b"] = (c,)
            bias_paths = ("bias",) if self.bias_mode == "post" else ("bias_filter", "bias_gate")
            for path in bias_paths:
                shapes[pre + path + ".w"] = (c, p, 1, 1)
                shapes[pre + path + ".b"] = (c,)
            shapes[pre + "residual.w"] = (s, c, 1, 1)
            shapes[pre + "residual.b"] = (s,)
            shapes[pre + "skip.w"] = (c, c, 1, 1)
            shapes[pre + "skip.b"] = (c,)
        shapes["head.w"] = (hd, self.num_blocks * c, 1, 1)
        shapes["head.b"] = (hd,)
        shapes["unary.w"] = (p, hd, 1, 1)
        shapes["unary.b"] = (p,)
        shapes["kernel.w"] = (4, hd, 1, 1)
        shapes["kernel.b"] = (4,)
        if uses_crf(self.variant):
            shapes["crf.mu"] = (p, p)
        return shapes

    def param_count(self) -> int:
        """Closed form of the total parameter count.

        stem 9·in·s + s; per block 2(9sc + c) + bias + (cs + s) + (c² + c) where
        bias is (pc + c) post-gate or 2(pc + c) pre-gate; head qc·hd + hd;
        heads hd·p + p + 4hd + 4; plus p² for the compatibility matrix.
        """
        c, s, hd, p, q = self.channels, self.stem_channels, self.head_channels, self.num_labels, self.num_blocks
        bias = (p * c + c) * (1 if self.bias_mode == "post" else 2)
        block = 2 * (9 * s * c + c) + bias + (c * s + s) + (c * c + c)
        total = 9 * self.in_channels * s + s + q * block + q * c * hd + hd + hd * p + p + 4 * hd + 4
        if uses_crf(self.variant):
            total += p * p
        return total


def init_params(cfg: GeneratorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-scaled Gaussian weights, zero biases."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name == "crf.mu":
            data = crf_mod.init_compatibility(cfg.num_labels, rng, cfg.mu_init)
        elif name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _check_inputs(image: Tensor, init_seg: Tensor, cfg: GeneratorConfig) -> None:
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"image must be N×{cfg.in_channels}×h×w, got {image.shape}")
    if init_seg.shape != (image.shape[0], cfg.num_labels) + image.shape[2:]:
        raise T.ShapeError(f"init_seg {init_seg.shape} does not match image {image.shape} with P={cfg.num_labels}")
    if image.shape[2:] != cfg.input_hw:
        raise T.ShapeError(f"spatial size {image.shape[2:]} != configured {cfg.input_hw}")


def block_forward(x: Tensor, seg: Tensor, params: dict[str, Tensor], b: int, bias_mode: str = "post"):
    """One dilated gated block; returns (next residual-stream input, skip output)."""
    pre = f"block{b}."
    d = 2**b
    c = params[pre + "filter.w"].shape[0]
    # filter and gate read the same input, so they run as one convolution
    w = T.concat([params[pre + "filter.w"], params[pre + "gate.w"]], axis=0)
    bias = T.concat([params[pre + "filter.b"], params[pre + "gate.b"]], axis=0)
    fg = T.conv2d(x, w, bias, pad=d, dilation=d)
    f, g = T.channel_slice(fg, 0, c), T.channel_slice(fg, c, 2 * c)
    if bias_mode == "post":
        a = T.add(T.gated_activation(f, g), T.conv2d(seg, params[pre + "bias.w"], params[pre + "bias.b"]))
    else:
        f = T.add(f, T.conv2d(seg, params[pre + "bias_filter.w"], params[pre + "bias_filter.b"]))
        g = T.add(g, T.conv2d(seg, params[pre + "bias_gate.w"], params[pre + "bias_gate.b"]))
        a = T.gated_activation(f, g)
    x = T.add(x, T.conv2d(a, params[pre + "residual.w"], params[pre + "residual.b"]))
    skip = T.relu(T.conv2d(a, params[pre + "skip.w"], params[pre + "skip.b"]))
    return x, skip


def potentials(image: Tensor, init_seg: Tensor, params: dict[str, Tensor], cfg: GeneratorConfig):
    """Returns (psi_u, k) as N×P×h×w and N×4×h×w tensors."""
    _check_inputs(image, init_seg, cfg)
    x = T.conv2d(image, params["stem.w"], params["stem.b"], pad=1)
    skips = []
    for b in range(cfg.num_blocks):
        x, skip = block_forward(x, init_seg, params, b, cfg.bias_mode)
        skips.append(skip)
    if not skips:
        raise T.ShapeError("input too small for a single block")
    feats = skips[0] if len(skips) == 1 else T.concat_channels(skips)
    hidden = T.relu(T.conv2d(feats, params["head.w"], params["head.b"]))
    psi_u = T.conv2d(hidden, params["unary.w"], params["unary.b"])
    k = T.exp(T.conv2d(hidden, params["kernel.w"], params["kernel.b"]))
    return psi_u, k


def forward(image: Tensor, init_seg: Tensor, params: dict[str, Tensor], cfg: GeneratorConfig) -> Tensor:
    """Label probabilities N×P×h×w for the configured variant.

    CRF variants run mean-field inference on (psi_u, k); the plain variants use
    softmax(-psi_u) directly and ignore k.
    """
    psi_u, k = potentials(image, init_seg, params, cfg)
    if uses_crf(cfg.variant):
        return crf_mod.mean_field_infer(psi_u, k, params["crf.mu"], cfg.crf_iterations, cfg.q_init)
    return T.softmax_channels(T.neg(psi_u))
