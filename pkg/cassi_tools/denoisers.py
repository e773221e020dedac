"""
Priors for the denoising step of the unfolded solvers.

Every denoiser maps a batch of noisy sheared cubes (N x H x W' x bands) and a
per-sample noise cue beta (N x 1 x 1 x 1) to a batch of the same extents.
``SoftThreshold`` and ``TVDenoiser`` are analytic proximal operators with
threshold 1/(2 beta); ``CMFormer`` is the learnable U-Net of convolutional
attention blocks.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Optional

import numpy as np
from skimage.restoration import denoise_tv_chambolle

from .cassi_model import ShearedCube
from .config import CMFormerConfig
from .errors import DimensionError, DomainError
from .nn_core import (
    DEFAULT_DTYPE,
    Conv2d,
    ConvTranspose2d,
    DepthwiseConv2d,
    LayerNorm,
    Module,
    Tensor,
    add,
    concat,
    drop_path,
    gelu,
    mul,
)

log = logging.getLogger(__name__)


class Denoiser(Module, ABC):
    """D(v, beta) -> denoised v. Output extents always equal input extents."""

    name = "denoiser"
    # spatial extents the network can take without padding
    size_multiple = 1

    @abstractmethod
    def forward(self, v: Tensor, beta: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        ...

    def apply(self, v: ShearedCube, beta: float) -> ShearedCube:
        x = Tensor(v.data[None])
        b = Tensor(np.full((1, 1, 1, 1), beta, dtype=x.dtype))
        return ShearedCube(self.forward(x, b).data[0], v.shift_step)


def _threshold_from_beta(beta: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 0.5 / beta


# ----------------------------------------------------------------------------
# Analytic priors
# ----------------------------------------------------------------------------

def soft_threshold(v: ShearedCube, theta: float) -> ShearedCube:
    """sign(v) * max(|v| - theta, 0): the prox of theta * ||.||_1."""
    if theta < 0:
        raise DomainError(f"threshold must be >= 0, got {theta}")
    return ShearedCube(np.sign(v.data) * np.maximum(np.abs(v.data) - theta, 0.0), v.shift_step)


class SoftThreshold(Denoiser):
    name = "soft"

    def forward(self, v: Tensor, beta: Tensor, rng=None) -> Tensor:
        theta = _threshold_from_beta(beta.data)
        return Tensor((np.sign(v.data) * np.maximum(np.abs(v.data) - theta, 0.0)).astype(v.dtype))


def tv_denoise(v: ShearedCube, weight: float, iters: int) -> ShearedCube:
    """Per-band isotropic TV prox via Chambolle's dual projection."""
    if weight < 0:
        raise DomainError(f"TV weight must be >= 0, got {weight}")
    if iters < 1:
        raise DomainError(f"TV iterations must be >= 1, got {iters}")
    if weight == 0:
        return v
    out = denoise_tv_chambolle(v.data, weight=weight, max_num_iter=iters, channel_axis=-1)
    return ShearedCube(out.astype(v.data.dtype), v.shift_step)


def tv_objective(u: np.ndarray, f: np.ndarray, weight: float) -> float:
    """0.5 ||u - f||^2 + weight * sum of per-band isotropic forward-difference TV."""
    gx = np.diff(u, axis=0, append=u[-1:, :, :])
    gy = np.diff(u, axis=1, append=u[:, -1:, :])
    return float(0.5 * np.sum((u - f) ** 2) + weight * np.sum(np.sqrt(gx * gx + gy * gy)))


class TVDenoiser(Denoiser):
    name = "tv"

    def __init__(self, iters: int = 20):
        self.iters = iters

    def forward(self, v: Tensor, beta: Tensor, rng=None) -> Tensor:
        weights = _threshold_from_beta(beta.data).reshape(-1)
        out = np.stack([
            tv_denoise(ShearedCube(sample, 0), float(w), self.iters).data
            for sample, w in zip(v.data, weights)
        ])
        return Tensor(out.astype(v.dtype))


# ----------------------------------------------------------------------------
# CMFormer
# ----------------------------------------------------------------------------

class CMB(Module):
    """Convolutional modulation: Out = W3(DWConv(W1 X) * W2 X)."""

    def __init__(self, channels: int, kernel_size: int, *, rng, dtype=DEFAULT_DTYPE):
        self.w1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.dw = DepthwiseConv2d(channels, kernel_size, rng=rng, dtype=dtype)
        self.w2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.w3 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return cmb_forward(x, self)


def cmb_forward(x: Tensor, weights: CMB) -> Tensor:
    attention = weights.dw(weights.w1(x))
    value = weights.w2(x)
    return weights.w3(mul(attention, value))


class FFN(Module):
    """Expand, mix spatially, activate, project. ``variant`` selects the ablation form."""

    def __init__(self, channels: int, expansion: int, variant: str = "full", *, rng,
                 dtype=DEFAULT_DTYPE):
        hidden = channels * expansion
        self.variant = variant
        self.expand = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        if variant == "full":
            self.mix = DepthwiseConv2d(hidden, 3, rng=rng, dtype=dtype)
        elif variant == "pw-only":
            self.mix = Conv2d(hidden, hidden, 1, rng=rng, dtype=dtype)
        else:
            self.mix = None
        self.project = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ffn_forward(x, self)


def ffn_forward(x: Tensor, weights: FFN) -> Tensor:
    h = weights.expand(x)
    if weights.mix is not None:
        h = weights.mix(h)
    return weights.project(gelu(h))


class CAB(Module):
    """Pre-norm block: X + CMB(LN(X)), then Y + FFN(LN(Y)), each branch under drop-path."""

    def __init__(self, channels: int, config: CMFormerConfig, drop_rate: float, *, rng,
                 dtype=DEFAULT_DTYPE):
        self.drop_rate = drop_rate
        self.norm1 = LayerNorm(channels, dtype=dtype) if config.use_cmb else None
        self.cmb = CMB(channels, config.kernel_size, rng=rng, dtype=dtype) if config.use_cmb else None
        has_ffn = config.ffn_variant != "none"
        self.norm2 = LayerNorm(channels, dtype=dtype) if has_ffn else None
        self.ffn = FFN(channels, config.ffn_expansion, config.ffn_variant, rng=rng,
                       dtype=dtype) if has_ffn else None

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return cab_forward(x, self, self.drop_rate, self.training, rng)


def cab_forward(x: Tensor, block: CAB, rate: float, training: bool,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    if block.cmb is not None:
        x = add(x, drop_path(block.cmb(block.norm1(x)), rate, training, rng))
    if block.ffn is not None:
        x = add(x, drop_path(block.ffn(block.norm2(x)), rate, training, rng))
    return x


def _blocks(count: int, channels: int, config: CMFormerConfig, rate: float, rng, dtype) -> list:
    return [CAB(channels, config, rate, rng=rng, dtype=dtype) for _ in range(count)]


class CMFormer(Denoiser):
    """Three-level U-Net of CABs with a global residual to the input cube.

    With ``use_cab=False`` every level is an empty block list, leaving the
    convolutional skeleton.
    """

    name = "cmformer"
    size_multiple = 4

    def __init__(self, bands: int, config: Optional[CMFormerConfig] = None, *,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        config = config or CMFormerConfig()
        config.validate()
        self.config = config
        self.bands = bands
        c = config.channels
        n1, n2, n3 = config.blocks if config.use_cab else (0, 0, 0)
        cd, bd = config.cdpr, config.bdpr
        self.embed = Conv2d(bands + 1, c, 3, padding=1, rng=rng, dtype=dtype)
        self.enc1 = _blocks(n1, c, config, cd, rng, dtype)
        self.down1 = Conv2d(c, 2 * c, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.enc2 = _blocks(n2, 2 * c, config, cd, rng, dtype)
        self.down2 = Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bottleneck = _blocks(n3, 4 * c, config, bd, rng, dtype)
        self.up2 = ConvTranspose2d(4 * c, 2 * c, 2, stride=2, rng=rng, dtype=dtype)
        self.fuse2 = Conv2d(4 * c, 2 * c, 1, rng=rng, dtype=dtype)
        self.dec2 = _blocks(n2, 2 * c, config, cd, rng, dtype)
        self.up1 = ConvTranspose2d(2 * c, c, 2, stride=2, rng=rng, dtype=dtype)
        self.fuse1 = Conv2d(2 * c, c, 1, rng=rng, dtype=dtype)
        self.dec1 = _blocks(n1, c, config, cd, rng, dtype)
        self.head = Conv2d(c, bands, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, v: Tensor, beta: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return cmformer_forward(v, beta, self, self.training, rng)


def _run(blocks: list, x: Tensor, rng) -> Tensor:
    for block in blocks:
        x = block(x, rng)
    return x


def cmformer_forward(z: Tensor, beta: Tensor, net: CMFormer, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    n, h, w, bands = z.shape
    if bands != net.bands:
        raise DimensionError(f"CMFormer built for {net.bands} bands, got {bands}", axis="channels")
    for axis, extent in (("height", h), ("width", w)):
        if extent % 4:
            raise DimensionError(
                f"{axis} {extent} is not divisible by 4; pad by {(-extent) % 4} pixels", axis=axis
            )
    net.train(training)
    beta_map = mul(Tensor(np.ones((n, h, w, 1), dtype=z.dtype)), beta)
    x1 = _run(net.enc1, net.embed(concat([z, beta_map])), rng)
    x2 = _run(net.enc2, net.down1(x1), rng)
    x3 = _run(net.bottleneck, net.down2(x2), rng)
    y2 = _run(net.dec2, net.fuse2(concat([net.up2(x3), x2])), rng)
    y1 = _run(net.dec1, net.fuse1(concat([net.up1(y2), x1])), rng)
    return add(net.head(y1), z)
