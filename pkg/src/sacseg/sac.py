"""Spatially-adaptive convolution.

The adaptive weight ``W[m, n, p, q, i, j]`` is factored into a static kernel
``W_hat[m, n, i, j]`` and an attention map ``A[m, n, p, q, i, j]`` whose
collapsed dimensions broadcast. Names follow the retained dimensions:
SAC-S keeps only the spatial ones, SAC-IS adds input channels, SAC-SK adds
kernel taps, SAC-ISK keeps all three.

Attention layout (channels of the attention tensor, (N, C_att, H, W)):

* S:    1
* IS:   channel ``c``
* SK:   channel ``i * K + j``
* ISK:  channel ``c * K * K + i * K + j`` (the im2col order)
* OISK: channel ``m * I * K * K + c * K * K + i * K + j`` (oracle only)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, as_tensor, no_grad


@dataclass(frozen=True)
class SacVariant:
    adapt_O: bool = False
    adapt_I: bool = False
    adapt_S: bool = True
    adapt_K: bool = False

    @property
    def suffix(self) -> str:
        return "".join(letter for letter, on in zip("OISK", (self.adapt_O, self.adapt_I,
                                                            self.adapt_S, self.adapt_K)) if on)

    @property
    def name(self) -> str:
        return f"SAC-{self.suffix}"

    @classmethod
    def from_name(cls, name: str) -> "SacVariant":
        suffix = name.upper().removeprefix("SAC-")
        if not suffix or set(suffix) - set("OISK"):
            raise ValueError(f"unknown SAC variant {name!r}")
        return cls(*(letter in suffix for letter in "OISK"))

    def attention_channels(self, in_channels: int, k: int, out_channels: int = 1) -> int:
        c = 1
        if self.adapt_O:
            c *= out_channels
        if self.adapt_I:
            c *= in_channels
        if self.adapt_K:
            c *= k * k
        return c

    @property
    def scheduled(self) -> bool:
        """Whether the efficient multiply/unfold schedule covers this variant."""
        return self.adapt_S and not self.adapt_O


SAC_S = SacVariant.from_name("S")
SAC_IS = SacVariant.from_name("IS")
SAC_SK = SacVariant.from_name("SK")
SAC_ISK = SacVariant.from_name("ISK")
VARIANTS = {"S": SAC_S, "IS": SAC_IS, "SK": SAC_SK, "ISK": SAC_ISK}


class SacLayer(Module):
    """One SAC operator: attention conv, static kernel, optional follow conv, residual.

    ``between`` (if given) is applied to the static-kernel output before the
    follow conv; the network uses it to insert normalisation and activation.
    """

    def __init__(self, variant: SacVariant, in_channels: int, out_channels: int,
                 rng: np.random.Generator, k: int = 3, attention_kernel: int = 7,
                 coord_channels: int = 3, follow: bool = False, residual: bool = True,
                 bias: bool = True, between: Module | None = None):
        if residual and in_channels != out_channels:
            raise ValueError("residual SAC needs equal input and output channels")
        self.variant = variant
        self.in_channels, self.out_channels, self.k = in_channels, out_channels, k
        self.coord_channels = coord_channels
        self.attention_kernel = attention_kernel
        c_att = variant.attention_channels(in_channels, k, out_channels)
        # centred uniform fan-in init, zero bias: attention starts near 0.5
        self.attention = Conv2d(coord_channels, c_att, attention_kernel, rng, gain=1.0)
        self.main = Conv2d(in_channels, out_channels, k, rng, bias=bias)
        self.follow = Conv2d(out_channels, out_channels, 3, rng, bias=bias) if follow else None
        self.between = between
        self.residual = residual

    @property
    def attention_channels(self) -> int:
        return self.attention.out_channels

    def forward(self, x: Tensor, coord_map: Tensor, injected_attention=None) -> Tensor:
        return sac_forward(x, coord_map, self, injected_attention)

    def cost(self, hw):
        """Returns (params, MACs, hw, extra_params, extra_macs); extras are the attention conv."""
        p_att, m_att, _ = self.attention.cost(hw)
        p, m, out_hw = self.main.cost(hw)
        for extra in (self.between, self.follow):
            if extra is not None:
                pe, me, out_hw = extra.cost(out_hw)
                p, m = p + pe, m + me
        return p + p_att, m + m_att, out_hw, p_att, m_att


def attention_map(coord_map: Tensor, layer: SacLayer) -> Tensor:
    """sigmoid(conv_KattxKatt(coord_map)); values lie strictly in (0, 1)."""
    coord_map = as_tensor(coord_map)
    if coord_map.ndim != 4 or coord_map.shape[1] != layer.coord_channels:
        raise ShapeError(f"coordinate map must be (N, {layer.coord_channels}, H, W), "
                         f"got {coord_map.shape}")
    return ops.sigmoid(layer.attention(coord_map))


def _check_attention(a: Tensor, layer: SacLayer, x: Tensor) -> None:
    expected = layer.attention_channels
    if a.ndim != 4 or a.shape[1] != expected:
        raise ShapeError(f"{layer.variant.name} attention needs {expected} channels, got {a.shape}")
    if a.shape[2:] != x.shape[2:]:
        raise ShapeError(f"attention spatial size {a.shape[2:]} differs from input {x.shape[2:]}")


def _finish(y: Tensor, x: Tensor, layer: SacLayer) -> Tensor:
    if layer.between is not None:
        y = layer.between(y)
    if layer.follow is not None:
        y = layer.follow(y)
    if layer.residual:
        y = y + x
    return y


def sac_forward(x: Tensor, coord_map: Tensor | None, layer: SacLayer,
                injected_attention=None) -> Tensor:
    """Scheduled SAC: broadcast multiply (S/IS) or unfold + multiply + 1x1 conv (SK/ISK).

    The residual adds the original input, before attention and unfolding.
    """
    variant = layer.variant
    if not variant.scheduled:
        raise ValueError(f"{variant.name} has no efficient schedule; use sac_naive")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {layer.in_channels}")
    a = attention_map(coord_map, layer) if injected_attention is None else as_tensor(injected_attention)
    _check_attention(a, layer, x)
    k = layer.k
    if not variant.adapt_K:
        y = layer.main(ops.mul(x, a))
    else:
        cols = ops.im2col(x, k)
        if not variant.adapt_I:
            a = ops.tile_channels(a, layer.in_channels)
        w = ops.reshape(layer.main.weight, (layer.out_channels, layer.in_channels * k * k, 1, 1))
        y = ops.conv2d(ops.mul(cols, a), w, layer.main.bias)
    return _finish(y, x, layer)


def _expand_attention(a: np.ndarray, variant: SacVariant, o: int, i_ch: int, k: int) -> np.ndarray:
    """Reshape an attention tensor to (N, O|1, I|1, H, W, K|1, K|1)."""
    n, _, h, w = a.shape
    shape = (n, o if variant.adapt_O else 1, i_ch if variant.adapt_I else 1,
             k if variant.adapt_K else 1, k if variant.adapt_K else 1, h, w)
    return a.reshape(shape).transpose(0, 1, 2, 5, 6, 3, 4)


def adaptive_weight(layer: SacLayer, attention: np.ndarray, anchor: str = "source") -> np.ndarray:
    """Materialise the full per-pixel kernel ``W_hat * A`` as (N, O, I, H, W, K, K).

    Maps with kernel dimensions are read at the output pixel for every tap.
    Maps without them (S, IS) have no tap index, so the anchor decides which
    pixel a tap reads: ``"source"`` weights tap (i, j) of output (p, q) by the
    attention at the pixel it samples, (p + i - K//2, q + j - K//2), which is
    what multiplying the input before a plain convolution computes;
    ``"output"`` repeats the value at (p, q) across all taps.
    """
    variant = layer.variant
    o, i_ch, k = layer.out_channels, layer.in_channels, layer.k
    n, _, h, w = attention.shape
    att = _expand_attention(attention, variant, o, i_ch, k)
    if variant.adapt_S and not variant.adapt_K and anchor == "source":
        pad = k // 2
        base = np.pad(att[..., 0, 0], ((0, 0),) * 3 + ((pad, pad), (pad, pad)))
        taps = np.empty(att.shape[:3] + (h, w, k, k), dtype=attention.dtype)
        for i in range(k):
            for j in range(k):
                taps[..., i, j] = base[..., i:i + h, j:j + w]
        att = taps
    elif anchor not in ("source", "output"):
        raise ValueError(f"anchor must be 'source' or 'output', got {anchor!r}")
    w_hat = layer.main.weight.data[None, :, :, None, None]
    full = (n, o, i_ch) + ((h, w) if variant.adapt_S else (1, 1)) + (k, k)
    return np.array(np.broadcast_to(w_hat * att, full))


def sac_naive(x: Tensor, coord_map: Tensor | None, layer: SacLayer,
              injected_attention=None, anchor: str = "source") -> Tensor:
    """Oracle: materialise the per-pixel weight and evaluate the adaptive sum directly.

    Loops over every output pixel; intended for small shapes. Supports all
    variants, including output-channel adaptivity and SE-style (no S) maps.
    """
    variant = layer.variant
    with no_grad():
        if injected_attention is None:
            a = attention_map(coord_map, layer)
        else:
            a = as_tensor(injected_attention)
        if a.shape[1] != layer.attention_channels:
            raise ShapeError(f"{variant.name} attention needs {layer.attention_channels} "
                             f"channels, got {a.shape}")
        if variant.adapt_S and a.shape[2:] != x.shape[2:]:
            raise ShapeError(f"attention spatial size {a.shape[2:]} differs from input {x.shape[2:]}")
        xd = x.data
        n, i_ch, h, w = xd.shape
        o, k = layer.out_channels, layer.k
        weight = adaptive_weight(layer, a.data, anchor)
        pad = k // 2
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, o, h, w), dtype=xd.dtype)
        for b in range(n):
            wb = weight[b if weight.shape[0] > 1 else 0]
            for p in range(h):
                for q in range(w):
                    w_pq = wb[:, :, p, q] if variant.adapt_S else wb[:, :, 0, 0]
                    window = xp[b, :, p:p + k, q:q + k]
                    out[b, :, p, q] = np.einsum("mnij,nij->m", w_pq, window)
        if layer.main.bias is not None:
            out += layer.main.bias.data.reshape(1, o, 1, 1)
        return _finish(Tensor(out), x, layer)


# -- prior-work reductions ----------------------------------------------------

@dataclass
class BaselineParams:
    """Weights for one prior-work operator; ``conv`` is the static kernel."""

    conv: Conv2d
    fc1: Conv2d | None = None       # SE / CBAM / CAM squeeze (1x1)
    fc2: Conv2d | None = None       # SE / CBAM / CAM excite (1x1)
    spatial: Conv2d | None = None   # CBAM 2 -> 1 spatial-attention conv
    pool_kernel: int = 7            # CAM max-pool window


def make_baseline(kind: str, channels: int, out_channels: int, rng: np.random.Generator,
                  k: int = 3, reduction: int = 2) -> BaselineParams:
    kind = kind.upper()
    hidden = max(1, channels // reduction)
    conv = Conv2d(channels, out_channels, k, rng)
    if kind == "PAC":
        return BaselineParams(conv)
    fc1 = Conv2d(channels, hidden, 1, rng)
    fc2 = Conv2d(hidden, channels, 1, rng, gain=1.0)
    if kind in ("SE", "CAM"):
        return BaselineParams(conv, fc1, fc2)
    if kind == "CBAM":
        return BaselineParams(conv, fc1, fc2, spatial=Conv2d(2, 1, 7, rng, gain=1.0))
    raise ValueError(f"unknown baseline kind {kind!r}")


def _excite(params: BaselineParams, s: Tensor) -> Tensor:
    return params.fc2(ops.relu(params.fc1(s)))


def baseline_attention(x: Tensor, kind: str, params: BaselineParams,
                       coord_map: Tensor | None = None, k: int | None = None):
    """Attention tensor(s) a prior-work operator applies before its convolution.

    SE -> (N, I, 1, 1); CAM -> (N, I, H, W); PAC -> (N, K*K, H, W);
    CBAM -> (channel (N, I, 1, 1), spatial (N, 1, H, W)).
    """
    kind = kind.upper()
    if kind == "SE":
        return ops.sigmoid(_excite(params, ops.pool(x, "global_avg")))
    if kind == "CAM":
        return ops.sigmoid(_excite(params, ops.max_pool(x, params.pool_kernel)))
    if kind == "CBAM":
        avg = _excite(params, ops.pool(x, "global_avg"))
        mx = _excite(params, ops.amax(ops.amax(x, 3, keepdims=True), 2, keepdims=True))
        ch = ops.sigmoid(avg + mx)
        x1 = ops.mul(x, ch)
        desc = ops.concat([ops.mean(x1, axis=1, keepdims=True), ops.amax(x1, 1, keepdims=True)], 1)
        return ch, ops.sigmoid(params.spatial(desc))
    if kind == "PAC":
        if coord_map is None:
            raise ValueError("PAC needs guidance features (the coordinate map)")
        k = params.conv.k if k is None else k
        g = as_tensor(coord_map)
        n, c, h, w = g.shape
        neigh = ops.reshape(ops.im2col(g, k), (n, c, k * k, h, w))
        diff = ops.sub(neigh, ops.reshape(g, (n, c, 1, h, w)))
        sq = ops.sum(ops.square(diff), axis=1)
        return ops.exp(ops.mul(sq, -0.5))
    raise ValueError(f"unknown baseline kind {kind!r}")


def baseline_forward(x: Tensor, kind: str, params: BaselineParams,
                     coord_map: Tensor | None = None) -> Tensor:
    kind = kind.upper()
    if kind in ("SE", "CAM"):
        return params.conv(ops.mul(x, baseline_attention(x, kind, params)))
    if kind == "CBAM":
        ch, sp = baseline_attention(x, kind, params)
        return params.conv(ops.mul(ops.mul(x, ch), sp))
    if kind == "PAC":
        a = baseline_attention(x, kind, params, coord_map)
        conv = params.conv
        k, i_ch, o = conv.k, conv.in_channels, conv.out_channels
        cols = ops.im2col(x, k)
        w = ops.reshape(conv.weight, (o, i_ch * k * k, 1, 1))
        return ops.conv2d_direct(ops.mul(cols, ops.tile_channels(a, i_ch)), w, conv.bias)
    raise ValueError(f"unknown baseline kind {kind!r}")


def as_sac_layer(params: BaselineParams, variant: SacVariant, rng: np.random.Generator) -> SacLayer:
    """A non-residual SacLayer sharing ``params.conv`` as its static kernel."""
    conv = params.conv
    layer = SacLayer(variant, conv.in_channels, conv.out_channels, rng, k=conv.k, residual=False)
    layer.main = conv
    return layer

