"""Time-series backbones hosting MoE / modulated-MoE layers.

Multi-modal (carry expert modulation):
    ``mome``           patch tokens -> stacked modulated GLU-MoE layers -> flatten -> head
    ``mmlinear``       whole-sequence linear experts, router on a sequence embedding
    ``mitransformer``  channel tokens, self-attention + modulated MoE blocks

Uni-modal:
    ``dlinear_moe``       seasonal/trend split, linear-expert MoE per branch
    ``tsmixer_moe``       MoE time mixing, dense channel mixing
    ``itransformer_moe``  channel tokens, self-attention + MoE blocks

``use_moe=False`` gives the plain (non-MoE) backbone with the same layout.
Forecast models subtract the last observed value per channel and add it
back to the output when ``instance_norm`` is on.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, FormatError, InsufficientDataError
from .modulation import EilmModulator, MoMELayer, QueryPool, RouterModulator
from .moe_core import GluExpert, LinearExpert, MoELayer, Router, RoutingTrace
from .numerics import DTYPE, Linear, Module, Tensor, layer_norm, matmul

KINDS = ("mome", "mmlinear", "mitransformer", "dlinear_moe", "tsmixer_moe", "itransformer_moe")
MULTIMODAL_KINDS = ("mome", "mmlinear", "mitransformer")
CHANNEL_KINDS = ("mitransformer", "dlinear_moe", "tsmixer_moe", "itransformer_moe")


@dataclass
class BackboneConfig:
    kind: str = "mome"
    seq_len: int = 32
    channels: int = 1
    horizon: int = 1
    task: str = "forecast"
    n_classes: int = 3
    layers: int = 3
    d: int = 32
    d_hidden: int = 64
    n_experts: int = 4
    top_k: int = 2
    patch_len: int = 8
    stride: Optional[int] = None
    ma_kernel: int = 5
    heads: int = 4
    dropout: float = 0.1
    ctx_tokens: int = 3
    dprime: int = 64
    router_activation: str = "softmax"
    use_moe: bool = True
    eilm: bool = True
    router_mod: bool = True
    residual_scale: bool = True
    instance_norm: Optional[bool] = None
    aux_balance_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def out_dim(self) -> int:
        return self.horizon if self.task == "forecast" else self.n_classes

    @property
    def patch_stride(self) -> int:
        return self.patch_len if self.stride is None else self.stride

    @property
    def n_patches(self) -> int:
        return (self.seq_len - self.patch_len) // self.patch_stride + 1

    @property
    def multimodal(self) -> bool:
        return self.kind in MULTIMODAL_KINDS and (self.eilm or self.router_mod)

    @property
    def use_instance_norm(self) -> bool:
        return self.task == "forecast" if self.instance_norm is None else bool(self.instance_norm)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.task not in ("forecast", "trend"):
            raise ConfigError(f"task must be 'forecast' or 'trend', got {self.task!r}")
        for name in ("seq_len", "channels", "horizon", "layers", "d", "d_hidden", "n_experts",
                     "patch_len", "heads", "ctx_tokens", "dprime"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.task == "trend" and self.n_classes < 2:
            raise ConfigError("trend task needs n_classes >= 2")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"K must satisfy 1 <= K <= E, got K={self.top_k}, E={self.n_experts}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.kind == "mome" and self.seq_len < self.patch_len:
            raise ConfigError(f"seq_len {self.seq_len} shorter than patch_len {self.patch_len}")
        if self.kind in ("mitransformer", "itransformer_moe") and self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.kind == "dlinear_moe" and (self.ma_kernel % 2 == 0 or self.ma_kernel > self.seq_len):
            raise ConfigError(f"ma_kernel must be odd and <= seq_len, got {self.ma_kernel}")
        if self.kind in ("mome", "mmlinear") and self.channels != 1:
            raise ConfigError(f"{self.kind} is univariate; channels must be 1")
        if self.router_activation not in ("softmax", "sigmoid", "identity"):
            raise ConfigError(f"unknown router activation {self.router_activation!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# -- patching and decomposition ----------------------------------------------

@dataclass
class PatchConfig:
    patch_len: int
    stride: int
    embed: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.patch_len < 1 or self.stride < 1:
            raise ConfigError("patch_len and stride must be >= 1")


def patch_windows(x: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """(…, T) -> (…, N, L) with N = floor((T - L) / stride) + 1."""
    x = np.asarray(x, dtype=DTYPE)
    t = x.shape[-1]
    if t < patch_len:
        raise InsufficientDataError(f"series length {t} is shorter than patch length {patch_len}")
    n = (t - patch_len) // stride + 1
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(patch_len)[None, :]
    return x[..., idx]


def patchify(x, cfg: PatchConfig) -> np.ndarray:
    """Patches of a single series embedded to ``d`` dims: (N, d)."""
    patches = patch_windows(np.asarray(x, dtype=DTYPE).reshape(-1), cfg.patch_len, cfg.stride)
    embed = np.asarray(cfg.embed, dtype=DTYPE)
    if embed.shape[1] != cfg.patch_len:
        raise DimensionError(f"embedding expects patch length {embed.shape[1]}, got {cfg.patch_len}")
    return patches @ embed.T


def moving_average_decompose(x, k: int):
    """Seasonal/trend split with a centred, edge-replicated moving average.

    ``S + Tr == x`` holds bitwise whenever some representable pair next to
    the moving average achieves it (always for fixed-point data on a common
    grid); the trend is moved by at most a few ulps to get there. Otherwise,
    e.g. a tiny value next to large neighbours with finer bits than
    ``ulp(Tr)``, no such pair exists and the sum is off by one rounding.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=DTYPE).reshape(-1))
    if k < 1 or k % 2 == 0 or k > x.size:
        raise ConfigError(f"moving-average kernel must be odd and <= {x.size}, got {k}")
    base = kernels.moving_average(x, int(k))
    seasonal = x - base
    trend = x - seasonal
    bad = seasonal + trend != x
    for _ in range(4):
        if not bad.any():
            break
        direction = np.where(seasonal[bad] + trend[bad] < x[bad], np.inf, -np.inf)
        trend[bad] = np.nextafter(trend[bad], direction)
        seasonal[bad] = x[bad] - trend[bad]
        bad = seasonal + trend != x
    if bad.any():
        trend[bad] = base[bad]
        seasonal[bad] = x[bad] - base[bad]
    return seasonal, trend


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=DTYPE)[:, None]
    i = np.arange(d, dtype=DTYPE)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- model base ---------------------------------------------------------------

class Backbone(Module):
    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self._rng_backbone = np.random.default_rng(seeds[0])
        self._rng_mod = np.random.default_rng(seeds[1])
        self._drop_seed = seeds[2]
        self._drop_rng = np.random.default_rng(seeds[2])

    def reset_dropout(self, seed: Optional[int] = None) -> None:
        self._drop_rng = np.random.default_rng(self._drop_seed if seed is None else seed)

    def _dropout(self, t: Tensor) -> Tensor:
        p = self.cfg.dropout
        if not self.training or p <= 0.0:
            return t
        keep = (self._drop_rng.random(t.shape) >= p) / (1.0 - p)
        return t * keep

    def _build_modulators(self, d_out: int):
        cfg = self.cfg
        self.qp = None
        self.modulated = cfg.multimodal
        if self.modulated:
            self.qp = QueryPool(cfg.ctx_tokens, cfg.d, cfg.dprime, self._rng_mod)

    def _modulated_block(self, moe: MoELayer, d_out: int) -> MoMELayer:
        cfg = self.cfg
        rm = RouterModulator(cfg.n_experts, cfg.d) if self.modulated and cfg.router_mod else None
        em = (EilmModulator(cfg.n_experts, cfg.d, d_out, residual_scale=cfg.residual_scale)
              if self.modulated and cfg.eilm else None)
        return MoMELayer(moe, rm, em)

    def _context(self, contexts):
        if not getattr(self, "modulated", False) or contexts is None:
            return None
        _, z, _ = self.qp(contexts)
        return z

    def _input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=DTYPE)
        cfg = self.cfg
        if cfg.kind in CHANNEL_KINDS:
            if x.ndim == 2:
                x = x[:, :, None]
            if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.channels:
                raise DimensionError(f"expected input (B, {cfg.seq_len}, {cfg.channels}), got {x.shape}")
        else:
            if x.ndim == 3 and x.shape[2] == 1:
                x = x[:, :, 0]
            if x.ndim != 2 or x.shape[1] != cfg.seq_len:
                raise DimensionError(f"expected input (B, {cfg.seq_len}), got {x.shape}")
        return x

    def _norm(self, x: np.ndarray):
        if self.cfg.use_instance_norm:
            last = x[:, -1:].copy()
            return x - last, last
        return x, None

    def __call__(self, x, contexts=None, trace: Optional[RoutingTrace] = None, dense: bool = False) -> Tensor:
        raise NotImplementedError

    def predict(self, x, contexts=None, trace=None, dense: bool = False) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            out = self(x, contexts, trace=trace, dense=dense).data
        finally:
            self.train(was)
        if self.cfg.task == "forecast" and out.ndim == 3 and out.shape[2] == 1:
            out = out[:, :, 0]
        return out

    def dense_state(self) -> dict:
        """State dict for the ``use_moe=False`` sibling when ``n_experts == 1``."""
        if self.cfg.n_experts != 1 or not self.cfg.use_moe:
            raise ConfigError("dense_state needs a single-expert MoE model")
        out = {}
        for name, p in self.named_parameters():
            if "router" in name or "eilm" in name or name.startswith("qp."):
                continue
            out[name.replace(".moe.experts.0.", ".").replace(".experts.0.", ".")] = p.data.copy()
        return out


def _moe(cfg: BackboneConfig, d_in: int, rng, layer_index: int, experts=None, router_dim=None) -> MoELayer:
    router = Router(router_dim or d_in, cfg.n_experts, rng, cfg.router_activation)
    if experts is None:
        experts = [GluExpert(d_in, cfg.d_hidden, rng) for _ in range(cfg.n_experts)]
    return MoELayer(router, experts, cfg.top_k, aux_balance_weight=cfg.aux_balance_weight,
                    layer_index=layer_index)


class MoMEModel(Backbone):
    """Patch tokens -> stacked (modulated) GLU-MoE layers with residuals -> flat head."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        rng = self._rng_backbone
        self.embed = Linear(cfg.patch_len, cfg.d, rng)
        self._build_modulators(cfg.d)
        blocks = []
        for i in range(cfg.layers):
            if cfg.use_moe:
                blocks.append(self._modulated_block(_moe(cfg, cfg.d, rng, i), cfg.d))
            else:
                blocks.append(GluExpert(cfg.d, cfg.d_hidden, rng))
        self.blocks = blocks
        self.head = Linear(cfg.n_patches * cfg.d, cfg.out_dim, rng)

    def __call__(self, x, contexts=None, trace=None, dense=False) -> Tensor:
        cfg = self.cfg
        x = self._input(x)
        x, last = self._norm(x)
        bsz = x.shape[0]
        patches = patch_windows(x, cfg.patch_len, cfg.patch_stride)
        n = patches.shape[1]
        h = self.embed(Tensor(patches.reshape(bsz * n, cfg.patch_len)))
        z = self._context(contexts)
        owners = np.repeat(np.arange(bsz), n)
        for block in self.blocks:
            if isinstance(block, MoMELayer):
                update = block(h, z, owners, trace=trace, dense=dense)
            else:
                update = block(h)
            h = h + self._dropout(update)
        out = self.head(h.reshape(bsz, n * cfg.d))
        return out + last if last is not None else out


class MMLinearModel(Backbone):
    """Linear experts over the whole look-back window."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        rng = self._rng_backbone
        self._build_modulators(cfg.out_dim)
        if cfg.use_moe:
            self.embed = Linear(cfg.seq_len, cfg.d, rng)
            experts = [LinearExpert(cfg.seq_len, cfg.out_dim, rng) for _ in range(cfg.n_experts)]
            moe = _moe(cfg, cfg.seq_len, rng, 0, experts=experts, router_dim=cfg.d)
            self.blocks = [self._modulated_block(moe, cfg.out_dim)]
        else:
            self.blocks = [LinearExpert(cfg.seq_len, cfg.out_dim, rng)]

    def __call__(self, x, contexts=None, trace=None, dense=False) -> Tensor:
        x = self._input(x)
        x, last = self._norm(x)
        xt = Tensor(x)
        block = self.blocks[0]
        if isinstance(block, MoMELayer):
            z = self._context(contexts)
            out = block(xt, z, np.arange(x.shape[0]), trace=trace, dense=dense,
                        router_input=self.embed(xt))
        else:
            out = block(xt)
        return out + last if last is not None else out


class _Attention(Module):
    def __init__(self, d: int, heads: int, rng):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, h: Tensor) -> Tensor:
        bsz, c, d = h.shape
        nh = self.heads
        dh = d // nh

        def split(t):
            return t.reshape(bsz, c, nh, dh).transpose(0, 2, 1, 3).reshape(bsz * nh, c, dh)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = (matmul(q, k.swap_last()) * (1.0 / math.sqrt(dh))).softmax(axis=-1)
        ctx = matmul(att, v).reshape(bsz, nh, c, dh).transpose(0, 2, 1, 3).reshape(bsz, c, d)
        return self.o(ctx)


class InvertedTransformer(Backbone):
    """Channels as tokens; attention over channels then an MoE (or FFN) block."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        rng = self._rng_backbone
        self.embed = Linear(cfg.seq_len, cfg.d, rng)
        self._pos = sinusoidal_positions(cfg.channels, cfg.d)
        self._build_modulators(cfg.d)
        self.attn = [_Attention(cfg.d, cfg.heads, rng) for _ in range(cfg.layers)]
        blocks = []
        for i in range(cfg.layers):
            if cfg.use_moe:
                blocks.append(self._modulated_block(_moe(cfg, cfg.d, rng, i), cfg.d))
            else:
                blocks.append(GluExpert(cfg.d, cfg.d_hidden, rng))
        self.blocks = blocks
        self.head = Linear(cfg.d, cfg.out_dim, rng)

    def __call__(self, x, contexts=None, trace=None, dense=False) -> Tensor:
        cfg = self.cfg
        x = self._input(x)
        x, last = self._norm(x)
        bsz, t, c = x.shape
        tokens = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)))
        h = self.embed(tokens) + self._pos
        z = self._context(contexts)
        owners = np.repeat(np.arange(bsz), c)
        for attn, block in zip(self.attn, self.blocks):
            h = h + self._dropout(attn(h))
            flat = h.reshape(bsz * c, cfg.d)
            if isinstance(block, MoMELayer):
                update = block(flat, z, owners, trace=trace, dense=dense)
            else:
                update = block(flat)
            h = (flat + self._dropout(update)).reshape(bsz, c, cfg.d)
        out = self.head(h)
        if cfg.task == "trend":
            return out.mean(axis=1)
        out = out.transpose(0, 2, 1)
        return out + last if last is not None else out


class DLinearMoE(Backbone):
    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        rng = self._rng_backbone
        self.modulated = False
        if cfg.use_moe:
            ex_s = [LinearExpert(cfg.seq_len, cfg.out_dim, rng) for _ in range(cfg.n_experts)]
            self.seasonal = _moe(cfg, cfg.seq_len, rng, 0, experts=ex_s)
            ex_t = [LinearExpert(cfg.seq_len, cfg.out_dim, rng) for _ in range(cfg.n_experts)]
            self.trend = _moe(cfg, cfg.seq_len, rng, 1, experts=ex_t)
        else:
            self.seasonal = LinearExpert(cfg.seq_len, cfg.out_dim, rng)
            self.trend = LinearExpert(cfg.seq_len, cfg.out_dim, rng)

    def __call__(self, x, contexts=None, trace=None, dense=False) -> Tensor:
        cfg = self.cfg
        x = self._input(x)
        x, last = self._norm(x)
        bsz, t, c = x.shape
        series = np.ascontiguousarray(x.transpose(0, 2, 1).reshape(bsz * c, t))
        seas = np.empty_like(series)
        trnd = np.empty_like(series)
        for r in range(series.shape[0]):
            seas[r], trnd[r] = moving_average_decompose(series[r], cfg.ma_kernel)
        if cfg.use_moe:
            y = self.seasonal(Tensor(seas), dense=dense, trace=trace) + self.trend(Tensor(trnd), dense=dense, trace=trace)
        else:
            y = self.seasonal(Tensor(seas)) + self.trend(Tensor(trnd))
        y = y.reshape(bsz, c, cfg.out_dim)
        if cfg.task == "trend":
            return y.mean(axis=1)
        y = y.transpose(0, 2, 1)
        return y + last if last is not None else y


class _ChannelMLP(Module):
    def __init__(self, c: int, hidden: int, rng):
        self.fc1 = Linear(c, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class _Norm(Module):
    """LayerNorm over the joint (time, channel) axes with elementwise affine."""

    def __init__(self, t: int, c: int):
        self.gain = Tensor.param(np.ones((t, c)))
        self.shift = Tensor.param(np.zeros((t, c)))

    def __call__(self, z: Tensor) -> Tensor:
        return layer_norm(z, axis=(1, 2)) * self.gain + self.shift


class TSMixerMoE(Backbone):
    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        rng = self._rng_backbone
        self.modulated = False
        t, c = cfg.seq_len, cfg.channels
        self.norm_time = [_Norm(t, c) for _ in range(cfg.layers)]
        self.norm_chan = [_Norm(t, c) for _ in range(cfg.layers)]
        blocks = []
        for i in range(cfg.layers):
            blocks.append(_moe(cfg, t, rng, i) if cfg.use_moe else GluExpert(t, cfg.d_hidden, rng))
        self.blocks = blocks
        self.channel = [_ChannelMLP(c, cfg.d_hidden, rng) for _ in range(cfg.layers)]
        self.head = Linear(t, cfg.out_dim, rng)

    def __call__(self, x, contexts=None, trace=None, dense=False) -> Tensor:
        cfg = self.cfg
        x = self._input(x)
        x, last = self._norm(x)
        bsz, t, c = x.shape
        z = Tensor(x)
        for nt, block, nc, mlp in zip(self.norm_time, self.blocks, self.norm_chan, self.channel):
            tokens = nt(z).transpose(0, 2, 1).reshape(bsz * c, t)
            if isinstance(block, MoELayer):
                u = block(tokens, dense=dense, trace=trace)
            else:
                u = block(tokens)
            z = z + self._dropout(u.reshape(bsz, c, t).transpose(0, 2, 1))
            v = mlp(nc(z).reshape(bsz * t, c)).reshape(bsz, t, c)
            z = z + self._dropout(v)
        y = self.head(z.transpose(0, 2, 1))
        if cfg.task == "trend":
            return y.mean(axis=1)
        y = y.transpose(0, 2, 1)
        return y + last if last is not None else y


_MODEL_CLASSES = {
    "mome": MoMEModel,
    "mmlinear": MMLinearModel,
    "mitransformer": InvertedTransformer,
    "itransformer_moe": InvertedTransformer,
    "dlinear_moe": DLinearMoE,
    "tsmixer_moe": TSMixerMoE,
}


def build_model(cfg) -> Backbone:
    if isinstance(cfg, dict):
        cfg = BackboneConfig.from_dict(cfg)
    if cfg.kind == "itransformer_moe" and (cfg.eilm or cfg.router_mod):
        # uni-modal by definition
        cfg = BackboneConfig.from_dict({**cfg.to_dict(), "eilm": False, "router_mod": False})
    if cfg.kind in ("dlinear_moe", "tsmixer_moe") and (cfg.eilm or cfg.router_mod):
        cfg = BackboneConfig.from_dict({**cfg.to_dict(), "eilm": False, "router_mod": False})
    return _MODEL_CLASSES[cfg.kind](cfg)


def dense_sibling(model: Backbone) -> Backbone:
    """Non-MoE backbone carrying the single expert's weights (requires E == 1)."""
    state = model.dense_state()
    cfg = BackboneConfig.from_dict({**model.cfg.to_dict(), "use_moe": False, "eilm": False,
                                    "router_mod": False})
    sibling = build_model(cfg)
    own = dict(sibling.named_parameters())
    missing = set(own) - set(state)
    if missing:
        raise ConfigError(f"cannot map parameters {sorted(missing)} onto the dense sibling")
    sibling.load_state_dict({k: state[k] for k in own})
    return sibling


# -- single-sample wrappers ---------------------------------------------------

def _ctx_list(ctx):
    if ctx is None:
        return None
    return [np.asarray(ctx, dtype=DTYPE)]


def mome_backbone_forward(x, ctx, model: MoMEModel) -> np.ndarray:
    """``ctx`` is the raw (M, d') hidden-state matrix of the sample's text, or None."""
    return model.predict(np.asarray(x, dtype=DTYPE)[None, :], _ctx_list(ctx))[0]


def mmlinear_forward(x, ctx, model: MMLinearModel) -> np.ndarray:
    return model.predict(np.asarray(x, dtype=DTYPE)[None, :], _ctx_list(ctx))[0]


def mitransformer_forward(x, ctx, model: InvertedTransformer) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    x = x[:, None] if x.ndim == 1 else x
    out = model.eval()(x[None], _ctx_list(ctx)).data[0]
    return out


def dlinear_moe_forward(x, model: DLinearMoE) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    x = x[:, None] if x.ndim == 1 else x
    return model.eval()(x[None]).data[0]


def tsmixer_moe_forward(x, model: TSMixerMoE) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    x = x[:, None] if x.ndim == 1 else x
    return model.eval()(x[None]).data[0]


def itransformer_moe_forward(x, model: InvertedTransformer) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    x = x[:, None] if x.ndim == 1 else x
    return model.eval()(x[None]).data[0]


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model: Backbone, path, extra: Optional[dict] = None) -> str:
    """Write ``path`` (JSON manifest) and ``path`` + ``.bin`` (little-endian f64)."""
    path = os.fspath(path)
    bin_path = path + ".bin" if not path.endswith(".json") else path[:-5] + ".bin"
    named = list(model.named_parameters())
    manifest = {
        "format": "mome-checkpoint",
        "version": 1,
        "config": model.cfg.to_dict(),
        "dtype": "<f8",
        "data_file": os.path.basename(bin_path),
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in named],
    }
    if extra:
        manifest["extra"] = extra
    with open(bin_path, "wb") as fh:
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return bin_path


def load_checkpoint(path) -> Backbone:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    if manifest.get("format") != "mome-checkpoint":
        raise FormatError(f"{path} is not a mome checkpoint manifest")
    model = build_model(BackboneConfig.from_dict(manifest["config"]))
    bin_path = os.path.join(os.path.dirname(path), manifest["data_file"])
    flat = np.fromfile(bin_path, dtype="<f8")
    state, offset = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise FormatError(f"checkpoint data truncated at tensor {entry['name']}")
        state[entry["name"]] = flat[offset:offset + size].reshape(shape).astype(DTYPE)
        offset += size
    if offset != flat.size:
        raise FormatError(f"checkpoint data has {flat.size - offset} trailing values")
    model.load_state_dict(state)
    return model
