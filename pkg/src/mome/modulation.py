"""Expert modulation: context distillation, routing shift and per-expert affine maps.

Text hidden states ``H_raw`` (M x d') are projected to the model width,
distilled by ``m`` learned queries with single-head cross-attention into
context tokens ``Z`` (m x d), and average-pooled into ``z``. The pooled
vector then

* shifts the (post-activation) routing scores by ``W_G z`` before Top-K, and
* gives each expert a scalar scale ``w_i . z`` (plus one in residual mode)
  and a bias ``W_i z``.

Every sample carries one context; all of its tokens share it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, EmptyContextError
from .moe_core import MoELayer, RoutingTrace, topk_mask
from .numerics import DTYPE, Module, Tensor, matmul


def orthonormal_rows(m: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if m > d:
        raise DimensionError(f"cannot build {m} orthonormal queries in dimension {d}")
    q, r = np.linalg.qr(rng.standard_normal((d, m)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q.T)


@dataclass
class ContextTokens:
    Z: np.ndarray
    z: np.ndarray
    attention: Optional[np.ndarray] = None


class QueryPool(Module):
    def __init__(self, m: int, d: int, dprime: int, rng: np.random.Generator):
        if m < 1:
            raise DimensionError("QueryPool needs at least one query")
        s = 1.0 / math.sqrt(d)
        sp = 1.0 / math.sqrt(dprime)
        self.Q = Tensor.param(orthonormal_rows(m, d, rng))
        self.W_Q = Tensor.param(rng.uniform(-s, s, (d, d)))
        self.W_K = Tensor.param(rng.uniform(-s, s, (d, d)))
        self.W_V = Tensor.param(rng.uniform(-s, s, (d, d)))
        self.W_proj = Tensor.param(rng.uniform(-sp, sp, (dprime, d)))

    @property
    def d(self) -> int:
        return self.Q.shape[1]

    @property
    def dprime(self) -> int:
        return self.W_proj.shape[0]

    def __call__(self, contexts: Sequence[np.ndarray]):
        """Distill a batch of ``(M_b, d')`` matrices.

        Returns ``(Z, z, attention)`` with ``Z`` of shape (B, m, d), ``z`` of
        shape (B, d) and the (B, m, sum M_b) attention weights; keys of other
        samples are masked out.
        """
        if len(contexts) == 0:
            raise EmptyContextError("no contexts given")
        mats = []
        for h in contexts:
            h = np.asarray(h, dtype=DTYPE)
            if h.ndim != 2 or h.shape[0] == 0:
                raise EmptyContextError(f"context must be a non-empty (M, d') matrix, got shape {h.shape}")
            if h.shape[1] != self.dprime:
                raise DimensionError(f"context width {h.shape[1]} != d' = {self.dprime}")
            mats.append(h)
        lengths = [h.shape[0] for h in mats]
        total = sum(lengths)
        bsz = len(mats)
        h_raw = Tensor(np.concatenate(mats, axis=0))
        h = matmul(h_raw, self.W_proj)
        keys = matmul(h, self.W_K)
        values = matmul(h, self.W_V)
        queries = matmul(self.Q, self.W_Q)
        logits = matmul(queries, keys.T) * (1.0 / math.sqrt(self.d))
        if bsz == 1:
            attn = logits.softmax(axis=-1).reshape(1, self.Q.shape[0], total)
        else:
            block = np.full((bsz, 1, total), -np.inf)
            start = 0
            for b, n in enumerate(lengths):
                block[b, 0, start:start + n] = 0.0
                start += n
            attn = (logits + Tensor(block)).softmax(axis=-1)
        Z = matmul(attn, values)
        z = Z.mean(axis=1)
        return Z, z, attn.data


class RouterModulator(Module):
    def __init__(self, n_experts: int, d: int, weight=None):
        self.W_G = Tensor.param(np.zeros((n_experts, d)) if weight is None else weight)

    def __call__(self, z: Tensor) -> Tensor:
        return matmul(z, self.W_G.T)


class EilmModulator(Module):
    """Per-expert scale head ``w_i`` (d) and bias head ``W_i`` (d_out x d)."""

    def __init__(self, n_experts: int, d: int, d_out: Optional[int] = None,
                 residual_scale: bool = True):
        d_out = d if d_out is None else d_out
        self.w = Tensor.param(np.zeros((n_experts, d)))
        self.W = Tensor.param(np.zeros((n_experts, d_out, d)))
        self.residual_scale = residual_scale

    @property
    def n_experts(self) -> int:
        return self.w.shape[0]

    def scale_bias(self, z: Tensor):
        """Return scale (B, E) and bias (B, E, d_out) for pooled contexts ``z`` (B, d)."""
        e, d_out, d = self.W.shape
        gamma = matmul(z, self.w.T)
        if self.residual_scale:
            gamma = gamma + 1.0
        beta = matmul(z, self.W.reshape(e * d_out, d).T).reshape(z.shape[0], e, d_out)
        return gamma, beta


class MoMELayer(Module):
    """MoE layer whose routing and experts are conditioned on a pooled context."""

    def __init__(self, moe: MoELayer, router_mod: Optional[RouterModulator] = None,
                 eilm: Optional[EilmModulator] = None):
        self.moe = moe
        self.router_mod = router_mod
        self.eilm = eilm

    def __call__(self, x: Tensor, z: Optional[Tensor] = None, token_sample: Optional[np.ndarray] = None,
                 trace: Optional[RoutingTrace] = None, dense: bool = False,
                 router_input: Optional[Tensor] = None) -> Tensor:
        moe = self.moe
        n = x.shape[0]
        scores = moe.router(x if router_input is None else router_input)
        post = scores
        hook = None
        if z is not None:
            if token_sample is None:
                if z.shape[0] != 1:
                    raise DimensionError("token_sample is required when contexts are batched")
                token_sample = np.zeros(n, dtype=np.intp)
            if self.router_mod is not None:
                post = scores + self.router_mod(z).take_rows(token_sample)
            if self.eilm is not None:
                gamma, beta = self.eilm.scale_bias(z)

                def hook(i, fi, rows):
                    owners = token_sample[rows]
                    return fi * gamma[:, i:i + 1].take_rows(owners) + beta[:, i, :].take_rows(owners)

        mask = np.ones(post.shape) if dense else topk_mask(post.data, moe.k)
        if trace is not None:
            pre_mask = mask if post is scores else (np.ones(scores.shape) if dense else topk_mask(scores.data, moe.k))
            trace.record(moe.layer_index, scores.data, post.data, pre_mask, mask)
            if moe.aux_balance_weight > 0:
                trace.aux_losses.append(moe.balance_loss(post, mask) * moe.aux_balance_weight)
        return moe.mix(x, post, mask=mask, expert_hook=hook)


# -- single-sample API --------------------------------------------------------

def distill_context(qp: QueryPool, h_raw) -> ContextTokens:
    h_raw = np.asarray(h_raw, dtype=DTYPE)
    if h_raw.ndim != 2 or h_raw.shape[0] == 0:
        raise EmptyContextError(f"context must have at least one token, got shape {h_raw.shape}")
    Z, z, attn = qp([h_raw])
    return ContextTokens(Z=Z.data[0], z=z.data[0], attention=attn[0])


def router_modulate(rm: RouterModulator, g, z) -> np.ndarray:
    g = np.asarray(g, dtype=DTYPE)
    z = np.asarray(z, dtype=DTYPE)
    if rm.W_G.shape != (g.size, z.size):
        raise DimensionError(f"W_G has shape {rm.W_G.shape}, scores {g.shape}, context {z.shape}")
    return g + rm.W_G.data @ z


def eilm_modulate(em: EilmModulator, i: int, f_out, z) -> np.ndarray:
    if not 0 <= i < em.n_experts:
        raise DimensionError(f"expert index {i} out of range for {em.n_experts} experts")
    f_out = np.asarray(f_out, dtype=DTYPE)
    z = np.asarray(z, dtype=DTYPE)
    gamma = float(em.w.data[i] @ z) + (1.0 if em.residual_scale else 0.0)
    beta = em.W.data[i] @ z
    return gamma * f_out + beta


def mome_layer_forward(layer: MoELayer, mods, x, ctx: Optional[ContextTokens]) -> np.ndarray:
    rm, em = mods if mods is not None else (None, None)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise DimensionError(f"expected a token vector, got shape {x.shape}")
    wrapped = MoMELayer(layer, rm, em)
    z = None if ctx is None else Tensor(np.asarray(ctx.z, dtype=DTYPE).reshape(1, -1))
    return wrapped(Tensor(x.reshape(1, -1)), z).data[0]
