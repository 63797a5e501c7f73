import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mome.errors import DimensionError, EmptyContextError
from mome.modulation import (ContextTokens, EilmModulator, MoMELayer, QueryPool, RouterModulator,
                             distill_context, eilm_modulate, mome_layer_forward, orthonormal_rows,
                             router_modulate)
from mome.moe_core import GluExpert, MoELayer, Router, glu_expert_forward, moe_forward, route, topk_mask
from mome.numerics import Tensor, grad_check


def randomize(mod, rng, scale=0.3):
    for p in mod.parameters():
        p.data = rng.standard_normal(p.shape) * scale


def brute_mome(layer, rm, em, x, z):
    """Route, shift, select and modulate term by term."""
    g = route(layer.router, x)
    if rm is not None:
        g = g + rm.W_G.data @ z
    sel = sorted(range(g.size), key=lambda i: (-g[i], i))[:layer.k]
    out = 0.0
    for i in sel:
        f = glu_expert_forward(layer.experts[i], x)
        if em is not None:
            gamma = em.w.data[i] @ z + (1.0 if em.residual_scale else 0.0)
            f = gamma * f + em.W.data[i] @ z
        out = out + g[i] * f
    return out


def test_query_init_orthonormal(rng):
    q = QueryPool(3, 8, 5, rng).Q.data
    np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-9)
    with pytest.raises(DimensionError):
        orthonormal_rows(5, 3, rng)


def test_distill_examples(rng):
    qp = QueryPool(3, 6, 4, rng)
    h = rng.standard_normal((1, 4))
    ctx = distill_context(qp, h)
    assert np.all(ctx.attention == 1.0)
    row = h @ qp.W_proj.data @ qp.W_V.data
    np.testing.assert_allclose(ctx.Z, np.repeat(row, 3, axis=0), atol=1e-14)
    zero = distill_context(qp, np.zeros((4, 4)))
    assert np.array_equal(zero.Z, np.zeros((3, 6))) and np.array_equal(zero.z, np.zeros(6))
    ctx = distill_context(qp, rng.standard_normal((5, 4)))
    assert ctx.Z.shape == (3, 6)
    assert np.all(np.abs(ctx.attention.sum(axis=1) - 1) <= 1e-12)
    np.testing.assert_allclose(ctx.z, ctx.Z.mean(axis=0), atol=0)
    with pytest.raises(EmptyContextError):
        distill_context(qp, np.zeros((0, 4)))
    with pytest.raises(DimensionError):
        distill_context(qp, np.zeros((2, 5)))


def test_distill_oracle(rng):
    qp = QueryPool(2, 5, 3, rng)
    h_raw = rng.standard_normal((4, 3))
    h = h_raw @ qp.W_proj.data
    logits = (qp.Q.data @ qp.W_Q.data) @ (h @ qp.W_K.data).T / math.sqrt(5)
    a = np.exp(logits - logits.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(distill_context(qp, h_raw).Z, a @ h @ qp.W_V.data, atol=1e-13)


def test_batched_distill_matches_per_sample(rng):
    qp = QueryPool(3, 6, 4, rng)
    ctxs = [rng.standard_normal((m, 4)) for m in (1, 5, 2)]
    Z, z, attn = qp(ctxs)
    for b, c in enumerate(ctxs):
        single = distill_context(qp, c)
        np.testing.assert_allclose(Z.data[b], single.Z, atol=1e-13)
        np.testing.assert_allclose(z.data[b], single.z, atol=1e-13)
    assert attn[0, :, 1:].max() == 0.0


def test_router_modulate_examples(rng):
    g = np.array([0.6, 0.4])
    z = rng.standard_normal(3)
    assert np.array_equal(router_modulate(RouterModulator(2, 3), g, z), g)
    rm = RouterModulator(2, 3, weight=rng.standard_normal((2, 3)))
    assert np.array_equal(router_modulate(rm, g, np.zeros(3)), g)
    flip = RouterModulator(2, 1, weight=np.array([[-0.3], [0.3]]))
    shifted = router_modulate(flip, g, np.array([1.0]))
    np.testing.assert_allclose(shifted, [0.3, 0.7], atol=1e-15)
    assert topk_mask(g, 1).tolist() == [1, 0] and topk_mask(shifted, 1).tolist() == [0, 1]


def test_eilm_examples(rng):
    f = rng.standard_normal(4)
    z = rng.standard_normal(4)
    em = EilmModulator(3, 4)
    assert np.array_equal(eilm_modulate(em, 1, f, z), f)
    lit = EilmModulator(3, 4, residual_scale=False)
    lit.W.data = rng.standard_normal((3, 4, 4))
    np.testing.assert_allclose(eilm_modulate(lit, 2, f, z), lit.W.data[2] @ z, atol=0)
    np.testing.assert_allclose(eilm_modulate(lit, 2, 100 * f, z), lit.W.data[2] @ z, atol=0)
    dbl = EilmModulator(1, 1, residual_scale=False)
    dbl.w.data = np.array([[2.0]])
    np.testing.assert_allclose(eilm_modulate(dbl, 0, f[:1], [1.0]), 2 * f[:1], atol=0)
    with pytest.raises(DimensionError):
        eilm_modulate(em, 3, f, z)


@given(st.integers(0, 10_000))
def test_zero_modulation_reduces_to_moe(seed):
    r = np.random.default_rng(seed)
    layer = MoELayer.glu(5, 6, 4, 2, r)
    x = r.standard_normal(5)
    ctx = ContextTokens(Z=r.standard_normal((3, 5)), z=r.standard_normal(5))
    out = mome_layer_forward(layer, (RouterModulator(4, 5), EilmModulator(4, 5)), x, ctx)
    assert np.max(np.abs(out - moe_forward(layer, x))) <= 1e-12


def test_flipped_routing_uses_second_expert(rng):
    ex = [GluExpert(2, 3, rng) for _ in range(2)]
    layer = MoELayer(Router(2, 2, activation="identity", weight=np.array([[0.6, 0.0], [0.4, 0.0]])), ex, 1)
    x = np.array([1.0, 0.5])
    rm = RouterModulator(2, 1, weight=np.array([[-0.3], [0.3]]))
    em = EilmModulator(2, 1, d_out=2)
    em.w.data = np.array([[0.0], [0.5]])
    em.W.data = rng.standard_normal((2, 2, 1))
    ctx = ContextTokens(Z=np.ones((1, 1)), z=np.ones(1))
    out = mome_layer_forward(layer, (rm, em), x, ctx)
    f2 = glu_expert_forward(ex[1], x)
    np.testing.assert_allclose(out, 0.7 * (1.5 * f2 + em.W.data[1] @ np.ones(1)), atol=1e-14)


@pytest.mark.parametrize("residual", [True, False])
def test_mome_matches_brute_force(residual):
    for seed in range(30):
        r = np.random.default_rng(seed)
        layer = MoELayer.glu(5, 6, 4, 2, r)
        rm, em = RouterModulator(4, 5), EilmModulator(4, 5, residual_scale=residual)
        randomize(rm, r)
        randomize(em, r)
        x, z = r.standard_normal(5), r.standard_normal(5)
        out = mome_layer_forward(layer, (rm, em), x, ContextTokens(Z=z[None], z=z))
        np.testing.assert_allclose(out, brute_mome(layer, rm, em, x, z), atol=1e-13)


def test_batched_layer_uses_owner_context(rng):
    layer = MoMELayer(MoELayer.glu(4, 5, 3, 2, rng), RouterModulator(3, 4), EilmModulator(3, 4))
    randomize(layer.router_mod, rng)
    randomize(layer.eilm, rng)
    x = rng.standard_normal((6, 4))
    z = rng.standard_normal((2, 4))
    owners = np.array([0, 0, 0, 1, 1, 1])
    out = layer(Tensor(x), Tensor(z), owners).data
    for t in range(6):
        ref = brute_mome(layer.moe, layer.router_mod, layer.eilm, x[t], z[owners[t]])
        np.testing.assert_allclose(out[t], ref, atol=1e-13)


def test_modulation_gradients(rng):
    qp = QueryPool(2, 4, 3, rng)
    layer = MoMELayer(MoELayer.glu(4, 5, 3, 2, rng), RouterModulator(3, 4), EilmModulator(3, 4))
    randomize(layer.router_mod, rng)
    randomize(layer.eilm, rng)
    x = Tensor(rng.standard_normal((5, 4)))
    ctxs = [rng.standard_normal((3, 3)), rng.standard_normal((2, 3))]
    owners = np.array([0, 0, 1, 1, 1])
    # pick a point where no Top-K decision sits on a knife edge
    scores = layer.moe.router(x).data + layer.router_mod(qp(ctxs)[1]).data[owners]
    srt = np.sort(scores, axis=1)
    assert np.min(srt[:, -2] - srt[:, -3]) > 1e-4

    def loss():
        _, z, _ = qp(ctxs)
        return (layer(x, z, owners) ** 2).sum()

    params = qp.parameters() + layer.router_mod.parameters() + layer.eilm.parameters()
    assert grad_check(loss, params) <= 1e-4
