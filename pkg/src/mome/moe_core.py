"""Sparse mixture-of-experts layer and the two numerical verifiers.

The layer mixes expert outputs as ``sum_i lambda_i * g_i(x) * f_i(x)`` where
``g`` comes from the router and ``lambda`` is the Top-K mask. Tokens are
processed in batches of rows; in sparse mode each expert only sees the rows
that selected it.

Cost accounting (per token, N tokens): routing is O(E d), the K active GLU
experts are O(K d d_hidden); modulation adds O(m d + E d) for the routing
shift and O(K d) per token for the affine expert modulation. Nothing here
asserts on these figures.

Verifiers:

* :func:`decompose_mlp` splits one GLU MLP with ``E*C`` hidden units into
  ``E`` sub-MLPs whose outputs sum to the original.
* :func:`theorem_bound` evaluates the Top-K truncation error against
  ``[B^2 + (E-K-1) mu] * sum_{i not in A} g_i^2`` and checks the Gershgorin
  estimate against an exact Jacobi eigen-solve of the discarded Gram matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, VerificationError
from .numerics import DTYPE, Module, Tensor, matmul

ROUTER_ACTIVATIONS = ("softmax", "sigmoid", "identity")


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


class GluExpert(Module):
    """``W_down @ (silu(W_up x) * (W_gate x))``."""

    def __init__(self, d: int, d_hidden: int, rng: Optional[np.random.Generator] = None,
                 d_out: Optional[int] = None, weights=None):
        d_out = d if d_out is None else d_out
        if weights is not None:
            w_up, w_gate, w_down = (np.asarray(w, dtype=DTYPE) for w in weights)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            s_in, s_hid = 1.0 / math.sqrt(d), 1.0 / math.sqrt(d_hidden)
            w_up = rng.uniform(-s_in, s_in, (d_hidden, d))
            w_gate = rng.uniform(-s_in, s_in, (d_hidden, d))
            w_down = rng.uniform(-s_hid, s_hid, (d_out, d_hidden))
        if w_up.shape != w_gate.shape or w_down.shape[1] != w_up.shape[0]:
            raise DimensionError(
                f"inconsistent GLU shapes: up {w_up.shape}, gate {w_gate.shape}, down {w_down.shape}")
        self.W_up = Tensor.param(w_up)
        self.W_gate = Tensor.param(w_gate)
        self.W_down = Tensor.param(w_down)

    @property
    def d_in(self) -> int:
        return self.W_up.shape[1]

    @property
    def d_out(self) -> int:
        return self.W_down.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"expert expects last dim {self.d_in}, got shape {x.shape}")
        up = matmul(x, self.W_up.T).silu()
        gate = matmul(x, self.W_gate.T)
        return matmul(up * gate, self.W_down.T)


class LinearExpert(Module):
    """Affine expert ``W x + b`` (used by the linear backbones)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(d_in)
        self.weight = Tensor.param(rng.uniform(-s, s, (d_out, d_in)))
        self.bias = Tensor.param(rng.uniform(-s, s, d_out))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"expert expects last dim {self.d_in}, got shape {x.shape}")
        return matmul(x, self.weight.T) + self.bias


class Router(Module):
    def __init__(self, d: int, n_experts: int, rng: Optional[np.random.Generator] = None,
                 activation: str = "softmax", weight=None):
        if n_experts < 1:
            raise ConfigError("router needs at least one expert")
        if activation not in ROUTER_ACTIVATIONS:
            raise ConfigError(f"unknown router activation {activation!r}")
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            s = 1.0 / math.sqrt(d)
            weight = rng.uniform(-s, s, (n_experts, d))
        self.W_g = Tensor.param(weight)
        self.activation = activation

    @property
    def n_experts(self) -> int:
        return self.W_g.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W_g.shape[1]:
            raise DimensionError(f"router expects last dim {self.W_g.shape[1]}, got shape {x.shape}")
        logits = matmul(x, self.W_g.T)
        if self.activation == "softmax":
            return logits.softmax(axis=-1)
        if self.activation == "sigmoid":
            return logits.sigmoid()
        return logits


def topk_mask(g, k: int) -> np.ndarray:
    """Binary mask with ones at the ``k`` largest entries; ties go to the lower index."""
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=DTYPE)
    e = g.shape[-1]
    if not 1 <= k <= e:
        raise ConfigError(f"K must satisfy 1 <= K <= E, got K={k}, E={e}")
    rows = np.ascontiguousarray(g.reshape(-1, e))
    return kernels.topk_mask_rows(rows, int(k)).reshape(g.shape)


class RoutingTrace:
    """Collector for routing decisions and auxiliary losses during a forward pass."""

    def __init__(self, keep_scores: bool = True):
        self.keep_scores = keep_scores
        self.entries = []
        self.aux_losses = []

    def record(self, layer: int, pre: np.ndarray, post: np.ndarray, mask_pre: np.ndarray,
               mask_post: np.ndarray) -> None:
        self.entries.append({
            "layer": layer,
            "pre_scores": pre.copy() if self.keep_scores else None,
            "post_scores": post.copy() if self.keep_scores else None,
            "selected_pre": mask_pre.astype(bool),
            "selected_post": mask_post.astype(bool),
        })


class MoELayer(Module):
    """Top-K sparse MoE over rows of a ``(n, d)`` token matrix."""

    def __init__(self, router: Router, experts: Sequence[Module], k: int,
                 aux_balance_weight: float = 0.0, layer_index: int = 0):
        if len(experts) != router.n_experts:
            raise ConfigError(f"router has {router.n_experts} outputs but {len(experts)} experts given")
        if not 1 <= k <= len(experts):
            raise ConfigError(f"K must satisfy 1 <= K <= E, got K={k}, E={len(experts)}")
        dims = {(e.d_in, e.d_out) for e in experts}
        if len(dims) != 1:
            raise ConfigError(f"experts disagree on (d_in, d_out): {sorted(dims)}")
        self.router = router
        self.experts = list(experts)
        self.k = int(k)
        self.aux_balance_weight = float(aux_balance_weight)
        self.layer_index = layer_index

    @classmethod
    def glu(cls, d: int, d_hidden: int, n_experts: int, k: int, rng: np.random.Generator,
            activation: str = "softmax", **kw) -> "MoELayer":
        router = Router(d, n_experts, rng, activation)
        experts = [GluExpert(d, d_hidden, rng) for _ in range(n_experts)]
        return cls(router, experts, k, **kw)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def mix(self, x: Tensor, scores: Tensor, dense: bool = False,
            expert_hook: Optional[Callable[[int, Tensor, np.ndarray], Tensor]] = None,
            mask: Optional[np.ndarray] = None) -> Tensor:
        """Combine experts given routing ``scores``.

        ``expert_hook(i, f_i_rows, rows)`` may transform expert ``i``'s output
        on its selected rows before weighting (used for expert modulation).
        """
        n = x.shape[0]
        if mask is None:
            mask = np.ones(scores.shape) if dense else topk_mask(scores.data, self.k)
        out = None
        for i, expert in enumerate(self.experts):
            rows = np.flatnonzero(mask[:, i])
            if rows.size == 0:
                continue
            xi = x.take_rows(rows)
            fi = expert(xi)
            if expert_hook is not None:
                fi = expert_hook(i, fi, rows)
            gi = scores[:, i:i + 1].take_rows(rows)
            term = (fi * gi).scatter_rows(rows, n)
            out = term if out is None else out + term
        return out

    def balance_loss(self, scores: Tensor, mask: np.ndarray) -> Tensor:
        """Squared coefficient of variation of per-expert routed mass."""
        load = (scores * Tensor(mask)).sum(axis=0)
        mean = load.mean()
        centered = load - mean
        var = (centered * centered).mean()
        return var / (mean * mean + 1e-12)

    def __call__(self, x: Tensor, dense: bool = False, trace: Optional[RoutingTrace] = None) -> Tensor:
        scores = self.router(x)
        mask = np.ones(scores.shape) if dense else topk_mask(scores.data, self.k)
        if trace is not None:
            trace.record(self.layer_index, scores.data, scores.data, mask, mask)
            if self.aux_balance_weight > 0:
                trace.aux_losses.append(self.balance_loss(scores, mask) * self.aux_balance_weight)
        return self.mix(x, scores, dense=dense, mask=mask)


# -- single-token API ---------------------------------------------------------

def _vec(x) -> Tensor:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if arr.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {arr.shape}")
    return Tensor(arr.reshape(1, -1))


def glu_expert_forward(expert: GluExpert, x) -> np.ndarray:
    return expert(_vec(x)).data[0]


def route(router: Router, x) -> np.ndarray:
    return router(_vec(x)).data[0]


def moe_forward(layer: MoELayer, x, dense: bool = False) -> np.ndarray:
    return layer(_vec(x), dense=dense).data[0]


# -- Lemma: MLP decomposition -------------------------------------------------

def glu_mlp_forward(w_up, w_gate, w_down, x) -> np.ndarray:
    """Plain numpy evaluation of a (possibly batched) GLU MLP."""
    x = np.asarray(x, dtype=DTYPE)
    return (silu(x @ np.asarray(w_up).T) * (x @ np.asarray(w_gate).T)) @ np.asarray(w_down).T


def decompose_mlp(w_up, w_gate, w_down, n_experts: int) -> list:
    """Split hidden units into ``n_experts`` contiguous blocks, one sub-MLP each."""
    w_up = np.asarray(w_up, dtype=DTYPE)
    w_gate = np.asarray(w_gate, dtype=DTYPE)
    w_down = np.asarray(w_down, dtype=DTYPE)
    hidden = w_up.shape[0]
    if w_gate.shape != w_up.shape or w_down.shape[1] != hidden:
        raise DimensionError(
            f"inconsistent MLP shapes: up {w_up.shape}, gate {w_gate.shape}, down {w_down.shape}")
    if n_experts < 1 or hidden % n_experts:
        raise ConfigError(f"hidden dim {hidden} is not divisible by E={n_experts}")
    c = hidden // n_experts
    subs = []
    for i in range(n_experts):
        block = slice(i * c, (i + 1) * c)
        subs.append(GluExpert(w_up.shape[1], c, weights=(w_up[block], w_gate[block], w_down[:, block])))
    return subs


# -- Theorem: truncation error bound -----------------------------------------

def _expert_outputs(experts: Sequence[Module], x) -> np.ndarray:
    xt = _vec(x)
    return np.stack([e(xt).data[0] for e in experts])


def truncation_error(experts: Sequence[Module], g, k: int, x) -> float:
    """Squared norm of the discarded part ``sum_{i not in A} g_i f_i(x)``."""
    g = np.asarray(g, dtype=DTYPE).reshape(-1)
    if len(experts) != g.size:
        raise DimensionError(f"{len(experts)} experts but {g.size} routing scores")
    mask = topk_mask(g, k)
    f = _expert_outputs(experts, x)
    dropped = mask == 0
    if not dropped.any():
        return 0.0
    resid = (g[dropped, None] * f[dropped]).sum(axis=0)
    return float(resid @ resid)


def gershgorin_max(a: np.ndarray) -> float:
    """Upper end of the union of Gershgorin discs."""
    a = np.asarray(a, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    radii = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
    return float(np.max(np.diag(a) + radii))


@dataclass
class TheoremReport:
    trunc_error: float
    B: float
    mu: float
    gram: np.ndarray
    gershgorin_bound: float
    exact_lambda_max: float
    rhs_bound: float
    E: int = 0
    K: int = 0
    discarded: list = field(default_factory=list)

    def violations(self, tol: float = 1e-9) -> list:
        bad = []
        scale = max(1.0, abs(self.rhs_bound))
        if self.trunc_error < 0:
            bad.append("negative truncation error")
        if self.gram.size:
            if not np.allclose(self.gram, self.gram.T, atol=tol, rtol=0):
                bad.append("gram not symmetric")
            if self.exact_lambda_max < -tol * max(1.0, abs(self.gershgorin_bound)):
                bad.append("gram not PSD")
        if self.exact_lambda_max > self.gershgorin_bound + tol * max(1.0, abs(self.gershgorin_bound)):
            bad.append("lambda_max exceeds Gershgorin estimate")
        if self.trunc_error > self.rhs_bound + tol * scale:
            bad.append("truncation error exceeds bound")
        return bad

    def to_dict(self) -> dict:
        return {
            "L": self.trunc_error, "B": self.B, "mu": self.mu,
            "gram": self.gram.tolist(), "gershgorin_bound": self.gershgorin_bound,
            "exact_lambda_max": self.exact_lambda_max, "rhs_bound": self.rhs_bound,
            "E": self.E, "K": self.K, "discarded": list(self.discarded),
        }


def bound_rhs(f: np.ndarray, g: np.ndarray, k: int) -> float:
    """``[B^2 + (E-K-1) mu] * sum_{i not in A} g_i^2`` with B, mu over all experts."""
    e = g.size
    mask = topk_mask(g, k)
    dropped_mass = float(np.sum(g[mask == 0] ** 2))
    if dropped_mass == 0.0:
        return 0.0
    norms = np.sqrt(np.sum(f * f, axis=1))
    gram_all = f @ f.T
    off = np.abs(gram_all[~np.eye(e, dtype=bool)])
    b = float(norms.max())
    mu = float(off.max()) if off.size else 0.0
    return (b * b + (e - k - 1) * mu) * dropped_mass


def theorem_bound(experts: Sequence[Module], g, k: int, x, check: bool = True) -> TheoremReport:
    g = np.asarray(g, dtype=DTYPE).reshape(-1)
    e = g.size
    if len(experts) != e:
        raise DimensionError(f"{len(experts)} experts but {e} routing scores")
    f = _expert_outputs(experts, x)
    mask = topk_mask(g, k)
    dropped = np.flatnonzero(mask == 0)
    norms = np.sqrt(np.sum(f * f, axis=1))
    gram_all = f @ f.T
    off = np.abs(gram_all[~np.eye(e, dtype=bool)])
    b = float(norms.max())
    mu = float(off.max()) if off.size else 0.0
    if dropped.size == 0:
        report = TheoremReport(0.0, b, mu, np.zeros((0, 0)), 0.0, 0.0, 0.0, e, k, [])
    else:
        gram = gram_all[np.ix_(dropped, dropped)]
        gram = 0.5 * (gram + gram.T)
        lam = float(kernels.jacobi_eigvalsh(np.ascontiguousarray(gram))[-1])
        report = TheoremReport(
            trunc_error=truncation_error(experts, g, k, x),
            B=b, mu=mu, gram=gram,
            gershgorin_bound=gershgorin_max(gram),
            exact_lambda_max=lam,
            rhs_bound=bound_rhs(f, g, k),
            E=e, K=k, discarded=dropped.tolist(),
        )
    if check:
        bad = report.violations()
        if bad:
            raise VerificationError("; ".join(bad))
    return report


# -- randomized verification runs ---------------------------------------------

def verify_lemma(n_mlps: int = 100, n_points: int = 100, seed: int = 0) -> dict:
    """Largest per-coordinate gap between random GLU MLPs and their block decompositions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = []
    for _ in range(n_mlps):
        e = int(rng.choice([2, 4, 8]))
        d = int(rng.integers(1, 17))
        hidden = e * int(rng.integers(1, 64 // e + 1))
        w_up = rng.standard_normal((hidden, d))
        w_gate = rng.standard_normal((hidden, d))
        w_down = rng.standard_normal((d, hidden)) / math.sqrt(hidden)
        x = rng.standard_normal((n_points, d))
        full = glu_mlp_forward(w_up, w_gate, w_down, x)
        parts = sum(sub(Tensor(x)).data for sub in decompose_mlp(w_up, w_gate, w_down, e))
        err = float(np.max(np.abs(full - parts)))
        worst = max(worst, err)
        cases.append({"d": d, "hidden": hidden, "E": e, "max_err": err})
    return {"mlps": n_mlps, "points": n_points, "seed": seed, "max_err": worst, "cases": cases}


def verify_theorem(instances: int = 1000, seed: int = 0) -> dict:
    """Check the truncation bound and its side conditions on random instances."""
    rng = np.random.default_rng(seed)
    counts = {"bound": 0, "zero_at_full_k": 0, "rhs_monotone": 0, "gershgorin": 0}
    failures = []
    max_ratio = 0.0
    for n in range(instances):
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, e + 1))
        d = int(rng.integers(2, 17))
        h = int(rng.integers(2, 17))
        experts = [GluExpert(d, h, rng) for _ in range(e)]
        x = rng.standard_normal(d)
        logits = rng.standard_normal(e) * 2.0
        g = np.exp(logits - logits.max())
        g /= g.sum()
        rep = theorem_bound(experts, g, k, x, check=False)
        bad = rep.violations()
        if not bad:
            counts["bound"] += 1
            if rep.rhs_bound > 0:
                max_ratio = max(max_ratio, rep.trunc_error / rep.rhs_bound)
        if rep.exact_lambda_max <= rep.gershgorin_bound + 1e-9 * max(1.0, abs(rep.gershgorin_bound)):
            counts["gershgorin"] += 1
        if truncation_error(experts, g, e, x) == 0.0:
            counts["zero_at_full_k"] += 1
        f = _expert_outputs(experts, x)
        rhs = [bound_rhs(f, g, kk) for kk in range(1, e + 1)]
        if all(rhs[i + 1] <= rhs[i] for i in range(e - 1)):
            counts["rhs_monotone"] += 1
        if bad:
            failures.append({"instance": n, "E": e, "K": k, "problems": bad})
    ok = all(v == instances for v in counts.values())
    return {"instances": instances, "seed": seed, "passed": ok, "counts": counts,
            "max_L_over_rhs": max_ratio, "failures": failures[:20]}
