"""Losses, Adam, training/evaluation loops, the Top-K sweep and routing logs."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, Optional, Sequence

import numpy as np

from .backbones import Backbone, BackboneConfig, build_model
from .datasets import MultiModalSample, merge_to_3way
from .errors import ConfigError, DimensionError, MomeError, TrainingAbort
from .moe_core import MoELayer, RoutingTrace
from .numerics import DTYPE, Tensor

log = logging.getLogger("mome.training")

MAPE_EPS = 1e-8


# -- metrics and losses -------------------------------------------------------

def _pair(pred, target):
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise DimensionError("empty prediction")
    return pred, target


def mse_loss(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def mae_metric(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def mape_metric(pred, target, eps: float = MAPE_EPS) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t) / np.maximum(np.abs(t), eps)) * 100.0)


def cross_entropy_loss(logits, label: int) -> float:
    z = np.asarray(logits, dtype=DTYPE).reshape(-1)
    if not 0 <= int(label) < z.size:
        raise ConfigError(f"label {label} out of range for {z.size} classes")
    zmax = z.max()
    return float(zmax + np.log(np.sum(np.exp(z - zmax))) - z[int(label)])


def mse_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.shape != np.shape(target):
        raise DimensionError(f"prediction shape {pred.shape} != target shape {np.shape(target)}")
    diff = pred - target
    return (diff * diff).mean()


def cross_entropy_tensor(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -(logits.log_softmax(axis=-1) * onehot).sum() * (1.0 / n)


# -- optimiser ----------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    task: str = "forecast"
    aux_balance_weight: float = 0.0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.task not in ("forecast", "trend"):
            raise ConfigError(f"task must be forecast or trend, got {self.task!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              cfg: TrainConfig) -> list:
    """One Adam update; ``state`` holds ``t``, ``m`` and ``v`` and is updated in place."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=DTYPE)
        g = np.asarray(g, dtype=DTYPE)
        if p.shape != g.shape:
            raise DimensionError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        m = state["m"][i] = cfg.beta1 * state["m"][i] + (1 - cfg.beta1) * g
        v = state["v"][i] = cfg.beta2 * state["v"][i] + (1 - cfg.beta2) * g * g
        out.append(p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps))
    return out


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: dict = {}

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state, self.cfg)
        for p, value in zip(self.params, new):
            p.data = value


# -- batching -----------------------------------------------------------------

@dataclass
class Batchable:
    x: np.ndarray
    y: np.ndarray
    contexts: Optional[list]
    ids: list


def prepare(samples: Sequence[MultiModalSample], model: Backbone, provider=None, task: str = "forecast") -> Batchable:
    cfg = model.cfg
    x = np.stack([np.asarray(s.x_in, dtype=DTYPE) for s in samples])
    if task == "trend":
        labels = [s.trend_label for s in samples]
        if any(lab is None for lab in labels):
            raise ConfigError("trend task needs a trend_label on every sample")
        y = np.asarray(labels, dtype=np.intp)
    else:
        y = np.stack([np.asarray(s.x_out, dtype=DTYPE) for s in samples])
        if cfg.kind in ("mome", "mmlinear") and y.ndim == 3:
            y = y[:, :, 0]
        if cfg.kind not in ("mome", "mmlinear") and y.ndim == 2:
            y = y[:, :, None]
    contexts = None
    if getattr(model, "modulated", False):
        if provider is None:
            raise ConfigError("a multi-modal model needs a context provider")
        contexts = [provider(s.id, s.text) for s in samples]
    return Batchable(x, y, contexts, [s.id for s in samples])


def _subset(data: Batchable, idx) -> Batchable:
    ctx = None if data.contexts is None else [data.contexts[i] for i in idx]
    return Batchable(data.x[idx], data.y[idx], ctx, [data.ids[i] for i in idx])


def _loss(model: Backbone, batch: Batchable, task: str, trace: Optional[RoutingTrace]) -> Tensor:
    out = model(batch.x, batch.contexts, trace=trace)
    if task == "trend":
        loss = cross_entropy_tensor(out, batch.y)
    else:
        loss = mse_tensor(out, batch.y)
    if trace is not None:
        for aux in trace.aux_losses:
            loss = loss + aux
    return loss


def _eval_loss(model: Backbone, data: Batchable, task: str, chunk: int = 256) -> float:
    was = model.training
    model.eval()
    total = 0.0
    n = data.x.shape[0]
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        total += _loss(model, _subset(data, idx), task, None).item() * idx.size
    model.train(was)
    return total / n


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Backbone
    loss_curve: List[float] = field(default_factory=list)
    val_curve: List[float] = field(default_factory=list)
    best_epoch: int = -1

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, tl in enumerate(self.loss_curve):
                w.writerow([i + 1, repr(tl), repr(self.val_curve[i]) if i < len(self.val_curve) else ""])


def _set_aux(model: Backbone, weight: float) -> None:
    for m in model.modules():
        if isinstance(m, MoELayer):
            m.aux_balance_weight = weight


def train(model: Backbone, samples: Sequence[MultiModalSample], provider=None,
          cfg: Optional[TrainConfig] = None, val_samples: Optional[Sequence[MultiModalSample]] = None,
          on_epoch: Optional[Callable[[int, float, Optional[float]], None]] = None) -> TrainResult:
    """Mini-batch Adam on MSE (forecast) or cross-entropy (trend).

    Without explicit ``val_samples`` the last ``val_fraction`` of the
    (time-ordered) training samples is held out; the parameters with the
    lowest validation loss are restored at the end.
    """
    cfg = cfg or TrainConfig()
    samples = list(samples)
    if not samples:
        raise ConfigError("training set is empty")
    if val_samples is None and cfg.val_fraction > 0 and len(samples) >= 10:
        n_val = max(1, int(round(cfg.val_fraction * len(samples))))
        val_samples = samples[-n_val:]
        samples = samples[:-n_val]
    data = prepare(samples, model, provider, cfg.task)
    val = prepare(list(val_samples), model, provider, cfg.task) if val_samples else None
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    _set_aux(model, cfg.aux_balance_weight)
    model.reset_dropout(cfg.seed)
    opt = Adam(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    n = data.x.shape[0]
    best, best_state = math.inf, None
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start:start + cfg.batch]
            trace = RoutingTrace(keep_scores=False) if cfg.aux_balance_weight > 0 else None
            model.zero_grad()
            loss = _loss(model, _subset(data, idx), cfg.task, trace)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAbort(f"non-finite loss {value} at epoch {epoch}", step=step, batch_id=b)
            loss.backward()
            opt.step()
            total += value * idx.size
            step += 1
        train_loss = total / n
        result.loss_curve.append(train_loss)
        val_loss = _eval_loss(model, val, cfg.task) if val is not None else None
        if val_loss is not None:
            if not math.isfinite(val_loss):
                raise TrainingAbort(f"non-finite validation loss at epoch {epoch}", step=step, batch_id=-1)
            result.val_curve.append(val_loss)
            if val_loss < best:
                best, best_state, result.best_epoch = val_loss, model.state_dict(), epoch
        log.debug("epoch %d train %.6g val %s", epoch + 1, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        result.best_epoch = cfg.epochs - 1
    model.eval()
    return result


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    n: int
    mse: Optional[float] = None
    mae: Optional[float] = None
    mape: Optional[float] = None
    accuracy: Optional[float] = None
    acc_3way: Optional[float] = None
    acc_5way: Optional[float] = None
    records: list = field(default_factory=list)

    def to_dict(self, with_records: bool = True) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        return d

    def to_json(self, with_records: bool = True) -> str:
        return json.dumps(self.to_dict(with_records), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def predict_batched(model: Backbone, data: Batchable, chunk: int = 256, trace=None) -> np.ndarray:
    outs = []
    n = data.x.shape[0]
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        sub = _subset(data, idx)
        outs.append(model.predict(sub.x, sub.contexts, trace=trace))
    return np.concatenate(outs, axis=0)


def evaluate(model: Backbone, samples: Sequence[MultiModalSample], provider=None, task: str = "forecast",
             keep_records: bool = True) -> EvalReport:
    samples = list(samples)
    if not samples:
        raise ConfigError("evaluation set is empty")
    data = prepare(samples, model, provider, task)
    pred = predict_batched(model, data)
    if task == "trend":
        cls = pred.argmax(axis=-1)
        report = EvalReport(task, len(samples), accuracy=float(np.mean(cls == data.y) * 100.0))
        n_classes = pred.shape[-1]
        if n_classes == 5:
            report.acc_5way = report.accuracy
            report.acc_3way = float(np.mean(merge_to_3way(cls) == merge_to_3way(data.y)) * 100.0)
        elif n_classes == 3:
            report.acc_3way = report.accuracy
        if keep_records:
            report.records = [{"id": i, "pred": int(c), "target": int(t)} for i, c, t in zip(data.ids, cls, data.y)]
        return report
    y = data.y.reshape(pred.shape)
    report = EvalReport(task, len(samples), mse=mse_loss(pred, y), mae=mae_metric(pred, y), mape=mape_metric(pred, y))
    if keep_records:
        report.records = [{"id": i, "pred": p.tolist(), "target": t.tolist()} for i, p, t in zip(data.ids, pred, y)]
    return report


# -- Top-K sweep ----------------------------------------------------------------

def _sweep(base: BackboneConfig, key: str, values: Sequence[int], train_cfg: TrainConfig, train_samples,
           test_samples, provider, extra: Optional[dict] = None) -> list:
    rows = []
    for v in values:
        cfg = BackboneConfig.from_dict({**base.to_dict(), **(extra or {}), key: int(v)})
        label = "K" if key == "top_k" else key
        try:
            model = build_model(cfg)
            train(model, train_samples, provider, train_cfg)
            rep = evaluate(model, test_samples, provider, train_cfg.task, keep_records=False)
            row = {label: int(v), "mse": rep.mse, "mae": rep.mae, "accuracy": rep.accuracy, "error": ""}
        except MomeError as exc:
            log.warning("sweep cell %s=%d failed: %s", key, v, exc)
            row = {label: int(v), "mse": None, "mae": None, "accuracy": None, "error": str(exc)}
        rows.append(row)
    return rows


def sweep_topk(base: BackboneConfig, train_cfg: TrainConfig, train_samples, test_samples, provider,
               k_values: Sequence[int], n_experts: Optional[int] = None, out_dir: Optional[str] = None) -> list:
    """Train one model per K (same seed and config) and evaluate on the test split."""
    e = n_experts or base.n_experts
    bad = [k for k in k_values if not 1 <= k <= e]
    if bad:
        raise ConfigError(f"K values {bad} outside [1, {e}]")
    rows = _sweep(base, "top_k", k_values, train_cfg, train_samples, test_samples, provider, {"n_experts": e})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(os.path.join(out_dir, "sweep_k.csv"), rows)
        plot_sweep(rows, os.path.join(out_dir, "sweep_k.svg"), metric="accuracy" if train_cfg.task == "trend" else "mse")
    return rows


def sweep_context_tokens(base: BackboneConfig, train_cfg: TrainConfig, train_samples, test_samples, provider,
                         m_values: Sequence[int]) -> list:
    """Same protocol as ``sweep_topk`` over the number of context tokens m.

    With the hash encoder standing in for a language model only the trend
    across m is meaningful, not the absolute numbers.
    """
    if not base.multimodal:
        raise ConfigError(f"{base.kind} has no context tokens to sweep")
    bad = [m for m in m_values if m < 1]
    if bad:
        raise ConfigError(f"context token counts {bad} must be >= 1")
    return _sweep(base, "ctx_tokens", m_values, train_cfg, train_samples, test_samples, provider)


def best_k(rows: list, metric: str = "mse", key: str = "K") -> Optional[int]:
    ok = [r for r in rows if r.get(metric) is not None]
    if not ok:
        return None
    pick = max if metric == "accuracy" else min
    return pick(ok, key=lambda r: r[metric])[key]


def write_sweep_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["K", "mse", "mae", "accuracy", "error"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


def plot_sweep(rows: list, path, metric: str = "mse") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r.get(metric) is not None]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([r["K"] for r in ok], [r[metric] for r in ok], marker="o")
    ax.set_xlabel("active experts K")
    ax.set_ylabel(f"test {metric.upper()}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_curve(curves: dict, path, ylabel: str = "loss") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- routing logs ---------------------------------------------------------------

@dataclass
class RoutingLog:
    entries: list
    k: int

    def changed_fraction(self, layer: Optional[int] = None) -> float:
        sel = [e for e in self.entries if layer is None or e["layer"] == layer]
        if not sel:
            return 0.0
        return float(np.mean([e["pre_topk"] != e["post_topk"] for e in sel]))

    def summary(self) -> dict:
        layers = sorted({e["layer"] for e in self.entries})
        return {
            "tokens": len(self.entries),
            "K": self.k,
            "changed_fraction": self.changed_fraction(),
            "per_layer": {str(l): self.changed_fraction(l) for l in layers},
        }


def routing_log(model: Backbone, samples: Sequence[MultiModalSample], provider=None) -> RoutingLog:
    """Per (layer, token) Top-K sets before and after router modulation."""
    data = prepare(list(samples), model, provider, "forecast" if model.cfg.task == "forecast" else "trend")
    trace = RoutingTrace(keep_scores=True)
    predict_batched(model, data, trace=trace)
    entries = []
    seen = {}
    for rec in trace.entries:
        pre, post = rec["selected_pre"], rec["selected_post"]
        offset = seen.get(rec["layer"], 0)
        seen[rec["layer"]] = offset + pre.shape[0]
        for t in range(pre.shape[0]):
            pre_set = tuple(int(i) for i in np.flatnonzero(pre[t]))
            post_set = tuple(int(i) for i in np.flatnonzero(post[t]))
            entries.append({
                "layer": rec["layer"], "token": offset + t,
                "pre_topk": pre_set, "post_topk": post_set,
                "pre_scores": rec["pre_scores"][t].tolist(), "post_scores": rec["post_scores"][t].tolist(),
            })
    return RoutingLog(entries, model.cfg.top_k)
