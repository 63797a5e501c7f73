"""Command-line entry point: ``mome <subcommand> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import backbones, context_provider, datasets, moe_core, training
from .errors import ConfigError, FormatError, MomeError

log = logging.getLogger("mome")


# -- run config -----------------------------------------------------------------

@dataclass
class RunConfig:
    backbone: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    context: dict = field(default_factory=lambda: {"kind": "hash", "dprime": 64, "max_tokens": 2048})
    seed: int = 0

    DATA_KEYS = ("path", "test_path", "preset")
    CONTEXT_KEYS = ("kind", "dprime", "max_tokens", "path")

    def validate(self) -> "RunConfig":
        backbones.BackboneConfig.from_dict(self.backbone)
        training.TrainConfig.from_dict(self.train)
        for name, allowed in (("data", self.DATA_KEYS), ("context", self.CONTEXT_KEYS)):
            unknown = set(getattr(self, name)) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
        if self.context.get("kind", "hash") not in ("hash", "precomputed"):
            raise ConfigError(f"unknown context kind {self.context.get('kind')!r}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"backbone", "train", "data", "context", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        base = cls()
        ctx = {**base.context, **d.get("context", {})}
        return cls(backbone=dict(d.get("backbone", {})), train=dict(d.get("train", {})),
                   data=dict(d.get("data", {})), context=ctx, seed=d.get("seed", 0)).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"backbone": self.backbone, "train": self.train, "data": self.data,
                "context": self.context, "seed": self.seed}

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _provider(ctx: dict):
    return context_provider.make_provider(ctx.get("kind", "hash"), int(ctx.get("dprime", 64)),
                                          int(ctx.get("max_tokens", 2048)), ctx.get("path"))


def _infer_shapes(samples) -> dict:
    s = samples[0]
    x_in = np.asarray(s.x_in)
    x_out = np.asarray(s.x_out)
    out = {"seq_len": int(x_in.shape[0]), "horizon": int(x_out.shape[0]),
           "channels": int(x_in.shape[1]) if x_in.ndim == 2 else 1}
    labels = [t.trend_label for t in samples if t.trend_label is not None]
    if labels:
        out["n_classes"] = 5 if s.domain == "finance" else max(3, max(labels) + 1)
    return out


def _effective(args, samples=None) -> RunConfig:
    """Merge --config with command-line overrides."""
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    bb = dict(rc.backbone)
    tr = dict(rc.train)
    if samples:
        for key, value in _infer_shapes(samples).items():
            bb.setdefault(key, value)
    overrides = {
        "kind": getattr(args, "backbone", None), "n_experts": getattr(args, "experts", None),
        "top_k": getattr(args, "topk", None), "ctx_tokens": getattr(args, "ctx_tokens", None),
        "layers": getattr(args, "layers", None), "d": getattr(args, "d", None),
        "task": getattr(args, "task", None),
    }
    bb.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_modulation", False):
        bb["eilm"] = bb["router_mod"] = False
    if getattr(args, "no_router_mod", False):
        bb["router_mod"] = False
    if getattr(args, "no_eilm", False):
        bb["eilm"] = False
    for key in ("epochs", "lr", "batch"):
        if getattr(args, key, None) is not None:
            tr[key] = getattr(args, key)
    if getattr(args, "task", None):
        tr["task"] = args.task
    if "task" in bb:
        tr.setdefault("task", bb["task"])
    ctx = dict(rc.context)
    if getattr(args, "dprime", None) is not None:
        ctx["dprime"] = args.dprime
    if getattr(args, "embeddings", None):
        ctx.update(kind="precomputed", path=args.embeddings)
    if ctx.get("kind") == "precomputed" and ctx.get("path") and getattr(args, "dprime", None) is None:
        # the file fixes d'; only an explicit --dprime may disagree (and then fails loudly)
        found = context_provider.PrecomputedProvider.from_file(ctx["path"]).dprime
        if found is not None:
            ctx["dprime"] = found
            bb.setdefault("dprime", found)
    bb.setdefault("dprime", int(ctx.get("dprime", 64)))
    seed = args.seed if getattr(args, "seed", None) is not None else rc.seed
    bb["seed"] = seed
    tr["seed"] = seed
    data = dict(rc.data)
    if getattr(args, "data", None):
        data["path"] = args.data
    return RunConfig(bb, tr, data, ctx, seed).validate()


def _load_data(path):
    if not path:
        raise ConfigError("no dataset given (use --data or data.path in --config)")
    samples = datasets.read_samples(path)
    if not samples:
        raise ConfigError(f"{path} holds no samples")
    return samples


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=1)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# -- subcommands ------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    if args.cue:
        samples = datasets.make_cue_dataset(args.n_samples, seed=args.seed, p_c=args.p_c if args.p_c is not None else 1.0)
    elif args.csv:
        series = datasets.load_series_csv(args.csv)
        p = datasets.get_preset(args.preset) if args.preset else None
        samples = datasets.build_from_series(
            series, domain=args.domain or (p.domain if p else "generic"),
            l_in=args.l_in or (p.l_in if p else 14), l_out=args.l_out or (p.l_out if p else 3),
            stride=args.stride or (p.stride if p else 1), seed=args.seed,
            p_c=0.8 if args.p_c is None else args.p_c,
            points_per_day=p.points_per_day if p else 1, prefix=os.path.basename(args.csv))
    else:
        if not args.preset:
            raise ConfigError("give --preset, --cue or --csv")
        samples = datasets.build_preset_dataset(args.preset, seed=args.seed, n_windows=args.n_windows,
                                                p_c=0.8 if args.p_c is None else args.p_c, channels=args.channels)
    n = datasets.write_samples(args.out, samples)
    train, test = datasets.split_samples(samples)
    print(json.dumps({"out": args.out, "samples": n, "train": len(train), "test": len(test)}))
    return 0


def cmd_embed_text(args) -> int:
    enc = context_provider.HashEncoder(args.dprime, args.max_tokens)
    records = []
    with open(args.inp) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid, text = str(obj["id"]), obj["text"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{args.inp}:{lineno}: need 'id' and 'text': {exc}") from exc
            records.append(context_provider.EmbeddingRecord(rid, enc(rid, text)))
    n = context_provider.write_embeddings(args.out, records)
    print(json.dumps({"out": args.out, "records": n, "dprime": args.dprime}))
    return 0


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config) if args.config else None
    samples = _load_data(args.data or (rc.data.get("path") if rc else None))
    rc = _effective(args, samples)
    if args.dump_config:
        rc.dump(args.dump_config)
    train_s, test_s = datasets.split_samples(samples)
    if not train_s:
        raise ConfigError("dataset has no training samples")
    tcfg = training.TrainConfig.from_dict(rc.train)
    model = backbones.build_model(backbones.BackboneConfig.from_dict(rc.backbone))
    provider = _provider(rc.context) if model.modulated else None
    result = training.train(model, train_s, provider, tcfg)
    out = args.out or "model.json"
    backbones.save_checkpoint(model, out, extra={"context": rc.context, "train": rc.train})
    curve_path = os.path.splitext(out)[0] + "_loss.csv"
    result.write_curve(curve_path)
    summary = {"checkpoint": out, "loss_curve": curve_path, "best_epoch": result.best_epoch,
               "final_train_loss": result.loss_curve[-1] if result.loss_curve else None}
    if test_s:
        rep = training.evaluate(model, test_s, provider, tcfg.task, keep_records=False)
        summary["test"] = rep.to_dict(with_records=False)
    print(json.dumps(summary))
    return 0


def _load_model(path):
    model = backbones.load_checkpoint(path)
    with open(path) as fh:
        extra = json.load(fh).get("extra", {})
    return model, extra


def _pick_split(samples, split: str):
    if split == "all":
        return samples
    picked = [s for s in samples if s.split == split]
    if not picked:
        raise ConfigError(f"no samples in split {split!r}")
    return picked


def cmd_eval(args) -> int:
    model, extra = _load_model(args.checkpoint)
    samples = _pick_split(_load_data(args.data), args.split)
    ctx = dict(extra.get("context", {"kind": "hash", "dprime": model.cfg.dprime}))
    if args.embeddings:
        ctx.update(kind="precomputed", path=args.embeddings)
    provider = _provider(ctx) if model.modulated else None
    rep = training.evaluate(model, samples, provider, model.cfg.task, keep_records=args.records)
    _emit(rep.to_dict(with_records=args.records), args.out)
    return 0


def cmd_verify(args) -> int:
    if args.what == "lemma":
        rep = moe_core.verify_lemma(args.seeds, args.points, seed=args.seed or 0)
        rep["passed"] = rep["max_err"] <= 1e-10
        if not args.verbose:
            rep.pop("cases")
    else:
        rep = moe_core.verify_theorem(args.instances, seed=args.seed or 0)
    _emit(rep, args.out)
    return 0 if rep["passed"] else 1


def cmd_sweep_k(args) -> int:
    rc = RunConfig.load(args.config) if args.config else None
    samples = _load_data(args.data or (rc.data.get("path") if rc else None))
    rc = _effective(args, samples)
    train_s, test_s = datasets.split_samples(samples)
    if not test_s:
        raise ConfigError("sweep needs test samples")
    base = backbones.BackboneConfig.from_dict(rc.backbone)
    ks = [int(k) for k in args.k.split(",")]
    provider = _provider(rc.context) if base.multimodal else None
    rows = training.sweep_topk(base, training.TrainConfig.from_dict(rc.train), train_s, test_s, provider,
                               ks, n_experts=base.n_experts, out_dir=args.out)
    metric = "accuracy" if base.task == "trend" else "mse"
    print(json.dumps({"rows": rows, "best_K": training.best_k(rows, metric)}))
    return 0


def cmd_routing_report(args) -> int:
    model, extra = _load_model(args.checkpoint)
    samples = _pick_split(_load_data(args.data), args.split)
    ctx = dict(extra.get("context", {"kind": "hash", "dprime": model.cfg.dprime}))
    provider = _provider(ctx) if model.modulated else None
    rlog = training.routing_log(model, samples, provider)
    report = rlog.summary()
    if args.entries:
        report["entries"] = rlog.entries
    _emit(report, args.out)
    return 0


def cmd_plot(args) -> int:
    with open(args.inp, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{args.inp} is empty")
    cols = rows[0].keys()
    if "K" in cols:
        parsed = [{"K": int(r["K"]), **{m: float(r[m]) if r[m] not in ("", "None") else None
                                        for m in ("mse", "mae", "accuracy")}} for r in rows]
        training.plot_sweep(parsed, args.out, metric=args.metric)
    elif "epoch" in cols:
        curves = {"train": [float(r["train_loss"]) for r in rows]}
        val = [float(r["val_loss"]) for r in rows if r.get("val_loss")]
        if len(val) == len(rows):
            curves["validation"] = val
        training.plot_curve(curves, args.out)
    else:
        raise FormatError(f"{args.inp}: expected a loss-curve or sweep CSV")
    print(json.dumps({"out": args.out}))
    return 0


# -- parser ------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--data", help="dataset JSONL")
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone", choices=backbones.KINDS)
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--ctx-tokens", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--task", choices=("forecast", "trend"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--dprime", type=int)
    p.add_argument("--embeddings", help="precomputed embedding JSONL instead of the hash encoder")
    p.add_argument("--no-modulation", action="store_true", help="disable both router modulation and EiLM")
    p.add_argument("--no-router-mod", action="store_true")
    p.add_argument("--no-eilm", action="store_true")
    p.add_argument("--dump-config", help="write the effective RunConfig here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mome", description="Modulated mixture-of-experts for text-conditioned time series")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth-data", help="generate a multi-modal dataset JSONL")
    p.add_argument("--preset", choices=sorted(datasets.PRESETS))
    p.add_argument("--cue", action="store_true", help="text-only level-shift cue dataset")
    p.add_argument("--csv", help="headerless CSV series to window instead of a synthetic one")
    p.add_argument("--domain", choices=datasets.DOMAINS)
    p.add_argument("--l-in", type=int)
    p.add_argument("--l-out", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-windows", type=int, default=200)
    p.add_argument("--n-samples", type=int, default=400)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--p-c", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("embed-text", help="hash-encode texts into an embedding JSONL")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dprime", type=int, default=64)
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int, help="accepted for uniformity; encoding is seed-free")
    p.set_defaults(func=cmd_embed_text)

    p = sub.add_parser("train", help="train a backbone and write a checkpoint")
    _model_flags(p)
    p.add_argument("--out", help="checkpoint manifest path (default model.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--embeddings")
    p.add_argument("--records", action="store_true", help="include per-sample predictions")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="randomized checks of the decomposition lemma and truncation bound")
    p.add_argument("what", choices=("lemma", "theorem"))
    p.add_argument("--seeds", type=int, default=100, help="number of random MLPs (lemma)")
    p.add_argument("--points", type=int, default=100, help="inputs per MLP (lemma)")
    p.add_argument("--instances", type=int, default=1000, help="random instances (theorem)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep-k", help="train one model per K and tabulate test error")
    _model_flags(p)
    p.add_argument("--k", default="1,2,4", help="comma-separated K values")
    p.add_argument("--out", help="directory for sweep_k.csv / sweep_k.svg")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("routing-report", help="Top-K changes caused by router modulation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--entries", action="store_true", help="include per-token entries")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_routing_report)

    p = sub.add_parser("plot", help="render a loss-curve or sweep CSV to SVG")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", default="mse", choices=("mse", "mae", "accuracy"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_plot)
    return ap


def _setup_logging() -> None:
    level = os.environ.get("MOME_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except MomeError as exc:
        print(f"mome: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mome: error: {exc}", file=sys.stderr)
        return 1


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
