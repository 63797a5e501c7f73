"""Multi-modal sample construction: windows, leakage-free splits, window
metrics, bulletin text and trend labels.

Each window of a series yields ``x_in``/``x_out``, a set of descriptive
metrics, a short template-generated bulletin describing those metrics and,
optionally, a categorical trend label. With probability ``1 - p_c`` the
signed metrics are mirrored before rendering so the text contradicts the
data (consistency flag 0).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InsufficientDataError, UndefinedReturnError
from .numerics import linear_slope

SIGMA_FLOOR = 1e-9


# -- records ------------------------------------------------------------------

@dataclass
class MetricsRecord:
    narrative_near: float
    sigma: float
    z_past: float
    residual_vol: float
    r2: float
    nmad: float
    z_future: float
    n_in: int = 0
    n_out: int = 0

    @property
    def variability(self):
        return (self.residual_vol, self.r2, self.nmad)

    @property
    def past_drift(self) -> float:
        """Fitted change across the input window in units of sigma."""
        return self.z_past * max(self.n_in - 1, 1)

    @property
    def future_drift(self) -> float:
        return self.z_future * max(self.n_out - 1, 1)

    @property
    def near_score(self) -> float:
        return self.narrative_near / self.sigma

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


@dataclass
class MultiModalSample:
    id: str
    x_in: np.ndarray
    x_out: np.ndarray
    text: str
    consistency: int
    metrics: MetricsRecord
    trend_label: Optional[int] = None
    split: str = "train"
    domain: str = "generic"
    past_label: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "x_in": np.asarray(self.x_in).tolist(),
            "x_out": np.asarray(self.x_out).tolist(),
            "text": self.text,
            "consistency": int(self.consistency),
            "metrics": self.metrics.to_dict(),
            "trend_label": None if self.trend_label is None else int(self.trend_label),
            "split": self.split,
            "domain": self.domain,
            "past_label": None if self.past_label is None else int(self.past_label),
        }

    @classmethod
    def from_json(cls, d: dict) -> "MultiModalSample":
        try:
            return cls(
                id=str(d["id"]),
                x_in=np.asarray(d["x_in"], dtype=np.float64),
                x_out=np.asarray(d["x_out"], dtype=np.float64),
                text=str(d["text"]),
                consistency=int(d["consistency"]),
                metrics=MetricsRecord.from_dict(d["metrics"]),
                trend_label=d.get("trend_label"),
                split=d.get("split", "train"),
                domain=d.get("domain", "generic"),
                past_label=d.get("past_label"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad sample record: {exc}") from exc


@dataclass
class SplitPlan:
    train_idx: np.ndarray
    test_idx: np.ndarray
    gap: int


# -- windows and split --------------------------------------------------------

def slide_windows(x, l_in: int, l_out: int, stride: int = 1) -> list:
    """All (x_in, x_out) pairs with start positions 0, s, 2s, ... along axis 0."""
    x = np.asarray(x, dtype=np.float64)
    if l_in < 1 or l_out < 1 or stride < 1:
        raise ConfigError("window lengths and stride must be >= 1")
    t = x.shape[0]
    if t < l_in + l_out:
        raise InsufficientDataError(f"series of length {t} is shorter than one window ({l_in}+{l_out})")
    out = []
    for i in range(0, t - (l_in + l_out) + 1, stride):
        out.append((x[i:i + l_in].copy(), x[i + l_in:i + l_in + l_out].copy()))
    return out


def window_starts(t: int, l_in: int, l_out: int, stride: int) -> np.ndarray:
    return np.arange(0, t - (l_in + l_out) + 1, stride)


def split_with_gap(n: int, l_in: int, l_out: int, gap: Optional[int] = None) -> SplitPlan:
    """80/20 split of ``n`` windows with ``gap`` windows dropped in between.

    Indices are 0-based; in 1-based terms train is ``1..c`` and test is
    ``c+gap..n`` with ``c = floor(0.8 n)``. The default gap is
    ``max(l_in, l_out)``.
    """
    g = max(l_in, l_out) if gap is None else int(gap)
    if g < 0:
        raise ConfigError("gap must be >= 0")
    if n <= g:
        raise InsufficientDataError(f"{n} windows cannot accommodate a gap of {g}")
    c = int(math.floor(0.8 * n))
    if c < 1:
        raise InsufficientDataError(f"{n} windows leave no training data")
    train = np.arange(0, c)
    first_test = c + g  # 1-based start c+g -> 0-based c+g-1
    test = np.arange(first_test - 1, n) if g >= 1 else np.arange(c, n)
    if test.size == 0:
        raise InsufficientDataError(f"split of {n} windows with gap {g} leaves no test windows")
    return SplitPlan(train, test, g)


def leak_free_gap(l_in: int, l_out: int, stride: int) -> int:
    """Smallest window-index gap for which no test window shares a time step with a train window."""
    return int(math.ceil((l_in + l_out) / stride))


def spans_overlap(starts: np.ndarray, plan: SplitPlan, length: int) -> bool:
    """True when any test window's time span intersects a training window's span."""
    if plan.train_idx.size == 0 or plan.test_idx.size == 0:
        return False
    train_end = starts[plan.train_idx].max() + length  # exclusive
    test_begin = starts[plan.test_idx].min()
    return bool(test_begin < train_end)


# -- metrics ------------------------------------------------------------------

def robust_sigma(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    std = float(np.std(x))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25) / 1.349
    mad = float(np.median(np.abs(x - np.median(x)))) * 1.4826
    return max(float(np.median([std, iqr, mad])), SIGMA_FLOOR)


def compute_metrics(x_in, x_out) -> MetricsRecord:
    x_in = np.asarray(x_in, dtype=np.float64).reshape(-1)
    x_out = np.asarray(x_out, dtype=np.float64).reshape(-1)
    if x_in.size < 3:
        raise InsufficientDataError(f"metrics need at least 3 input points, got {x_in.size}")
    if x_out.size < 1:
        raise InsufficientDataError("metrics need at least 1 output point")
    tail = int(math.ceil(x_in.size / 4))
    near = float(x_out.mean() - x_in[-tail:].mean())
    sigma = robust_sigma(x_in)
    slope = linear_slope(x_in)
    t = np.arange(x_in.size, dtype=np.float64)
    fitted = x_in.mean() + slope * (t - t.mean())
    resid = x_in - fitted
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.sum((x_in - x_in.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    return MetricsRecord(
        narrative_near=near,
        sigma=sigma,
        z_past=slope / sigma,
        residual_vol=float(np.std(resid)) / sigma,
        r2=r2,
        nmad=float(np.mean(np.abs(np.diff(x_in)))) / sigma,
        z_future=linear_slope(x_out) / sigma if x_out.size >= 2 else 0.0,
        n_in=int(x_in.size),
        n_out=int(x_out.size),
    )


def flip_metrics(m: MetricsRecord) -> MetricsRecord:
    return MetricsRecord(**{**m.to_dict(), "narrative_near": -m.narrative_near,
                            "z_past": -m.z_past, "z_future": -m.z_future})


def flip_consistency(metrics: MetricsRecord, p_c: float, rng: np.random.Generator):
    if not 0.0 <= p_c <= 1.0:
        raise ConfigError(f"p_c must lie in [0, 1], got {p_c}")
    if rng.random() < p_c:
        return metrics, 1
    return flip_metrics(metrics), 0


# -- bulletin text --------------------------------------------------------------

def signed_bucket(v: float, lo: float, hi: float) -> int:
    """-2..2 from |v| against (lo, hi]; symmetric so negating v mirrors the bucket."""
    a = abs(v)
    level = 0 if a <= lo else (1 if a <= hi else 2)
    return int(math.copysign(level, v)) if level else 0


TENDENCY_EDGES = (0.5, 1.5)
NEAR_EDGES = (1.5, 4.5)
MOMENTUM_EDGE = 0.5

PHRASES = {
    "finance": {
        "tendency": {-2: "a pronounced downward slide", -1: "a gentle downward drift", 0: "a sideways range",
                     1: "a gentle upward drift", 2: "a pronounced upward climb"},
        "near": {-2: "a sharp selloff", -1: "mild selling pressure", 0: "a balanced tape",
                 1: "mild buying interest", 2: "a sharp rally"},
        "momentum": {-1: "leaned lower", 0: "stayed flat", 1: "leaned higher"},
        "openers": ("Market desk note.", "Trading summary."),
        "subject": "Price action",
    },
    "weather": {
        "tendency": {-2: "a steady cooling trend", -1: "a slight cooling", 0: "little change in temperature",
                     1: "a slight warming", 2: "a steady warming trend"},
        "near": {-2: "a sharp cold snap", -1: "a mild cooldown", 0: "settled conditions",
                 1: "a mild warm-up", 2: "a sharp warm spell"},
        "momentum": {-1: "pointed colder", 0: "stayed level", 1: "pointed warmer"},
        "openers": ("Station log.", "Observation digest."),
        "subject": "Readings",
    },
    "generic": {
        "tendency": {-2: "a marked decline", -1: "a slight decline", 0: "a flat profile",
                     1: "a slight rise", 2: "a marked rise"},
        "near": {-2: "a sharp drop", -1: "a modest dip", 0: "a steady level",
                 1: "a modest lift", 2: "a sharp jump"},
        "momentum": {-1: "tilted down", 0: "held even", 1: "tilted up"},
        "openers": ("Series report.", "Status summary."),
        "subject": "The signal",
    },
}

DOMAINS = tuple(PHRASES)


def _volatility_phrase(residual_vol: float) -> str:
    if residual_vol < 0.5:
        return "orderly"
    if residual_vol < 1.0:
        return "uneven"
    return "choppy"


def _fit_phrase(r2: float) -> str:
    if r2 >= 0.7:
        return "closely tracked a straight path"
    if r2 >= 0.3:
        return "loosely followed a line"
    return "lacked a clear direction"


def bulletin_buckets(metrics: MetricsRecord) -> dict:
    return {
        "tendency": signed_bucket(metrics.past_drift, *TENDENCY_EDGES),
        "near": signed_bucket(metrics.near_score, *NEAR_EDGES),
        "momentum": int(np.sign(metrics.future_drift)) if abs(metrics.future_drift) > MOMENTUM_EDGE else 0,
    }


def render_bulletin(metrics: MetricsRecord, domain: str = "generic", rng: Optional[np.random.Generator] = None) -> str:
    if domain not in PHRASES:
        raise ConfigError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    table = PHRASES[domain]
    b = bulletin_buckets(metrics)
    opener = table["openers"][0 if rng is None else int(rng.integers(len(table["openers"])))]
    sentences = [
        opener,
        f"Recent readings showed {table['tendency'][b['tendency']]}.",
        f"Latest commentary centred on {table['near'][b['near']]}.",
        f"{table['subject']} was {_volatility_phrase(metrics.residual_vol)} and {_fit_phrase(metrics.r2)}.",
        f"Momentum gauges {table['momentum'][b['momentum']]}.",
    ]
    return keyword_blocking(" ".join(sentences))


# -- keyword blocking -------------------------------------------------------------

@lru_cache(maxsize=1)
def load_blocklist() -> dict:
    with resources.files("mome").joinpath("data/blocklist.json").open() as fh:
        return json.load(fh)


@lru_cache(maxsize=1)
def _block_pattern():
    terms = load_blocklist()["terms"]
    alts = [r"\s+".join(re.escape(w) for w in t.split()) for t in terms]
    return re.compile(r"\b(?:" + "|".join(alts) + r")\b", re.IGNORECASE)


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def keyword_blocking(text: str) -> str:
    """Drop every sentence containing a blocklisted term; text without hits is returned as-is."""
    pattern = _block_pattern()
    if not pattern.search(text):
        return text
    pieces = [p for p in _SENTENCE_SPLIT.split(text.strip()) if p]
    return " ".join(p for p in pieces if not pattern.search(p))


# -- trend labels -----------------------------------------------------------------

FINANCE_5 = ("Bearish", "Warning", "Neutral", "Growth", "Bullish")
FINANCE_3 = ("Negative", "Neutral", "Positive")
WEATHER_3 = ("Negative", "Neutral", "Positive")


def bin_finance_change(delta: float, n_way: int = 5) -> int:
    if n_way not in (3, 5):
        raise ConfigError(f"n_way must be 3 or 5, got {n_way}")
    if delta <= -0.04:
        five = 0
    elif delta <= -0.02:
        five = 1
    elif delta < 0.02:
        five = 2
    elif delta < 0.04:
        five = 3
    else:
        five = 4
    return five if n_way == 5 else merge_to_3way(five)


def merge_to_3way(label5):
    """Bearish/Warning -> Negative, Neutral -> Neutral, Growth/Bullish -> Positive."""
    return np.asarray([0, 0, 1, 2, 2])[label5] if np.ndim(label5) else (0, 0, 1, 2, 2)[int(label5)]


def finance_trend_label(y, n_way: int = 5) -> int:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size < 2:
        raise InsufficientDataError("need start and end values")
    if y[0] == 0.0:
        raise UndefinedReturnError("percentage change undefined for a zero starting price")
    return bin_finance_change((y[-1] - y[0]) / y[0], n_way)


def bin_weather_past(slope: float) -> int:
    return 0 if slope < -0.25 else (2 if slope > 0.25 else 1)


def bin_weather_future(diff: float) -> int:
    return 0 if diff < -1.5 else (2 if diff > 1.5 else 1)


def daily_means(x, points_per_day: int) -> np.ndarray:
    """Means of complete days, aligned to the end of the series."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    days = x.size // points_per_day
    if days == 0:
        return np.empty(0)
    return x[x.size - days * points_per_day:].reshape(days, points_per_day).mean(axis=1)


def weather_trend_labels(x_in, x_out, points_per_day: int = 24):
    if points_per_day < 1:
        raise ConfigError("points_per_day must be >= 1")
    past = daily_means(x_in, points_per_day)
    if past.size < 2:
        raise InsufficientDataError(f"need at least 2 complete input days, got {past.size}")
    fut = daily_means(x_out, points_per_day)
    fut_mean = float(fut.mean()) if fut.size else float(np.mean(x_out))
    return bin_weather_past(linear_slope(past)), bin_weather_future(fut_mean - float(past[-1]))


# -- synthetic series and presets -------------------------------------------------

@dataclass(frozen=True)
class Preset:
    name: str
    domain: str
    points_per_day: int
    l_in: int
    l_out: int
    stride: int
    n_classes: int


PRESETS = {
    "finance-short": Preset("finance-short", "finance", 12, 84, 1, 12, 5),
    "finance-long": Preset("finance-long", "finance", 7, 210, 49, 7, 5),
    "weather-short": Preset("weather-short", "weather", 24, 168, 24, 24, 3),
    "weather-long": Preset("weather-long", "weather", 24, 336, 72, 24, 3),
    "timemmd-style": Preset("timemmd-style", "generic", 1, 14, 3, 1, 3),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def synth_finance(t: int, rng: np.random.Generator, ppd: int = 12) -> np.ndarray:
    """Geometric random walk with regime-switching drift."""
    vol = 0.02 / math.sqrt(ppd)
    drift = np.zeros(t)
    level = 0.0
    for i in range(t):
        if i % (ppd * 5) == 0:
            level = rng.normal(0.0, 0.004 / ppd ** 0.5)
        drift[i] = level
    return 100.0 * np.exp(np.cumsum(drift + vol * rng.standard_normal(t)))


def synth_weather(t: int, rng: np.random.Generator, ppd: int = 24, channels: int = 1) -> np.ndarray:
    """Hourly-style temperature: seasonal ramp, daily cycle, AR(1) anomaly, noise."""
    steps = np.arange(t)
    season = 12.0 + 8.0 * np.sin(2 * np.pi * steps / (ppd * 120.0) + rng.uniform(0, 2 * np.pi))
    daily = 4.0 * np.sin(2 * np.pi * (steps % ppd) / ppd - np.pi / 2)
    anomaly = np.zeros(t)
    phi = 1.0 - 1.0 / (3 * ppd)
    shocks = rng.standard_normal(t) * 0.35
    for i in range(1, t):
        anomaly[i] = phi * anomaly[i - 1] + shocks[i]
    temp = season + daily + anomaly + 0.3 * rng.standard_normal(t)
    if channels == 1:
        return temp
    cols = [temp]
    for _ in range(channels - 1):
        cols.append(0.5 * temp + anomaly * rng.uniform(-1, 1) + rng.standard_normal(t))
    return np.stack(cols, axis=1)


def synth_generic(t: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """AR(1) around a slowly bending trend."""
    out = np.zeros((t, channels))
    for c in range(channels):
        ar = np.zeros(t)
        e = rng.standard_normal(t)
        for i in range(1, t):
            ar[i] = 0.8 * ar[i - 1] + e[i]
        trend = np.cumsum(rng.normal(0, 0.05, t))
        out[:, c] = 10.0 + trend + ar
    return out[:, 0] if channels == 1 else out


def synth_series(domain: str, t: int, rng: np.random.Generator, ppd: int = 1, channels: int = 1) -> np.ndarray:
    if domain == "finance":
        s = synth_finance(t, rng, ppd)
        return s if channels == 1 else np.stack([s] + [s * rng.uniform(0.5, 1.5) + rng.standard_normal(t)
                                                       for _ in range(channels - 1)], axis=1)
    if domain == "weather":
        return synth_weather(t, rng, ppd, channels)
    if domain == "generic":
        return synth_generic(t, rng, channels)
    raise ConfigError(f"unknown domain {domain!r}")


def _target(x: np.ndarray) -> np.ndarray:
    return x if x.ndim == 1 else x[:, 0]


def make_sample(idx: int, x_in, x_out, *, domain: str, seed: int, p_c: float, prefix: str,
                points_per_day: int = 1, n_classes: Optional[int] = None) -> MultiModalSample:
    rng = np.random.default_rng([seed, idx])
    metrics = compute_metrics(_target(x_in), _target(x_out))
    shown, flag = flip_consistency(metrics, p_c, rng)
    text = render_bulletin(shown, domain, rng)
    label = past = None
    if domain == "finance":
        y = np.concatenate([_target(x_in)[-1:], _target(x_out)])
        label = finance_trend_label(y, n_classes or 5)
    elif domain == "weather" and _target(x_in).size >= 2 * points_per_day:
        past, label = weather_trend_labels(_target(x_in), _target(x_out), points_per_day)
    return MultiModalSample(id=f"{prefix}-{idx}", x_in=x_in, x_out=x_out, text=text, consistency=flag,
                            metrics=metrics, trend_label=label, domain=domain, past_label=past)


def build_from_series(series, *, domain: str, l_in: int, l_out: int, stride: int, seed: int = 0,
                      p_c: float = 0.8, points_per_day: int = 1, prefix: str = "w",
                      n_classes: Optional[int] = None) -> List[MultiModalSample]:
    series = np.asarray(series, dtype=np.float64)
    windows = slide_windows(series, l_in, l_out, stride)
    plan = split_with_gap(len(windows), l_in, l_out, gap=leak_free_gap(l_in, l_out, stride))
    starts = window_starts(series.shape[0], l_in, l_out, stride)
    assert not spans_overlap(starts, plan, l_in + l_out)
    split_of = {int(i): "train" for i in plan.train_idx}
    split_of.update({int(i): "test" for i in plan.test_idx})
    out = []
    for i, (xi, xo) in enumerate(windows):
        if i not in split_of:
            continue
        s = make_sample(i, xi, xo, domain=domain, seed=seed, p_c=p_c, prefix=prefix,
                        points_per_day=points_per_day, n_classes=n_classes)
        s.split = split_of[i]
        out.append(s)
    return out


def build_preset_dataset(preset: str, seed: int = 0, n_windows: int = 200, p_c: float = 0.8,
                         channels: int = 1) -> List[MultiModalSample]:
    p = get_preset(preset)
    t = (n_windows - 1) * p.stride + p.l_in + p.l_out
    series = synth_series(p.domain, t, np.random.default_rng(seed), p.points_per_day, channels)
    return build_from_series(series, domain=p.domain, l_in=p.l_in, l_out=p.l_out, stride=p.stride,
                             seed=seed, p_c=p_c, points_per_day=p.points_per_day,
                             prefix=f"{preset}-{seed}", n_classes=p.n_classes)


CUE_LEVELS = (-2, -1, 0, 1, 2)


def make_cue_dataset(n_samples: int = 400, seed: int = 0, l_in: int = 16, l_out: int = 4,
                     noise: float = 1.0, scale: float = 3.0, p_c: float = 1.0,
                     domain: str = "generic", train_fraction: float = 0.8) -> List[MultiModalSample]:
    """Independent noisy level-shift windows.

    ``x_in`` is pure noise around a random level; ``x_out`` adds a shift in
    ``{-2, -1, 0, 1, 2} * scale * noise`` that is invisible in ``x_in``. The
    bulletin's near-term phrase buckets that shift, so only the text tells
    a model where the future level sits.
    """
    if n_samples < 2:
        raise InsufficientDataError("cue dataset needs at least 2 samples")
    rng = np.random.default_rng(seed)
    n_train = int(math.floor(train_fraction * n_samples))
    out = []
    for i in range(n_samples):
        level = rng.normal(0.0, 2.0)
        shift = rng.choice(CUE_LEVELS) * scale * noise
        x_in = level + noise * rng.standard_normal(l_in)
        x_out = level + shift + noise * rng.standard_normal(l_out)
        s = make_sample(i, x_in, x_out, domain=domain, seed=seed, p_c=p_c, prefix=f"cue-{seed}")
        s.split = "train" if i < n_train else "test"
        out.append(s)
    return out


# -- I/O --------------------------------------------------------------------------

def write_samples(path, samples: Sequence[MultiModalSample]) -> int:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()))
            fh.write("\n")
    return len(samples)


def read_samples(path) -> List[MultiModalSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            out.append(MultiModalSample.from_json(obj))
    return out


def load_series_csv(path) -> np.ndarray:
    """Headerless CSV, one column per channel; a single column gives a 1-D series."""
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return arr[:, 0] if arr.shape[1] == 1 else arr


def split_samples(samples: Sequence[MultiModalSample]):
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test
