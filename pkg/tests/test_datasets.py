import math
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mome import datasets as ds
from mome.errors import ConfigError, InsufficientDataError, UndefinedReturnError


# -- windows / split ----------------------------------------------------------------

def test_window_examples():
    assert len(ds.slide_windows(np.arange(10.0), 7, 1, 1)) == 3
    assert len(ds.slide_windows(np.arange(10.0), 7, 1, 10)) == 1
    for xi, xo in ds.slide_windows(np.arange(1.0, 31.0), 5, 3, 2):
        assert xo[0] == xi[-1] + 1
    with pytest.raises(InsufficientDataError):
        ds.slide_windows(np.arange(5.0), 4, 2)


@given(st.integers(8, 200), st.integers(1, 20), st.integers(1, 10), st.integers(1, 5))
def test_window_count_formula(t, l_in, l_out, s):
    if t < l_in + l_out:
        return
    assert len(ds.slide_windows(np.zeros(t), l_in, l_out, s)) == (t - l_in - l_out) // s + 1


def test_split_examples():
    plan = ds.split_with_gap(100, 7, 1)
    assert plan.train_idx[0] + 1 == 1 and plan.train_idx[-1] + 1 == 80
    assert plan.test_idx[0] + 1 == 87 and plan.test_idx[-1] + 1 == 100
    with pytest.raises(InsufficientDataError):
        ds.split_with_gap(10, 9, 1)


@given(st.integers(2, 500), st.integers(1, 50), st.integers(1, 50))
def test_split_invariants(n, l_in, l_out):
    try:
        plan = ds.split_with_gap(n, l_in, l_out)
    except InsufficientDataError:
        return
    assert not set(plan.train_idx) & set(plan.test_idx)
    assert plan.train_idx.max() + plan.gap <= plan.test_idx.min()


@given(st.integers(30, 400), st.integers(2, 30), st.integers(1, 10), st.integers(1, 8))
def test_leak_free_gap_has_no_temporal_overlap(t, l_in, l_out, s):
    starts = ds.window_starts(t, l_in, l_out, s)
    try:
        plan = ds.split_with_gap(starts.size, l_in, l_out, gap=ds.leak_free_gap(l_in, l_out, s))
    except InsufficientDataError:
        return
    train_steps = set()
    for i in plan.train_idx:
        train_steps.update(range(starts[i], starts[i] + l_in + l_out))
    for i in plan.test_idx:
        assert not train_steps & set(range(starts[i], starts[i] + l_in + l_out))


# -- metrics -------------------------------------------------------------------------

def test_metrics_examples():
    m = ds.compute_metrics(np.full(8, 3.0), np.full(2, 3.0))
    assert m.narrative_near == 0 and m.z_past == 0 and m.residual_vol == 0 and m.z_future == 0
    line = ds.compute_metrics(np.arange(10.0) * 0.5 + 1, [7.0])
    assert line.r2 == 1.0 and line.residual_vol < 1e-12
    m = ds.compute_metrics(np.arange(8.0), [10.0])
    assert m.narrative_near == 3.5
    with pytest.raises(InsufficientDataError):
        ds.compute_metrics([1.0, 2.0], [3.0])


def test_metrics_oracle(rng):
    x_in, x_out = rng.standard_normal(20), rng.standard_normal(5)
    m = ds.compute_metrics(x_in, x_out)
    q75, q25 = np.percentile(x_in, [75, 25])
    sigma = np.median([x_in.std(), (q75 - q25) / 1.349, 1.4826 * np.median(np.abs(x_in - np.median(x_in)))])
    assert m.sigma == pytest.approx(sigma, rel=1e-14)
    slope, icpt = np.polyfit(np.arange(20), x_in, 1)
    resid = x_in - (slope * np.arange(20) + icpt)
    assert m.z_past == pytest.approx(slope / sigma, rel=1e-10)
    assert m.residual_vol == pytest.approx(resid.std() / sigma, rel=1e-9)
    assert m.r2 == pytest.approx(1 - resid @ resid / np.sum((x_in - x_in.mean()) ** 2), rel=1e-10)
    assert m.nmad == pytest.approx(np.mean(np.abs(np.diff(x_in))) / sigma, rel=1e-14)
    assert m.z_future == pytest.approx(np.polyfit(np.arange(5), x_out, 1)[0] / sigma, rel=1e-10)
    assert m.narrative_near == pytest.approx(x_out.mean() - x_in[-5:].mean(), rel=1e-14)


# -- flipping --------------------------------------------------------------------------

def test_flip_extremes(rng):
    m = ds.compute_metrics(rng.standard_normal(10), rng.standard_normal(3))
    for _ in range(20):
        assert ds.flip_consistency(m, 1.0, rng) == (m, 1)
        flipped, flag = ds.flip_consistency(m, 0.0, rng)
        assert flag == 0 and flipped.z_past == -m.z_past and flipped.narrative_near == -m.narrative_near
    with pytest.raises(ConfigError):
        ds.flip_consistency(m, 1.5, rng)


def test_flip_rate():
    rng = np.random.default_rng(42)
    m = ds.compute_metrics(np.arange(10.0), [3.0])
    flags = [ds.flip_consistency(m, 0.8, rng)[1] for _ in range(10_000)]
    assert abs(np.mean(flags) - 0.8) <= 0.03


@given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_flip_involution(a, zp, zf):
    m = ds.MetricsRecord(a, 1.0, zp, 0.5, 0.5, 0.5, zf, 10, 3)
    assert ds.flip_metrics(ds.flip_metrics(m)) == m


# -- bulletins ---------------------------------------------------------------------------

def _metrics(zp=0.0, near=0.0, zf=0.0, n_in=11, n_out=5):
    return ds.MetricsRecord(near, 1.0, zp, 0.3, 0.8, 0.4, zf, n_in, n_out)


@pytest.mark.parametrize("domain", ds.DOMAINS)
def test_bulletin_bucket_phrases(domain):
    table = ds.PHRASES[domain]
    assert table["tendency"][-2] in ds.render_bulletin(_metrics(zp=-0.5), domain)
    assert table["tendency"][2] in ds.render_bulletin(_metrics(zp=0.5), domain)
    assert table["tendency"][0] in ds.render_bulletin(_metrics(zp=0.01), domain)
    assert table["near"][1] in ds.render_bulletin(_metrics(near=3.0), domain)


@given(st.floats(-5, 5), st.floats(-20, 20), st.floats(-5, 5), st.sampled_from(ds.DOMAINS), st.integers(0, 99))
def test_bulletin_rules(zp, near, zf, domain, seed):
    m = _metrics(zp, near, zf)
    text = ds.render_bulletin(m, domain, np.random.default_rng(seed))
    assert not re.search(r"\d", text)
    assert ds.keyword_blocking(text) == text
    # sign of the rendered tendency phrase matches sign of z_past
    table = ds.PHRASES[domain]["tendency"]
    found = [b for b, phrase in table.items() if phrase in text]
    assert len(found) == 1 and np.sign(found[0]) in (np.sign(zp), 0)
    mirrored = ds.render_bulletin(ds.flip_metrics(m), domain, np.random.default_rng(seed))
    assert table[-found[0]] in mirrored


def test_all_phrases_avoid_blocklist_and_digits():
    for table in ds.PHRASES.values():
        for key, val in table.items():
            items = val.values() if isinstance(val, dict) else (val if isinstance(val, tuple) else [val])
            for phrase in items:
                assert ds.keyword_blocking(phrase + ".") == phrase + "."
                assert not re.search(r"\d", phrase)


# -- keyword blocking ----------------------------------------------------------------------

def test_blocking_examples():
    assert ds.keyword_blocking("Rain will come.") == ""
    assert ds.keyword_blocking("Skies  stayed clear. Wind eased.") == "Skies  stayed clear. Wind eased."
    assert ds.keyword_blocking("Calm day. The OUTLOOK is grim! Prices Expected   to rise. Willow trees swayed.") \
        == "Calm day. Willow trees swayed."
    assert ds.load_blocklist()["version"] >= 1


@given(st.lists(st.sampled_from(list("abw. !?ilWL") + [" will ", " tomorrow", " next week", "."]), max_size=40))
def test_blocking_idempotent(parts):
    text = "".join(parts)
    once = ds.keyword_blocking(text)
    assert ds.keyword_blocking(once) == once


# -- trend labels ---------------------------------------------------------------------------

def test_finance_labels():
    assert ds.finance_trend_label([100, 105]) == 4 and ds.finance_trend_label([100, 105], 3) == 2
    assert ds.finance_trend_label([100, 100]) == 2
    assert ds.finance_trend_label([100, 97]) == 1 and ds.finance_trend_label([100, 97], 3) == 0
    with pytest.raises(UndefinedReturnError):
        ds.finance_trend_label([0.0, 1.0])


@pytest.mark.parametrize("delta,five,three", [(-0.04, 0, 0), (-0.02, 1, 0), (0.0, 2, 1), (0.02, 3, 2), (0.04, 4, 2),
                                              (-0.0400001, 0, 0), (-0.0199999, 2, 1), (0.0199999, 2, 1),
                                              (0.0399999, 3, 2)])
def test_finance_boundaries(delta, five, three):
    assert ds.bin_finance_change(delta, 5) == five
    assert ds.bin_finance_change(delta, 3) == three


def test_finance_boundaries_through_prices():
    for end, five in ((96, 0), (98, 1), (100, 2), (102, 3), (104, 4)):
        assert ds.finance_trend_label([100.0, float(end)]) == five


@given(st.floats(-10, 10, allow_nan=False))
def test_binning_total(delta):
    assert ds.bin_finance_change(delta, 5) in range(5)
    assert ds.bin_finance_change(delta, 3) == ds.merge_to_3way(ds.bin_finance_change(delta, 5))


def test_weather_labels():
    flat = np.full(96, 20.0)
    assert ds.weather_trend_labels(flat, np.full(24, 20.0), 24) == (1, 1)
    assert ds.weather_trend_labels(flat, np.full(24, 18.0), 24)[1] == 0
    rising = np.repeat(20 + 0.5 * np.arange(4), 24)
    assert ds.weather_trend_labels(rising, np.full(24, 21.5), 24)[0] == 2
    with pytest.raises(InsufficientDataError):
        ds.weather_trend_labels(np.ones(30), np.ones(24), 24)


@pytest.mark.parametrize("v,past,future", [(-1.5, 0, 1), (-0.25, 1, 1), (0.25, 1, 1), (1.5, 2, 1),
                                           (-1.5000001, 0, 0), (1.5000001, 2, 2)])
def test_weather_boundaries(v, past, future):
    assert ds.bin_weather_past(v) == past
    assert ds.bin_weather_future(v) == future


# -- builders / io -----------------------------------------------------------------------------

@pytest.mark.parametrize("preset", sorted(ds.PRESETS))
def test_presets_build(preset):
    samples = ds.build_preset_dataset(preset, seed=3)
    p = ds.PRESETS[preset]
    train, test = ds.split_samples(samples)
    assert train and test
    assert all(len(s.x_in) == p.l_in and len(s.x_out) == p.l_out for s in samples)
    if p.domain in ("finance", "weather"):
        assert all(s.trend_label is not None for s in samples)


def test_dataset_deterministic_and_roundtrip(tmp_path):
    a = ds.build_preset_dataset("timemmd-style", seed=5, n_windows=150)
    b = ds.build_preset_dataset("timemmd-style", seed=5, n_windows=150)
    assert [s.to_json() for s in a] == [s.to_json() for s in b]
    path = tmp_path / "d.jsonl"
    ds.write_samples(path, a)
    back = ds.read_samples(path)
    assert [s.to_json() for s in back] == [s.to_json() for s in a]


def test_cue_dataset_hides_shift_in_input():
    samples = ds.make_cue_dataset(300, seed=1)
    near = np.array([s.metrics.narrative_near for s in samples])
    bucket = np.array([ds.bulletin_buckets(s.metrics)["near"] for s in samples])
    # the text bucket tracks the shift; the input window alone does not
    assert np.corrcoef(near, bucket)[0, 1] > 0.9
    x_mean_dev = np.array([s.x_in[-4:].mean() - s.x_in.mean() for s in samples])
    assert abs(np.corrcoef(x_mean_dev, near)[0, 1]) < 0.3
    assert all(s.consistency == 1 for s in samples)


def test_csv_ingest(tmp_path):
    p = tmp_path / "s.csv"
    np.savetxt(p, np.arange(60.0).reshape(30, 2), delimiter=",")
    assert ds.load_series_csv(p).shape == (30, 2)
    np.savetxt(p, np.arange(80.0), delimiter=",")
    series = ds.load_series_csv(p)
    assert series.shape == (80,)
    samples = ds.build_from_series(series, domain="generic", l_in=5, l_out=2, stride=1)
    assert samples and {s.split for s in samples} == {"train", "test"}
