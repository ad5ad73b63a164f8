import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmdistill import metrics as mt
from wmdistill.dsp import StftConfig
from wmdistill.watermark_net import (
    STUDENT_CONFIG,
    TEACHER_CONFIG,
    ModelConfig,
    WatermarkModel,
    init_params,
    int_to_bits,
)

TINY = ModelConfig(n_blocks=1, channels=4, subnet_depth=2, stft=StftConfig(fft_size=64, hop=32))

bitvec = st.lists(st.integers(0, 1), min_size=1, max_size=32)


def test_ber_examples():
    assert mt.ber(np.ones(16), np.ones(16)) == 0.0
    assert mt.ber([1, 0, 1, 1, 0], [1, 0, 0, 1, 0]) == pytest.approx(0.2)
    a = np.array([1, 0, 1, 1])
    assert mt.ber(a, 1 - a) == 1.0
    with pytest.raises(ValueError):
        mt.ber([1, 0], [1])


@given(st.data())
def test_ber_symmetric_and_triangle(data):
    n = data.draw(st.integers(1, 32))
    a, b, c = (np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))) for _ in range(3))
    assert mt.ber(a, b) == mt.ber(b, a)
    assert mt.ber(a, c) <= mt.ber(a, b) + mt.ber(b, c) + 1e-12


def test_snr_examples():
    x = np.random.default_rng(0).standard_normal(1000)
    assert mt.snr_db(x, x + 0.1 * x) == pytest.approx(20.0)
    assert mt.snr_db(x, x) == math.inf
    n = np.random.default_rng(1).standard_normal(1000)
    n *= np.linalg.norm(x) / 100 / np.linalg.norm(n)
    assert mt.snr_db(x, x + n) == pytest.approx(40.0)
    with pytest.raises(ValueError):
        mt.snr_db(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        mt.snr_db(x, x[:-1])


def _with_sync_matches(k: int, sync=0xA6):
    bits = np.concatenate([int_to_bits(sync, 8), np.zeros(8, dtype=np.int64)])
    bits[: 8 - k] ^= 1
    return bits


@pytest.mark.parametrize("k,expected", [(8, True), (7, True), (6, False), (0, False)])
def test_sync_rule(k, expected):
    r = mt.decide(_with_sync_matches(k))
    assert r.sync_matches == k and r.is_watermarked is expected
    assert r.payload.size == 8


def test_decide_threshold_range():
    with pytest.raises(ValueError):
        mt.decide(np.zeros(16), threshold=9)


@settings(max_examples=30)
@given(st.lists(st.lists(st.integers(0, 1), min_size=16, max_size=16), min_size=1, max_size=20))
def test_raising_threshold_never_adds_positives(rows):
    positives = [sum(mt.decide(r, threshold=t).is_watermarked for r in rows) for t in range(9)]
    assert all(a >= b for a, b in zip(positives, positives[1:]))


def test_exact_false_positive_rate():
    assert mt.false_positive_rate() == 9 / 256
    assert mt.false_positive_rate(8, 8) == 1 / 256
    assert mt.false_positive_rate(8, 0) == 1.0


@given(st.lists(st.tuples(st.booleans(), st.booleans()), max_size=60))
def test_f1_identity(pairs):
    c = mt.Counts()
    for p, a in pairs:
        c.add(p, a)
    assert c.tp + c.fp + c.fn + c.tn == len(pairs)
    denom = 2 * c.tp + c.fp + c.fn
    assert c.f1 == (2 * c.tp / denom if denom else 0.0)


def test_detect_rejects_short_clip():
    model = WatermarkModel.teacher(init_params(TINY), TINY)
    with pytest.raises(mt.ClipTooShort):
        mt.detect(np.zeros(10), model)


def test_untrained_evaluation_near_chance():
    model = WatermarkModel.teacher(init_params(TINY, seed=0, identity=False), TINY)
    clips = np.random.default_rng(2).uniform(-0.5, 0.5, (12, 1600))
    rep = mt.evaluate(model, clips, attacks=("ND", "AS"), seed=1)
    n_bits = 12 * TINY.n_bits
    half_width = 3 * math.sqrt(0.25 / n_bits)
    # random-init decoders are biased per bit; check the mean sits inside a generous chance band
    assert abs(rep.mean_ber - 0.5) < max(half_width, 0.25)
    d = rep.to_dict()
    assert d["schema"] == "wmdistill-eval/1"
    assert set(d["per_attack_ber"]) == {"ND", "AS"}
    assert d["mean_ber"] == pytest.approx(np.mean(list(d["per_attack_ber"].values())))
    assert sum(d["counts"].values()) == 2 * 2 * 12
    json.loads(rep.to_json())
    table = rep.to_table().splitlines()
    assert table[0].split()[:3] == ["MEAN", "ND", "AS"]


def test_flops_reduction_matches_reference_band():
    t, s = mt.estimate_flops(TEACHER_CONFIG), mt.estimate_flops(STUDENT_CONFIG)
    assert 0.85 <= 1 - s / t <= 0.97
    assert t / s >= 8


def test_flops_channel_law_and_zero_blocks():
    base = mt.estimate_flops(STUDENT_CONFIG)
    doubled = mt.estimate_flops(dataclasses.replace(STUDENT_CONFIG, channels=32))
    assert 3.0 < doubled / base < 4.2
    assert mt.estimate_flops(dataclasses.replace(STUDENT_CONFIG, n_blocks=0)) > 0


@settings(max_examples=25, deadline=None)
@given(blocks=st.integers(0, 10), ch=st.integers(1, 64))
def test_flops_strictly_monotone(blocks, ch):
    f = mt.estimate_flops(ModelConfig(n_blocks=blocks, channels=ch))
    assert mt.estimate_flops(ModelConfig(n_blocks=blocks + 1, channels=ch)) > f
    if blocks > 0:
        assert mt.estimate_flops(ModelConfig(n_blocks=blocks, channels=ch + 1)) > f


def test_bench_report_contract():
    model = WatermarkModel.teacher(init_params(TINY), TINY)
    rep = mt.bench_rtf(model, seconds_of_audio=0.2, repeats=5)
    assert rep.threads == 1 and rep.rtf > 0 and len(rep.rtf_runs) == 5
    assert rep.rtf == sorted(rep.rtf_runs)[2]
    assert json.loads(rep.to_json())["schema"] == "wmdistill-bench/1"
    with pytest.raises(ValueError):
        mt.bench_rtf(model, repeats=0)
