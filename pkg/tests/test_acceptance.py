"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Criteria 6-8 train desk-scale models on first run (a few CPU hours) and
reuse the cached checkpoints afterwards; see desk_runs.py.
"""
import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import stats

import desk_runs
from acceptance_log import record
from attack_checks import CHECKS
from gradient_cases import LOSS_CASES, OP_CASES, TOLERANCE
from wmdistill import attacks as atk
from wmdistill import diffengine as de
from wmdistill.config import PkdSchedule
from wmdistill.dsp import StftConfig, istft_array, stft_array, stft_tensor
from wmdistill.metrics import bench_rtf, decide, estimate_flops, evaluate, false_positive_rate
from wmdistill.training import combine_outputs, lambda_of
from wmdistill.watermark_net import (
    STUDENT_CONFIG,
    TEACHER_CONFIG,
    ModelConfig,
    WatermarkModel,
    build_message_map,
    encode,
    init_params,
    inn_forward,
    inn_inverse,
)

pytestmark = pytest.mark.acceptance
SR = 24000


def _spec_and_map(cfg, params, seed=0, B=2, seconds=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.8, 0.8, (B, int(seconds * SR))).astype(np.float32)
    X = stft_tensor(de.Tensor(x), cfg.stft)
    M = build_message_map(rng.integers(0, 2, (B, cfg.n_bits)), cfg.n_freq, X.shape[1], params, cfg)
    return X, M


def test_c01_stft_round_trip():
    cfg = StftConfig()
    x = np.random.default_rng(1).uniform(-1, 1, (100, SR))
    t0 = time.perf_counter()
    y = istft_array(stft_array(x, cfg), cfg, SR)
    elapsed = time.perf_counter() - t0
    inner = slice(cfg.fft_size, -cfg.fft_size)
    err = np.max(np.linalg.norm(y[:, inner] - x[:, inner], axis=1) / np.linalg.norm(x[:, inner], axis=1))
    ok = err < 1e-6 and elapsed < 1.0
    record(1, "STFT round trip", ok, f"max rel err {err:.2e} over 100 clips in {elapsed:.2f} s")
    assert ok


def test_c02_inn_invertibility():
    worst = {}
    for name, cfg in (("teacher", TEACHER_CONFIG), ("student", STUDENT_CONFIG)):
        params = init_params(cfg, seed=5, identity=False)
        X, M = _spec_and_map(cfg, params, seed=5)
        with de.no_grad():
            h, m = inn_forward(X, M, params, cfg)
            Xr, Mr = inn_inverse(h, m, params, cfg)
        moved = float(np.max(np.abs(h.data - X.data)))
        assert moved > 1e-2, "random parameters should change the host"
        worst[name] = max(float(np.max(np.abs(Xr.data - X.data))), float(np.max(np.abs(Mr.data - M.data))))
    ok = max(worst.values()) < 1e-4
    record(2, "INN invertibility", ok, ", ".join(f"{k} max abs err {v:.1e}" for k, v in worst.items()))
    assert ok


def test_c03_gradient_suite():
    failures, worst = [], 0.0
    for name, fn, inputs, max_coords in OP_CASES + LOSS_CASES:
        err = max(de.check_gradients(fn, inputs, max_coords=max_coords))
        worst = max(worst, err)
        if not err < TOLERANCE:
            failures.append(f"{name}={err:.1e}")
    ok = not failures
    detail = f"{len(OP_CASES)} ops + {len(LOSS_CASES)} losses, worst rel err {worst:.1e}"
    record(3, "gradient suite", ok, detail + ("" if ok else "; failing " + ", ".join(failures)))
    assert ok


def test_c04_identity_start():
    exact = {}
    for name, cfg in (("teacher", TEACHER_CONFIG), ("student", STUDENT_CONFIG)):
        params = init_params(cfg, seed=9)
        X, M = _spec_and_map(cfg, params, seed=9)
        with de.no_grad():
            exact[name] = bool(np.array_equal(encode(X, M, params, cfg).data, X.data))
    ok = all(exact.values())
    record(4, "identity start", ok, ", ".join(f"{k} bit-exact={v}" for k, v in exact.items()))
    assert ok


def test_c05_schedule_and_degeneracies():
    s = PkdSchedule()
    l0, l40k = lambda_of(0, s), lambda_of(40_000, s)
    cfg_t = ModelConfig(n_blocks=4, channels=16)
    cfg_s = ModelConfig(n_blocks=2, channels=8)
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.5, 0.5, (2, SR // 2))
    bits = rng.integers(0, 2, (2, 16))
    x_t = WatermarkModel.teacher(init_params(cfg_t, 1, identity=False), cfg_t).embed_array(x, bits)
    x_s = WatermarkModel.teacher(init_params(cfg_s, 2, identity=False), cfg_s).embed_array(x, bits)
    teacher_eq = np.array_equal(combine_outputs(x_s, x_t, 0.0), x_t) and np.array_equal(
        combine_outputs(de.Tensor(x_s), de.Tensor(x_t), 0.0).data, x_t)
    dkd_eq = np.array_equal(combine_outputs(x_s, x_t, 1.0), x_s) and np.array_equal(
        combine_outputs(de.Tensor(x_s), de.Tensor(x_t), 1.0).data, x_s)
    ok = l0 == pytest.approx(0.1, abs=1e-15) and l40k == 1.0 and teacher_eq and dkd_eq
    record(5, "mixing schedule", ok,
           f"lambda(0)={l0:g}, lambda(40000)={l40k:g}, lam=0 teacher-exact={teacher_eq}, lam=1 student-exact={dkd_eq}")
    assert ok


@pytest.fixture(scope="module")
def desk_teacher():
    run_dir, info = desk_runs.teacher()
    return WatermarkModel.load(info["checkpoint"]), info


@pytest.fixture(scope="module")
def eval_clips():
    return desk_runs.eval_clips()


def test_c06_desk_teacher(desk_teacher, eval_clips):
    model, info = desk_teacher
    rep = evaluate(model, eval_clips, attacks=desk_runs.EVAL_ATTACKS, seed=11)
    b = rep.per_attack_ber
    hours = info["cpu_seconds"] / 3600
    checks = {
        "clean BER < 1%": b["ND"] < 0.01,
        "attacked BER < 10%": all(b[k] < 0.10 for k in ("GN", "AS", "LP", "EA")),
        "SNR > 25 dB": rep.snr_db > 25.0,
        "training <= 2 h CPU": hours <= 2.0,
    }
    ok = all(checks.values())
    detail = " ".join(f"{k}={v * 100:.2f}%" for k, v in b.items())
    detail += f" SNR={rep.snr_db:.1f} dB, train {hours:.2f} h CPU"
    missed = [k for k, v in checks.items() if not v]
    record(6, "desk-scale teacher", ok, detail + ("" if ok else "; missed: " + ", ".join(missed)))
    assert ok


def test_c07_progressive_beats_direct(eval_clips):
    means = {"pkd": [], "dkd": []}
    for seed in desk_runs.DISTILL_SEEDS:
        for tag, direct in (("pkd", False), ("dkd", True)):
            _, info = desk_runs.student(seed, direct)
            model = WatermarkModel.load(info["checkpoint"])
            means[tag].append(evaluate(model, eval_clips, attacks=desk_runs.EVAL_ATTACKS, seed=13).mean_ber)
    pkd, dkd = float(np.mean(means["pkd"])), float(np.mean(means["dkd"]))
    ok = pkd <= dkd
    per_seed = ", ".join(f"s{s}: {p * 100:.2f}/{d * 100:.2f}" for s, p, d in
                         zip(desk_runs.DISTILL_SEEDS, means["pkd"], means["dkd"]))
    record(7, "PKD vs DKD", ok, f"mean BER PKD {pkd * 100:.2f}% vs DKD {dkd * 100:.2f}% (per seed {per_seed})")
    assert ok


def test_c08_detection_rule(desk_teacher, eval_clips):
    p = false_positive_rate()
    n = 2000
    rng = np.random.default_rng(17)
    # bit-symmetric random decoder: every decoded bit is a fair coin
    hits = sum(decide(rng.integers(0, 2, 16)).is_watermarked for _ in range(n))
    lo, hi = stats.binom.ppf(0.025, n, p), stats.binom.ppf(0.975, n, p)
    fp_ok = p == 9 / 256 and lo <= hits <= hi
    model, _ = desk_teacher
    f1 = evaluate(model, eval_clips, attacks=("ND",), seed=19).f1
    ok = fp_ok and f1 > 0.95
    record(8, "detection rule", ok,
           f"exact FP {p:.5f} (9/256), empirical {hits}/{n} within [{lo:.0f}, {hi:.0f}]={fp_ok}; clean F1 {f1:.3f}")
    assert ok


def test_c09_flops():
    t, s = estimate_flops(TEACHER_CONFIG), estimate_flops(STUDENT_CONFIG)
    reduction = 1 - s / t
    monotone = True
    for blocks in range(0, 9):
        for ch in (4, 8, 16, 32, 64):
            f = estimate_flops(dataclasses.replace(STUDENT_CONFIG, n_blocks=blocks, channels=ch))
            monotone &= estimate_flops(dataclasses.replace(STUDENT_CONFIG, n_blocks=blocks + 1, channels=ch)) > f
            if blocks:
                monotone &= estimate_flops(dataclasses.replace(STUDENT_CONFIG, n_blocks=blocks, channels=ch + 1)) > f
    ok = 0.85 <= reduction <= 0.97 and monotone
    record(9, "FLOPs estimator", ok,
           f"teacher {t:.2f} vs student {s:.2f} GFLOP per audio second, reduction {reduction * 100:.1f}%, "
           f"monotone={monotone}")
    assert ok


def test_c10_rtf_ordering():
    rtf = {}
    for name, cfg in (("teacher", TEACHER_CONFIG), ("student", STUDENT_CONFIG)):
        model = WatermarkModel.teacher(init_params(cfg, seed=0, identity=False), cfg)
        rtf[name] = bench_rtf(model, seconds_of_audio=1.0, repeats=5).rtf
    ok = rtf["student"] < rtf["teacher"] < 1.0
    record(10, "RTF ordering", ok, f"single-thread RTF teacher {rtf['teacher']:.3f}, student {rtf['student']:.3f}")
    assert ok


def test_c11_attack_suite():
    results = {}
    for kind in atk.KINDS:
        try:
            results[kind] = CHECKS[kind]()
        except AssertionError as exc:
            results[kind] = f"FAILED {exc}"
    failed = [k for k, v in results.items() if v.startswith("FAILED")]
    ok = not failed and len(results) == 14
    record(11, "attack suite", ok, f"{14 - len(failed)}/14 kinds pass" + (f"; failing {failed}" if failed else ""))
    assert ok
