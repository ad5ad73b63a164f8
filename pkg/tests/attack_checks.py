"""One parameter check per attack kind, each against an independent oracle.

Shared by the unit tests and the acceptance suite.  Every check raises
AssertionError on failure and returns a short description on success.
"""
import numpy as np

from wmdistill import attacks as atk

SR = 24000
_t = np.arange(SR) / SR


def sine(freq, amp=0.9, n=SR):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / SR)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def dominant_freq(x):
    w = np.hanning(x.size)
    spec = np.abs(np.fft.rfft(x * w, n=8 * x.size))
    return float(np.argmax(spec) * SR / (8 * x.size))


def run(kind, x, **params):
    return atk.apply_array(atk.AttackSpec(kind, params, seed=7), x, SR)


def check_nd():
    x = np.random.default_rng(0).uniform(-1, 1, 5000)
    assert np.array_equal(run("ND", x), x)
    return "bit-identical"


def check_gn():
    x = np.random.default_rng(1).uniform(-1, 1, SR)
    for target in (10.0, 20.0, 30.0):
        y = run("GN", x, snr_db=target)
        measured = 10 * np.log10(np.sum(x**2) / np.sum((y - x) ** 2))
        assert abs(measured - target) <= 0.5, (target, measured)
    assert np.array_equal(run("GN", x), run("GN", x))
    return "SNR within 0.5 dB at 10/20/30 dB"


def check_mf():
    x = np.random.default_rng(2).standard_normal(1000)
    padded = np.concatenate([x[:1], x, x[-1:]])
    oracle = np.median(np.stack([padded[:-2], padded[1:-1], padded[2:]]), axis=0)
    assert np.allclose(run("MF", x), oracle)
    return "matches 3-tap running median"


def check_codec():
    high, low = sine(11000, 0.5), sine(1000, 0.5)
    assert rms(run("CODEC", high)[2000:-2000]) < 0.01 * rms(high)
    y = run("CODEC", low)
    assert abs(rms(y[2000:-2000]) / rms(low[2000:-2000]) - 1) < 0.05
    return "11 kHz removed, 1 kHz kept"


def check_lp():
    six, one = sine(6000), sine(1000)
    assert rms(run("LP", six)) < 0.01 * rms(six)
    assert abs(rms(run("LP", one)) / rms(one) - 1) < 0.05
    return "6 kHz residual < 1%, 1 kHz within 5%"


def check_ds():
    two, six = sine(2000), sine(6000)
    y = run("DS", two)
    assert np.corrcoef(two[200:-200], y[200:-200])[0, 1] > 0.99
    assert rms(run("DS", six)[200:-200]) < 0.01 * rms(six)
    inner = atk.resample_array(two, SR, 8000)
    assert inner.size == 8000
    return "8 kHz bottleneck"


def check_qt():
    step = 2.0 / 511
    oracle = np.round((0.5004 + 1) / step) * step - 1
    assert run("QT", np.array([0.5004]))[0] == oracle
    levels = np.unique(run("QT", np.linspace(-1, 1, 100_000)))
    assert levels.size == 512
    assert np.allclose(np.diff(levels), step)
    return "512 levels, step 2/511"


def check_as():
    x = np.random.default_rng(3).uniform(-1, 1, 100)
    assert np.array_equal(run("AS", x, gain=1.0), x)
    assert np.allclose(run("AS", x), 0.8 * x)
    return "gain 0.8"


def check_ea():
    x = np.random.default_rng(4).uniform(-1, 1, SR)
    y = run("EA", x)
    delay = int(round(0.100 * SR))
    assert delay == 2400
    assert np.allclose(y[:delay], x[:delay])
    assert np.allclose(y[delay:], x[delay:] + 0.3 * x[:-delay])
    return "delay 2400 samples, gain 0.3"


def _speed(kind, factor):
    for n in (SR, 12345, 7001):
        assert atk.speed_change(np.zeros(n), factor).size == round(n / factor)
        assert run(kind, np.zeros(n)).size == n
    f = dominant_freq(run(kind, sine(1000))[: int(SR * min(1, 1 / factor)) - 100])
    assert abs(f - 1000 * factor) < 10, f
    return f"length round(L/{factor}), 1 kHz -> {f:.0f} Hz"


def check_ss():
    return _speed("SS", 0.9)


def check_fs():
    return _speed("FS", 1.1)


def check_ra():
    h = atk.reverb_ir(0.2, SR, 4800, seed=3)
    assert abs(np.linalg.norm(h) - 1) < 1e-12
    # fit the energy decay of many tails: slope of log10 energy vs time
    tails = np.stack([atk.reverb_ir(0.2, SR, 4800, seed=s)[1:] for s in range(50)])
    t = np.arange(1, 4800) / SR
    energy_db = 10 * np.log10(np.mean(tails**2, axis=0))
    slope = np.polyfit(t, energy_db, 1)[0]
    rt60 = -60.0 / slope
    assert abs(rt60 - 0.2) <= 0.05 * 0.2, rt60
    x = np.random.default_rng(5).uniform(-1, 1, 3000)
    assert run("RA", x).size == 3000
    return f"fitted RT60 {rt60 * 1000:.1f} ms"


def _pitch(kind, factor):
    y = run(kind, sine(1000, n=SR))
    assert y.size == SR
    f = dominant_freq(y[2000:-2000])
    assert abs(f - 1000 * factor) < 15, f
    return f"1 kHz -> {f:.0f} Hz at constant length"


def check_pu():
    return _pitch("PU", 1.1)


def check_pd():
    return _pitch("PD", 0.9)


CHECKS = {
    "ND": check_nd, "GN": check_gn, "MF": check_mf, "CODEC": check_codec, "LP": check_lp, "DS": check_ds,
    "QT": check_qt, "AS": check_as, "EA": check_ea, "SS": check_ss, "FS": check_fs, "RA": check_ra,
    "PU": check_pu, "PD": check_pd,
}
