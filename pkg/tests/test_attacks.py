import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmdistill import attacks as atk
from wmdistill import diffengine as de
from wmdistill.dsp import AudioClip

from attack_checks import CHECKS

SR = 24000


@pytest.mark.parametrize("kind", atk.KINDS)
def test_parameter_check(kind):
    CHECKS[kind]()


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(atk.KINDS), n=st.integers(1200, 9000), seed=st.integers(0, 1000))
def test_length_preserved(kind, n, seed):
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    assert atk.apply_array(atk.AttackSpec(kind, seed=seed), x, SR).shape == (n,)


@settings(max_examples=15, deadline=None)
@given(kind=st.sampled_from(["GN", "RA"]), seed=st.integers(0, 10_000))
def test_stochastic_kinds_are_seeded(kind, seed):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 3000)
    a = atk.apply_array(atk.AttackSpec(kind, seed=seed), x, SR)
    b = atk.apply_array(atk.AttackSpec(kind, seed=seed), x, SR)
    c = atk.apply_array(atk.AttackSpec(kind, seed=seed + 1), x, SR)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_batch_rows_match_single():
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (3, 4000))
    for kind in atk.KINDS:
        spec = atk.AttackSpec(kind, seed=3)
        batch = atk.apply_array(spec, x, SR)
        if kind == "GN":
            continue  # noise is drawn for the whole batch at once
        for i in range(3):
            assert np.allclose(batch[i], atk.apply_array(spec, x[i], SR), atol=1e-9), kind


def test_apply_wraps_clip():
    clip = AudioClip(np.zeros(3000) + 0.1)
    out = atk.apply(atk.AttackSpec("AS"), clip)
    assert out.length_restored and out.applied.kind == "AS"
    assert np.allclose(out.audio.samples, 0.08)


def test_spec_validation():
    with pytest.raises(atk.AttackError):
        atk.AttackSpec("XX")
    with pytest.raises(atk.AttackError):
        atk.AttackSpec("GN", {"bogus": 1})
    with pytest.raises(atk.AttackError):
        atk.AttackSpec("SS", {"factor": 1.2})
    with pytest.raises(atk.AttackError):
        atk.AttackSpec("QT", grad_policy="differentiable")
    assert atk.AttackSpec("mp3").kind == "CODEC"


def test_downsample_needs_lower_rate():
    with pytest.raises(atk.AttackError):
        atk.apply_array(atk.AttackSpec("DS", {"rate": 48000}), np.zeros(3000), SR)


def test_external_codec_hook(tmp_path):
    x = np.random.default_rng(2).uniform(-0.5, 0.5, 3000)
    spec = atk.AttackSpec("CODEC", {"external_cmd": "cp {input} {output}"})
    y = atk.apply_array(spec, x, SR)
    assert np.max(np.abs(y - x)) <= 1 / 32768
    missing = atk.AttackSpec("CODEC", {"external_cmd": "no-such-encoder-binary {input} {output}"})
    with pytest.raises(atk.AttackError):
        atk.apply_array(missing, x, SR)
    failing = atk.AttackSpec("CODEC", {"external_cmd": "false {input} {output}"})
    with pytest.raises(atk.AttackError):
        atk.apply_array(failing, x, SR)


# ---------------------------------------------------------------- gradients


def _grad_of_sum(spec, x):
    t = de.Tensor(x, requires_grad=True)
    de.sum_over_axes(atk.apply_differentiable(spec, t, SR)).backward()
    return t.grad


def test_amplitude_gradient_is_gain():
    assert np.allclose(_grad_of_sum(atk.AttackSpec("AS", {"gain": 0.7}), np.ones(50) * 0.1), 0.7)


def test_noise_gradient_is_identity():
    assert np.allclose(_grad_of_sum(atk.AttackSpec("GN"), np.linspace(-0.5, 0.5, 60)), 1.0)


@pytest.mark.parametrize("kind", sorted(set(atk.KINDS) - atk.DIFFERENTIABLE))
def test_straight_through_kinds(kind):
    x = np.random.default_rng(3).uniform(-0.5, 0.5, 3000)
    spec = atk.AttackSpec(kind)
    assert spec.grad_policy == "straight_through"
    t = de.Tensor(x, requires_grad=True)
    out = atk.apply_differentiable(spec, t, SR)
    assert np.allclose(out.data, atk.apply_array(spec, x, SR))
    de.sum_over_axes(out).backward()
    assert np.array_equal(t.grad, np.ones_like(x))


@pytest.mark.parametrize("kind", ["LP", "EA", "RA"])
def test_differentiable_forward_matches_numpy(kind):
    x = np.random.default_rng(4).uniform(-0.5, 0.5, 5000)
    spec = atk.AttackSpec(kind, seed=2)
    assert np.allclose(atk.apply_differentiable(spec, de.Tensor(x), SR).data, atk.apply_array(spec, x, SR))


# ---------------------------------------------------------------- sampling


def test_menu_with_only_nd():
    rng = np.random.default_rng(0)
    assert {atk.sample_attack(rng, {"ND": 1.0}).kind for _ in range(20)} == {"ND"}


def test_uniform_menu_frequencies():
    rng = np.random.default_rng(11)
    draws = [atk.sample_attack(rng, atk.uniform_menu()).kind for _ in range(14_000)]
    p = 1 / 14
    sigma = np.sqrt(14_000 * p * (1 - p))
    for kind in atk.KINDS:
        assert abs(draws.count(kind) - 1000) <= 3 * sigma, kind


def test_sampling_is_reproducible():
    menu = atk.uniform_menu()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [atk.sample_attack(r1, menu) for _ in range(50)] == [atk.sample_attack(r2, menu) for _ in range(50)]


def test_menu_errors():
    with pytest.raises(atk.AttackError):
        atk.normalize_menu({})
    with pytest.raises(atk.AttackError):
        atk.normalize_menu({"ND": 0.5, "GN": 0.4})
    with pytest.raises(atk.AttackError):
        atk.normalize_menu({"GN": 1.0})
