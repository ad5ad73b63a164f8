import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmdistill import diffengine as de
from wmdistill.diffengine.tensor import conv2d_reference

from gradient_cases import OP_CASES, TOLERANCE


@pytest.mark.parametrize("name,fn,inputs,max_coords", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradient_matches_finite_differences(name, fn, inputs, max_coords):
    errs = de.check_gradients(fn, inputs, max_coords=max_coords)
    assert max(errs) < TOLERANCE, errs


@settings(max_examples=20, deadline=None)
@given(
    h=st.integers(1, 7), w=st.integers(1, 7), c=st.integers(1, 3), o=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]), seed=st.integers(0, 10_000),
)
def test_conv2d_matches_reference(h, w, c, o, k, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, h, w, c))
    wt = rng.standard_normal((k, k, c, o))
    b = rng.standard_normal(o)
    got = de.conv2d(de.Tensor(x), de.Tensor(wt), de.Tensor(b), stride=stride).data
    assert np.allclose(got, conv2d_reference(x, wt, b, stride), atol=1e-10)


def test_straight_through_gradient_is_identity():
    x = de.Tensor(np.linspace(-1, 1, 7), requires_grad=True)
    out = de.straight_through(lambda a: np.round(a * 4) / 4, x)
    assert np.allclose(out.data, np.round(x.data * 4) / 4)
    de.sum_over_axes(out).backward()
    assert np.array_equal(x.grad, np.ones(7))


def test_straight_through_rejects_shape_change():
    with pytest.raises(ValueError):
        de.straight_through(lambda a: a[:2], de.Tensor(np.zeros(4)))


def test_non_finite_forward_raises():
    with pytest.raises(de.NonFiniteError):
        de.log(de.Tensor(np.array([-1.0])))


def test_large_finite_values_are_not_flagged():
    big = de.Tensor(np.full(8, 3e38, np.float32))
    assert np.all(np.isfinite((big * 1.0).data))
    with pytest.raises(de.NonFiniteError), np.errstate(over="ignore"):
        big * 10.0


def test_second_backward_raises():
    x = de.Tensor(np.ones(3), requires_grad=True)
    y = de.sum_over_axes(x * 2.0)
    y.backward()
    with pytest.raises(de.GraphConsumedError):
        y.backward()


def test_gradients_accumulate_across_uses():
    x = de.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad_records_nothing():
    x = de.Tensor(np.ones(3), requires_grad=True)
    with de.no_grad():
        y = de.sum_over_axes(x * 2.0)
    assert not y.requires_grad
    y.backward()
    assert x.grad is None


def test_stop_gradient_blocks_path():
    x = de.Tensor(np.ones(3), requires_grad=True)
    y = de.sum_over_axes(de.stop_gradient(x) * x)
    y.backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_requires_scalar():
    x = de.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_adam_minimises_quadratic():
    p = de.NetworkParams()
    p.add("w", np.array([3.0, -2.0]))
    opt = de.OptimizerState(lr=0.1)
    for _ in range(300):
        de.sum_over_axes(de.square(p["w"])).backward()
        de.adam_step(p, opt)
    assert np.all(np.abs(p["w"].data) < 1e-2)


def test_adam_first_step_size_is_lr():
    p = de.NetworkParams()
    p.add("w", np.array([1.0, -1.0]))
    de.sum_over_axes(p["w"] * 5.0).backward()
    de.adam_step(p, de.OptimizerState(lr=0.01))
    assert np.allclose(p["w"].data, [0.99, -1.01], atol=1e-6)


def test_adam_missing_gradient():
    p = de.NetworkParams()
    p.add("a", np.ones(2))
    p.add("b", np.ones(2))
    de.sum_over_axes(p["a"]).backward()
    with pytest.raises(de.MissingGradientError):
        de.adam_step(p, de.OptimizerState())


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = de.NetworkParams()
    p.add("enc.w", rng.standard_normal((3, 3, 2, 4)))
    p.add("enc.b", rng.standard_normal(4), requires_grad=False)
    path = tmp_path / "p.ckpt"
    p.save(path)
    q = de.NetworkParams.load(path)
    assert list(q) == list(p)
    assert q.checksum() == p.checksum()
    for name in p:
        assert np.array_equal(p[name].data, q[name].data)


def test_params_reject_bad_blob(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(de.CheckpointError):
        de.NetworkParams.load(path)


def test_params_shapes_are_fixed():
    p = de.NetworkParams()
    p.add("w", np.zeros(3))
    with pytest.raises(ValueError):
        p.assign("w", np.zeros(4))
    with pytest.raises(KeyError):
        p.add("w", np.zeros(3))
