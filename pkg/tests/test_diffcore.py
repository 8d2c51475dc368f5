import numpy as np
import pytest

from lingrid import diffcore as dc
from lingrid.diffcore import ParamStore, Parameter, Tape, Tensor, double_precision
from lingrid.errors import ConfigError
from lingrid.gradcheck import grad_check


def test_forward_examples():
    assert np.allclose(dc.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).numpy(), 0.25)
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5
    result = dc.hadamard(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
    assert result.numpy().tolist() == [4.0, 10.0, 18.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ConfigError, match=r"\(3,\).*\(2,\)"):
        dc.add(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0]))
    with pytest.raises(ConfigError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_square_gradient():
    with double_precision():
        x = Parameter(3.0, "x")
        with Tape() as tape:
            grads = tape.backward(x * x, [x])
    assert grads["x"] == pytest.approx(6.0)


def test_constant_loss_gives_zero_gradients():
    w = Parameter(np.ones(3), "w")
    with Tape() as tape:
        loss = dc.sum(Tensor(np.ones(3)))
        grads = tape.backward(loss, [w])
    assert not grads["w"].any()


def test_non_scalar_loss_is_an_error():
    w = Parameter(np.ones(3), "w")
    with Tape() as tape:
        with pytest.raises(ConfigError):
            tape.backward(w * 2.0, [w])


def test_backward_outside_a_tape():
    with pytest.raises(ConfigError):
        dc.backward(Tensor(1.0))


def test_softmax_dot_matches_finite_differences():
    target = np.array([0.1, -0.4, 0.7, 0.2])

    def fn(w):
        return dc.mean(dc.softmax(w) * target)

    err = grad_check(fn, np.array([0.3, -1.2, 0.5, 2.0]))
    assert err <= 1e-6


def test_gradients_accumulate_over_reuse():
    with double_precision():
        x = Parameter(np.array([1.0, 2.0]), "x")
        with Tape() as tape:
            loss = dc.sum(x * x + x)
            grads = tape.backward(loss, [x])
    assert np.allclose(grads["x"], [3.0, 5.0])


def test_ndarray_on_the_left_dispatches_to_tensor():
    x = Tensor([1.0, 2.0])
    out = np.array([3.0, 4.0]) * x
    assert isinstance(out, Tensor)
    assert out.numpy().tolist() == [3.0, 8.0]


def test_precision_context():
    assert Tensor(1.0).numpy().dtype == np.float32
    with double_precision():
        assert Tensor(1.0).numpy().dtype == np.float64
    assert Tensor(1.0).numpy().dtype == np.float32


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 1))
    with double_precision():
        out = dc.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)), stride=1, padding=0)
    expected = np.array(
        [[np.sum(x[0, i : i + 3, j : j + 3, :] * w[..., 0]) for j in range(2)] for i in range(2)]
    )
    assert np.allclose(out.numpy()[0, :, :, 0], expected)


def test_param_store_names_are_unique():
    store = ParamStore(seed=0)
    store.glorot("a.W", (3, 2))
    with pytest.raises(ConfigError, match="duplicate"):
        store.zeros("a.W", (3, 2))
    assert store.names() == ["a.W"]


def test_param_store_is_seeded():
    a = ParamStore(seed=7).glorot("w", (4, 4)).numpy()
    b = ParamStore(seed=7).glorot("w", (4, 4)).numpy()
    assert np.array_equal(a, b)
    bound = dc.glorot_bound((4, 4))
    assert np.all(np.abs(a) <= bound + 1e-6)
