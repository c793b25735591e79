import numpy as np
import pytest

import dsrnet.layers as L
from dsrnet.layers import LayerParams, Tape
from dsrnet.model import ModelConfig, build
from dsrnet.optim import AdamState, adam_step, lr_at, mse_loss
from dsrnet.tensor import Rng, Tensor


def test_mse_zero_residual():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert mse_loss(x, x).item() == 0.0


def test_mse_closed_form_single_sample():
    pred = Tensor(np.ones((1, 3, 2, 2)))
    target = Tensor(np.zeros((1, 3, 2, 2)))
    # 12 elements differing by 1 on a batch of 1: (1/2) * 12
    assert mse_loss(pred, target).item() == 6.0


def test_mse_matches_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    pred = rng.standard_normal((3, 2, 4, 5))
    target = rng.standard_normal((3, 2, 4, 5))
    got = mse_loss(Tensor(pred), Tensor(target)).item()
    acc = 0.0
    for v, t in zip(pred.ravel(), target.ravel()):
        acc += (v - t) ** 2
    assert abs(got - acc / (2 * 3)) < 1e-12


def test_mse_nonnegative_and_zero_iff_equal():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((2, 1, 3, 3)))
    b = Tensor(a.data + 1e-9)
    assert mse_loss(a, b).item() > 0.0
    assert mse_loss(a, Tensor(a.data.copy())).item() == 0.0


def test_mse_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        mse_loss(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 2, 3)))


def test_mse_gradient_matches_central_differences():
    rng = np.random.default_rng(3)
    pred = Tensor(rng.standard_normal((2, 2, 3, 3)))
    target = Tensor(rng.standard_normal((2, 2, 3, 3)))
    tape = Tape()
    loss = mse_loss(pred, target, tape)
    tape.backward(loss)
    eps = 1e-6
    flat = pred.data.reshape(-1)
    gflat = pred.grad.reshape(-1)
    for k in range(0, flat.size, 7):
        orig = flat[k]
        flat[k] = orig + eps
        up = mse_loss(pred, target).item()
        flat[k] = orig - eps
        down = mse_loss(pred, target).item()
        flat[k] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(gflat[k] - numeric) <= 1e-6 * max(1.0, abs(numeric))


def _single_param(value, name="p"):
    p = LayerParams(name, Tensor(np.full((1, 1, 1, 1), value)), Tensor.zeros((1, 1, 1, 1), np.float64))
    return p


def test_adam_zero_gradient_is_fixed_point():
    p = _single_param(0.7)
    state = AdamState(lr=1e-2)
    adam_step([p], state)
    assert p.weight.data[0, 0, 0, 0] == 0.7
    assert state.t == 1


def test_adam_first_step_is_signed_lr():
    # needs |g| >> eps so the eps term stays below 1e-6 relative
    for g in (3.7, -0.05):
        p = _single_param(1.0)
        p.weight.grad[...] = g
        state = AdamState(lr=1e-3)
        adam_step([p], state)
        delta = p.weight.data[0, 0, 0, 0] - 1.0
        assert abs(delta - (-1e-3 * np.sign(g))) < 1e-6 * 1e-3
        # grads zeroed after the step
        assert p.weight.grad[0, 0, 0, 0] == 0.0


def test_adam_matches_scripted_reference_trace():
    # Independent reference: the textbook update sequence on f(theta) = theta^2.
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta_ref, m, v = 1.0, 0.0, 0.0
    trace = []
    for t in range(1, 11):
        g = 2.0 * theta_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta_ref -= lr * mhat / (np.sqrt(vhat) + eps)
        trace.append(theta_ref)

    p = _single_param(1.0)
    state = AdamState(lr=lr)
    got = []
    for _ in range(10):
        p.weight.grad[...] = 2.0 * p.weight.data
        adam_step([p], state)
        got.append(p.weight.data[0, 0, 0, 0])
    np.testing.assert_allclose(got, trace, atol=1e-10)


def test_adam_constant_gradient_direction_is_sign():
    rng = np.random.default_rng(4)
    g = rng.standard_normal((2, 2, 3, 3))
    p = LayerParams("p", Tensor(np.zeros((2, 2, 3, 3))), Tensor.zeros((2, 1, 1, 1), np.float64))
    state = AdamState(lr=1e-3)
    for _ in range(50):
        p.weight.grad[...] = g
        before = p.weight.data.copy()
        adam_step([p], state)
        step = p.weight.data - before
    np.testing.assert_allclose(step, -state.lr * np.sign(g), rtol=1e-3)


def test_adam_rejects_non_finite_grad_naming_block():
    p = _single_param(1.0, name="frb3")
    p.weight.grad[...] = np.nan
    with pytest.raises(ValueError, match="frb3"):
        adam_step([p], AdamState())


def test_lr_schedule():
    assert lr_at(0) == 1e-4
    assert lr_at(399_999) == 1e-4
    assert lr_at(400_000) == 5e-5
    assert lr_at(800_000) == 2.5e-5
    with pytest.raises(ValueError):
        lr_at(-1)


def test_training_smoke_overfits_single_patch():
    """200 Adam steps on a width-8 model drop the loss by >= 90%."""
    from skimage import data as skdata

    cfg = ModelConfig(scale=2, width=8, gate_hidden=2, dtype="f32")
    m = build(cfg, Rng(21).derive(0))
    photo = skdata.astronaut().astype(np.float32) / 255.0
    hr = photo[100:132, 180:212].transpose(2, 0, 1)[None]
    lr_img = hr[:, :, ::2, ::2].copy()
    x, target = Tensor(lr_img), Tensor(hr)
    params = m.parameters()
    state = AdamState(lr=1e-3)
    first = None
    for step in range(200):
        tape = Tape()
        loss = mse_loss(m.forward(x, tape), target, tape)
        tape.backward(loss)
        adam_step(params, state)
        if first is None:
            first = loss.item()
    final = mse_loss(m.forward(x), target).item()
    assert final <= 0.1 * first, f"loss only went {first:.5f} -> {final:.5f}"
