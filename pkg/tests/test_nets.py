import math

import numpy as np
import pytest

from avatar import autodiff as ad
from avatar.autodiff import SeededRng, ShapeError, Tensor, grad_check
from avatar.nets import (
    BatchNormLayer,
    GruCell,
    LstmCell,
    RegularizedGruStack,
    batchnorm_forward,
    gru_sequence,
    gru_step,
    init_model,
    lstm_sequence,
    lstm_step,
    run_network,
)
from avatar.training import TrainConfig


def zero_cell(cell):
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_loop_oracle(cell, x, h):
    """Scalar loops over the three gate equations."""
    W, U, b = cell.W.data, cell.U.data, cell.b.data
    N, F = x.shape
    H = cell.hidden_size
    out = np.zeros((N, H))
    for n in range(N):
        z = [0.0] * H
        r = [0.0] * H
        for j in range(H):
            az = b[j] + sum(x[n, i] * W[i, j] for i in range(F)) + sum(h[n, k] * U[k, j] for k in range(H))
            ar = b[H + j] + sum(x[n, i] * W[i, H + j] for i in range(F)) + sum(
                h[n, k] * U[k, H + j] for k in range(H)
            )
            z[j], r[j] = sig(az), sig(ar)
        for j in range(H):
            ac = b[2 * H + j] + sum(x[n, i] * W[i, 2 * H + j] for i in range(F)) + sum(
                r[k] * h[n, k] * U[k, 2 * H + j] for k in range(H)
            )
            c = math.tanh(ac)
            out[n, j] = z[j] * h[n, j] + (1 - z[j]) * c
    return out


def lstm_loop_oracle(cell, x, h, c):
    W, U, b = cell.W.data, cell.U.data, cell.b.data
    N, F = x.shape
    H = cell.hidden_size
    h_out, c_out = np.zeros((N, H)), np.zeros((N, H))
    for n in range(N):
        for j in range(H):
            a = [
                b[g * H + j]
                + sum(x[n, i] * W[i, g * H + j] for i in range(F))
                + sum(h[n, k] * U[k, g * H + j] for k in range(H))
                for g in range(4)
            ]
            i_, f_, o_, g_ = sig(a[0]), sig(a[1]), sig(a[2]), math.tanh(a[3])
            c_out[n, j] = f_ * c[n, j] + i_ * g_
            h_out[n, j] = o_ * math.tanh(c_out[n, j])
    return h_out, c_out


# -- GRU ------------------------------------------------------------------


def test_gru_zero_weights_halves_state():
    cell = zero_cell(GruCell(3, 4, SeededRng(0)))
    h = SeededRng(1).normal((2, 4))
    out = gru_step(cell, SeededRng(2).normal((2, 3)), h)
    np.testing.assert_allclose(out.data, 0.5 * h, rtol=0, atol=1e-15)


def test_gru_zero_weights_zero_state():
    cell = zero_cell(GruCell(3, 4, SeededRng(0)))
    out = gru_step(cell, SeededRng(2).normal((2, 3)), np.zeros((2, 4)))
    assert np.all(out.data == 0.0)


def test_gru_step_matches_loop_oracle():
    rng = SeededRng(3)
    cell = GruCell(3, 4, rng)
    cell.b.data[:] = rng.normal(12) * 0.3
    x, h = rng.normal((2, 3)), rng.normal((2, 4)) * 0.5
    np.testing.assert_allclose(gru_step(cell, x, h).data, gru_loop_oracle(cell, x, h), atol=1e-13)


def test_gru_step_shape_errors():
    cell = GruCell(3, 4, SeededRng(0))
    with pytest.raises(ShapeError):
        gru_step(cell, np.zeros((2, 2)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        gru_step(cell, np.zeros((2, 3)), np.zeros((2, 5)))


def test_gru_step_gradcheck():
    rng = SeededRng(4)
    cell = GruCell(3, 4, rng)
    for _ in range(10):
        x = Tensor(rng.normal((2, 3)), requires_grad=True)
        h = Tensor(rng.normal((2, 4)), requires_grad=True)
        w = rng.normal((2, 4))
        err = grad_check(lambda: ad.tsum(gru_step(cell, x, h) * w), [x, h] + cell.parameters())
        assert err < 1e-5


def test_gru_gates_stay_in_range():
    rng = SeededRng(5)
    cell = GruCell(3, 4, rng)
    for p in cell.parameters():
        p.data[...] = rng.normal(p.shape) * 5
    x = rng.normal((50, 3)) * 10
    h = np.tanh(rng.normal((50, 4)))
    out = gru_step(cell, x, h).data
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) <= 1.0)


def test_fused_gru_matches_unrolled_steps():
    rng = SeededRng(6)
    cell = GruCell(3, 5, rng)
    cell.b.data[:] = rng.normal(15) * 0.2
    x = rng.normal((4, 6, 3))
    h = Tensor(np.zeros((4, 5)))
    steps = []
    for t in range(6):
        h = gru_step(cell, x[:, t], h)
        steps.append(h.data)
    np.testing.assert_allclose(gru_sequence(cell, Tensor(x)).data, np.stack(steps, axis=1), atol=1e-14)


def test_fused_gru_gradcheck():
    rng = SeededRng(7)
    cell = GruCell(3, 5, rng)
    x = Tensor(rng.normal((2, 4, 3)), requires_grad=True)
    w = rng.normal((2, 4, 5))
    assert grad_check(lambda: ad.tsum(gru_sequence(cell, x) * w), [x] + cell.parameters()) < 1e-5


# -- LSTM -----------------------------------------------------------------


def test_lstm_zero_weights():
    cell = zero_cell(LstmCell(3, 4, SeededRng(0)))
    x = SeededRng(1).normal((2, 3))
    h, c = lstm_step(cell, x, np.zeros((2, 4)), np.zeros((2, 4)))
    assert np.all(h.data == 0) and np.all(c.data == 0)
    c0 = SeededRng(2).normal((2, 4))
    h, c = lstm_step(cell, x, np.zeros((2, 4)), c0)
    np.testing.assert_allclose(c.data, 0.5 * c0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)


def test_lstm_step_matches_loop_oracle():
    rng = SeededRng(8)
    cell = LstmCell(3, 4, rng)
    cell.b.data[:] = rng.normal(16) * 0.3
    x, h, c = rng.normal((2, 3)), rng.normal((2, 4)), rng.normal((2, 4))
    h1, c1 = lstm_step(cell, x, h, c)
    ho, co = lstm_loop_oracle(cell, x, h, c)
    np.testing.assert_allclose(h1.data, ho, atol=1e-13)
    np.testing.assert_allclose(c1.data, co, atol=1e-13)


def test_lstm_step_gradcheck():
    rng = SeededRng(9)
    cell = LstmCell(3, 4, rng)
    for _ in range(10):
        x = Tensor(rng.normal((2, 3)), requires_grad=True)
        h = Tensor(rng.normal((2, 4)), requires_grad=True)
        c = Tensor(rng.normal((2, 4)), requires_grad=True)
        w1, w2 = rng.normal((2, 4)), rng.normal((2, 4))

        def f():
            h1, c1 = lstm_step(cell, x, h, c)
            return ad.tsum(h1 * w1) + ad.tsum(c1 * w2)

        assert grad_check(f, [x, h, c] + cell.parameters()) < 1e-5


def test_fused_lstm_matches_steps_and_gradcheck():
    rng = SeededRng(10)
    cell = LstmCell(3, 4, rng)
    x = rng.normal((2, 5, 3))
    h = c = Tensor(np.zeros((2, 4)))
    steps = []
    for t in range(5):
        h, c = lstm_step(cell, x[:, t], h, c)
        steps.append(h.data)
    np.testing.assert_allclose(lstm_sequence(cell, Tensor(x)).data, np.stack(steps, 1), atol=1e-14)
    xt = Tensor(x, requires_grad=True)
    w = rng.normal((2, 5, 4))
    assert grad_check(lambda: ad.tsum(lstm_sequence(cell, xt) * w), [xt] + cell.parameters()) < 1e-5


# -- batch norm -----------------------------------------------------------


def test_batchnorm_constant_input_gives_zeros():
    bn = BatchNormLayer(2)
    out = batchnorm_forward(bn, np.full((3, 4, 2), 5.0))
    assert np.all(out.data == 0.0)


def test_batchnorm_plus_minus_one():
    bn = BatchNormLayer(1)
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(2, 2, 1)
    out = batchnorm_forward(bn, x).data
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), atol=1e-15)
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_batchnorm_statistics_and_running_update():
    rng = SeededRng(11)
    bn = BatchNormLayer(3)
    x = rng.normal((8, 5, 3)) * 3 + 2
    out = batchnorm_forward(bn, x).data.reshape(-1, 3)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    flat = x.reshape(-1, 3)
    var = flat.var(axis=0)
    np.testing.assert_allclose(out.var(axis=0), var / (var + 1e-5), atol=1e-12)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6 * 10)
    np.testing.assert_allclose(bn.running_mean, 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var)


def test_batchnorm_inference_uses_running_stats_only():
    bn = BatchNormLayer(2)
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 9.0]
    x = np.ones((1, 1, 2))
    out = batchnorm_forward(bn, x, training=False).data
    np.testing.assert_allclose(out[0, 0], [0.0, 2.0 / math.sqrt(9 + 1e-5)])
    np.testing.assert_array_equal(bn.running_mean, [1.0, -1.0])


def test_batchnorm_rejects_single_value_in_train_mode():
    with pytest.raises(ValueError):
        batchnorm_forward(BatchNormLayer(2), np.ones((1, 1, 2)))


def test_batchnorm_gradcheck():
    rng = SeededRng(12)
    bn = BatchNormLayer(3)
    bn.gamma.data[:] = rng.normal(3)
    x = Tensor(rng.normal((3, 4, 3)), requires_grad=True)
    w = rng.normal((3, 4, 3))
    f = lambda: ad.tsum(batchnorm_forward(bn, x, update_stats=False) * w)
    assert grad_check(f, [x] + bn.parameters()) < 1e-5


# -- stacks ---------------------------------------------------------------


def test_zero_stack_sigmoid_head_outputs_half():
    stack = RegularizedGruStack(3, 4, 2, 1, SeededRng(0), output="sigmoid")
    for p in stack.parameters():
        if not p.name.endswith("gamma"):
            p.data[...] = 0.0
    out = run_network(stack, SeededRng(1).normal((2, 5, 3)))
    assert np.all(out.data == 0.5)


def test_single_step_stack_is_one_gru_step_plus_head():
    rng = SeededRng(13)
    stack = RegularizedGruStack(3, 4, 2, 1, rng, output="linear", batchnorm=False)
    x = rng.normal((5, 1, 3))
    bn, cell = stack.layers[0]
    h = gru_step(cell, x[:, 0], np.zeros((5, 4))).data
    expected = h @ stack.head_W.data + stack.head_b.data
    np.testing.assert_allclose(run_network(stack, x).data[:, 0], expected, atol=1e-14)


def test_two_layer_stack_matches_composition():
    rng = SeededRng(14)
    stack = RegularizedGruStack(3, 4, 2, 2, rng, output="sigmoid")
    x = rng.normal((3, 5, 3))
    h = Tensor(x)
    for bn, cell in stack.layers:
        h = batchnorm_forward(bn, h, update_stats=False)
        hs, state = [], Tensor(np.zeros((3, 4)))
        for t in range(5):
            state = gru_step(cell, h[:, t], state)
            hs.append(state.data)
        h = Tensor(np.stack(hs, 1))
    expected = 1 / (1 + np.exp(-(h.data @ stack.head_W.data + stack.head_b.data)))
    np.testing.assert_allclose(run_network(stack, x).data, expected, atol=1e-13)


def test_run_network_rejects_empty_time_axis():
    stack = RegularizedGruStack(3, 4, 2, 1, SeededRng(0))
    with pytest.raises(ShapeError):
        run_network(stack, np.zeros((2, 0, 3)))


def test_duplicate_batch_rows_give_duplicate_outputs_in_inference():
    rng = SeededRng(15)
    stack = RegularizedGruStack(3, 4, 2, 2, rng, output="sigmoid")
    x = rng.normal((3, 5, 3))
    out = run_network(stack, np.concatenate([x, x]), training=False).data
    np.testing.assert_array_equal(out[:3], out[3:])
    perm = [2, 0, 1]
    np.testing.assert_array_equal(run_network(stack, x[perm], training=False).data, out[:3][perm])


# -- AVATAR model ---------------------------------------------------------


def small_config(**kw):
    base = dict(hidden_size=5, num_layers=2, latent_dim=3)
    base.update(kw)
    return TrainConfig(**base)


def test_discriminator_has_no_batchnorm():
    model = init_model(small_config(), 2, SeededRng(0))
    assert model.discriminator.batchnorm_layers() == []
    for name in ("encoder", "decoder", "supervisor"):
        assert len(getattr(model, name).batchnorm_layers()) == 2


def test_output_ranges():
    rng = SeededRng(1)
    model = init_model(small_config(), 2, rng)
    x = rng.uniform(size=(4, 6, 2))
    z = model.encode(x)
    assert z.shape == (4, 6, 3)
    for out in (model.decode(z), model.supervise(x)):
        assert np.all((out.data > 0) & (out.data < 1))
    d = model.discriminate(z)
    assert d.shape == (4,) and np.all((d.data > 0) & (d.data < 1))


def test_init_is_deterministic():
    a = init_model(small_config(), 2, SeededRng(3)).named_parameters()
    b = init_model(small_config(), 2, SeededRng(3)).named_parameters()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_init_bounds_and_biases():
    model = init_model(small_config(), 16, SeededRng(4))
    W = model.encoder.layers[0][1].W.data  # fan-in 16
    assert np.all(np.abs(W) < 0.25)
    for name, p in model.named_parameters().items():
        if name.endswith(".b"):
            assert np.all(p.data == 0)
        if name.endswith("gamma"):
            assert np.all(p.data == 1)
        if name.endswith("beta"):
            assert np.all(p.data == 0)


def test_init_weight_variance():
    cell = GruCell(400, 16, SeededRng(5))  # 400 * 48 draws
    k = 1 / math.sqrt(400)
    assert abs(cell.W.data.var() - k * k / 3) < 0.1 * k * k / 3


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_model(small_config(), 0, SeededRng(0))


def test_disable_rg_removes_all_batchnorm():
    model = init_model(small_config(disable_rg=True), 2, SeededRng(0))
    assert all(not net.batchnorm_layers() for net in model.networks().values())
    assert not any("bn" in n for n in model.named_parameters())
