"""Recurrent cells, batch-normalized GRU stacks and the AVATAR networks.

GRU convention (gate layout ``[z, r, c]`` in the packed weights)::

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    c  = tanh(x Wc + (r * h) Uc + bc)
    h' = z * h + (1 - z) * c

LSTM gate layout is ``[i, f, o, g]``.  Hidden and cell states start at zero.

``gru_step``/``lstm_step`` are composed from elementary tensor ops and
serve as the readable reference; ``gru_sequence``/``lstm_sequence`` are
fused single-node ops with hand-written backpropagation through time that
the networks use for speed.  Tests check one against the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, _sigmoid


def _uniform(rng, fan_in, shape, name):
    k = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=True, name=name)


def _zeros(shape, name):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class GruCell:
    def __init__(self, input_size, hidden_size, rng, name="gru"):
        if input_size < 1 or hidden_size < 1:
            raise ValueError("GruCell sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.W = _uniform(rng, input_size, (input_size, 3 * H), f"{name}.W")
        self.U = _uniform(rng, H, (H, 3 * H), f"{name}.U")
        self.b = _zeros((3 * H,), f"{name}.b")

    def parameters(self):
        return [self.W, self.U, self.b]


class LstmCell:
    def __init__(self, input_size, hidden_size, rng, name="lstm"):
        if input_size < 1 or hidden_size < 1:
            raise ValueError("LstmCell sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        self.W = _uniform(rng, input_size, (input_size, 4 * H), f"{name}.W")
        self.U = _uniform(rng, H, (H, 4 * H), f"{name}.U")
        self.b = _zeros((4 * H,), f"{name}.b")

    def parameters(self):
        return [self.W, self.U, self.b]


def _check_step_shapes(cell, x_t, h_prev):
    if x_t.ndim != 2 or x_t.shape[1] != cell.input_size:
        raise ShapeError(f"step: input shape {x_t.shape} does not match input size {cell.input_size}")
    if h_prev.shape != (x_t.shape[0], cell.hidden_size):
        raise ShapeError(
            f"step: hidden shape {h_prev.shape} does not match {(x_t.shape[0], cell.hidden_size)}"
        )


def gru_step(cell: GruCell, x_t, h_prev):
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    _check_step_shapes(cell, x_t, h_prev)
    H = cell.hidden_size
    W, U, b = cell.W, cell.U, cell.b
    z = ad.sigmoid(x_t @ W[:, :H] + h_prev @ U[:, :H] + b[:H])
    r = ad.sigmoid(x_t @ W[:, H : 2 * H] + h_prev @ U[:, H : 2 * H] + b[H : 2 * H])
    c = ad.tanh(x_t @ W[:, 2 * H :] + (r * h_prev) @ U[:, 2 * H :] + b[2 * H :])
    return z * h_prev + (1.0 - z) * c


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev):
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    _check_step_shapes(cell, x_t, h_prev)
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_step: cell shape {c_prev.shape} != hidden shape {h_prev.shape}")
    H = cell.hidden_size
    a = x_t @ cell.W + h_prev @ cell.U + cell.b
    i = ad.sigmoid(a[:, :H])
    f = ad.sigmoid(a[:, H : 2 * H])
    o = ad.sigmoid(a[:, 2 * H : 3 * H])
    g = ad.tanh(a[:, 3 * H :])
    c = f * c_prev + i * g
    return o * ad.tanh(c), c


def _check_seq(cell, x):
    if x.ndim != 3 or x.shape[2] != cell.input_size:
        raise ShapeError(f"sequence input shape {x.shape} does not match input size {cell.input_size}")
    if x.shape[1] == 0:
        raise ShapeError("sequence length T must be at least 1")


def gru_sequence(cell: GruCell, x: Tensor) -> Tensor:
    """Unroll ``cell`` over the time axis of an N x T x F input from a zero state."""
    x = ad.as_tensor(x)
    _check_seq(cell, x)
    N, T, F = x.shape
    H = cell.hidden_size
    W, U, b = cell.W.data, cell.U.data, cell.b.data
    Uzr = np.ascontiguousarray(U[:, : 2 * H])
    Uc = np.ascontiguousarray(U[:, 2 * H :])

    # time-major buffers keep every per-step slice contiguous
    xp = np.ascontiguousarray(np.swapaxes(x.data @ W + b, 0, 1))
    hs = np.zeros((T + 1, N, H))
    zr = np.empty((T, N, 2 * H))
    cs = np.empty((T, N, H))
    rhs = np.empty((T, N, H))
    for t in range(T):
        h = hs[t]
        a = zr[t]
        np.matmul(h, Uzr, out=a)
        a += xp[t, :, : 2 * H]
        _sigmoid(a, out=a)
        rh = np.multiply(a[:, H:], h, out=rhs[t])
        c = cs[t]
        np.matmul(rh, Uc, out=c)
        c += xp[t, :, 2 * H :]
        np.tanh(c, out=c)
        hn = hs[t + 1]
        np.subtract(h, c, out=hn)
        hn *= a[:, :H]
        hn += c

    def bw(g):
        gt = np.swapaxes(g, 0, 1)
        z, r = zr[:, :, :H], zr[:, :, H:]
        # local derivative factors, vectorized over all steps at once
        k_c = (1.0 - z) * (1.0 - cs * cs)
        k_z = (hs[:T] - cs) * z * (1.0 - z)
        k_r = hs[:T] * r * (1.0 - r)
        dxp = np.empty((T, N, 3 * H))
        dh = np.zeros((N, H))
        for t in range(T - 1, -1, -1):
            dh += gt[t]
            d = dxp[t]
            np.multiply(dh, k_c[t], out=d[:, 2 * H :])
            drh = d[:, 2 * H :] @ Uc.T
            np.multiply(dh, k_z[t], out=d[:, :H])
            np.multiply(drh, k_r[t], out=d[:, H : 2 * H])
            dh *= z[t]
            drh *= r[t]
            dh += drh
            dh += d[:, : 2 * H] @ Uzr.T
        flat = dxp.reshape(-1, 3 * H)
        dW = dU = db = dx = None
        if cell.W.requires_grad:
            dW = np.swapaxes(x.data, 0, 1).reshape(-1, F).T @ flat
        if cell.U.requires_grad:
            dU = np.empty_like(U)
            dU[:, : 2 * H] = hs[:T].reshape(-1, H).T @ flat[:, : 2 * H]
            dU[:, 2 * H :] = rhs.reshape(-1, H).T @ flat[:, 2 * H :]
        if cell.b.requires_grad:
            db = flat.sum(axis=0)
        if x.requires_grad:
            dx = np.swapaxes(dxp @ W.T, 0, 1)
        return dx, dW, dU, db

    return Tensor.from_op(np.ascontiguousarray(np.swapaxes(hs[1:], 0, 1)), (x, cell.W, cell.U, cell.b), bw)


def lstm_sequence(cell: LstmCell, x: Tensor) -> Tensor:
    """Unroll an LSTM over time from zero hidden/cell state; returns all hidden states."""
    x = ad.as_tensor(x)
    _check_seq(cell, x)
    N, T, F = x.shape
    H = cell.hidden_size
    W, U, b = cell.W.data, cell.U.data, cell.b.data

    xp = np.ascontiguousarray(np.swapaxes(x.data @ W + b, 0, 1))
    hs = np.zeros((T + 1, N, H))
    cs = np.zeros((T + 1, N, H))
    gates = np.empty((T, N, 4 * H))
    tcs = np.empty((T, N, H))
    for t in range(T):
        a = gates[t]
        np.matmul(hs[t], U, out=a)
        a += xp[t]
        _sigmoid(a[:, : 3 * H], out=a[:, : 3 * H])
        np.tanh(a[:, 3 * H :], out=a[:, 3 * H :])
        c = cs[t + 1]
        np.multiply(a[:, H : 2 * H], cs[t], out=c)
        c += a[:, :H] * a[:, 3 * H :]
        np.tanh(c, out=tcs[t])
        np.multiply(a[:, 2 * H : 3 * H], tcs[t], out=hs[t + 1])

    def bw(grad):
        gt = np.swapaxes(grad, 0, 1)
        i, f = gates[:, :, :H], gates[:, :, H : 2 * H]
        o, g = gates[:, :, 2 * H : 3 * H], gates[:, :, 3 * H :]
        # dL/dc contribution through h, and per-gate derivative factors
        k_hc = o * (1.0 - tcs * tcs)
        k_i = g * i * (1.0 - i)
        k_f = cs[:T] * f * (1.0 - f)
        k_o = tcs * o * (1.0 - o)
        k_g = i * (1.0 - g * g)
        da = np.empty((T, N, 4 * H))
        dh = np.zeros((N, H))
        dc = np.zeros((N, H))
        for t in range(T - 1, -1, -1):
            dh += gt[t]
            dc += dh * k_hc[t]
            d = da[t]
            np.multiply(dc, k_i[t], out=d[:, :H])
            np.multiply(dc, k_f[t], out=d[:, H : 2 * H])
            np.multiply(dh, k_o[t], out=d[:, 2 * H : 3 * H])
            np.multiply(dc, k_g[t], out=d[:, 3 * H :])
            dc *= f[t]
            np.matmul(d, U.T, out=dh)
        flat = da.reshape(-1, 4 * H)
        dW = dU = db = dx = None
        if cell.W.requires_grad:
            dW = np.swapaxes(x.data, 0, 1).reshape(-1, F).T @ flat
        if cell.U.requires_grad:
            dU = hs[:T].reshape(-1, H).T @ flat
        if cell.b.requires_grad:
            db = flat.sum(axis=0)
        if x.requires_grad:
            dx = np.swapaxes(da @ W.T, 0, 1)
        return dx, dW, dU, db

    return Tensor.from_op(np.ascontiguousarray(np.swapaxes(hs[1:], 0, 1)), (x, cell.W, cell.U, cell.b), bw)


class BatchNormLayer:
    """Per-feature normalization over the joint batch x time axes."""

    def __init__(self, num_features, momentum=0.9, eps=1e-5, name="bn"):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(num_features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def parameters(self):
        return [self.gamma, self.beta]


def batchnorm_forward(layer: BatchNormLayer, x, training=True, update_stats=True):
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[2] != layer.num_features:
        raise ShapeError(f"batchnorm: input shape {x.shape} does not match {layer.num_features} features")
    if training:
        if x.shape[0] * x.shape[1] < 2:
            raise ValueError("batchnorm: train mode needs at least 2 values per feature")
        mu = ad.mean(x, axis=(0, 1))
        d = x - mu
        var = ad.mean(ad.square(d), axis=(0, 1))
        xhat = d / ad.sqrt(var + layer.eps)
        if update_stats:
            m = layer.momentum
            layer.running_mean = m * layer.running_mean + (1.0 - m) * mu.data
            layer.running_var = m * layer.running_var + (1.0 - m) * var.data
    else:
        xhat = (x - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
    return xhat * layer.gamma + layer.beta


class RegularizedGruStack:
    """Layers of (optional batch norm, GRU) followed by a per-step affine head.

    ``output`` is ``"linear"`` or ``"sigmoid"``.  With ``batchnorm=False``
    this is the plain GRU stack used by the discriminator.
    """

    def __init__(self, in_size, hidden_size, out_size, num_layers, rng,
                 output="linear", batchnorm=True, name="net"):
        if min(in_size, hidden_size, out_size, num_layers) < 1:
            raise ValueError(f"{name}: dimensions and layer count must be positive")
        if output not in ("linear", "sigmoid"):
            raise ValueError(f"{name}: unknown output activation {output!r}")
        self.name = name
        self.output = output
        self.in_size = in_size
        self.out_size = out_size
        self.hidden_size = hidden_size
        self.layers = []
        size = in_size
        for i in range(num_layers):
            bn = BatchNormLayer(size, name=f"{name}.{i}.bn") if batchnorm else None
            cell = GruCell(size, hidden_size, rng, name=f"{name}.{i}.gru")
            self.layers.append((bn, cell))
            size = hidden_size
        self.head_W = _uniform(rng, hidden_size, (hidden_size, out_size), f"{name}.head.W")
        self.head_b = _zeros((out_size,), f"{name}.head.b")

    @property
    def num_layers(self):
        return len(self.layers)

    def batchnorm_layers(self):
        return [bn for bn, _ in self.layers if bn is not None]

    def parameters(self):
        params = []
        for bn, cell in self.layers:
            if bn is not None:
                params += bn.parameters()
            params += cell.parameters()
        return params + [self.head_W, self.head_b]


def run_network(stack: RegularizedGruStack, x, training=True, update_stats=True) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ShapeError(f"{stack.name}: expected N x T x F input with T >= 1, got {x.shape}")
    h = x
    for bn, cell in stack.layers:
        if bn is not None:
            h = batchnorm_forward(bn, h, training=training, update_stats=update_stats)
        h = gru_sequence(cell, h)
    y = h @ stack.head_W + stack.head_b
    return ad.sigmoid(y) if stack.output == "sigmoid" else y


@dataclass
class AvatarModel:
    encoder: RegularizedGruStack
    decoder: RegularizedGruStack
    supervisor: RegularizedGruStack
    discriminator: RegularizedGruStack
    n_features: int
    latent_dim: int
    config: object = None
    normalizer: object = None
    seq_len: int | None = None
    trained: bool = False

    def networks(self):
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "supervisor": self.supervisor,
            "discriminator": self.discriminator,
        }

    def named_parameters(self):
        out = {}
        for net in self.networks().values():
            for p in net.parameters():
                out[p.name] = p
        return out

    def named_buffers(self):
        out = {}
        for net in self.networks().values():
            for bn in net.batchnorm_layers():
                base = bn.gamma.name.rsplit(".", 1)[0]
                out[f"{base}.running_mean"] = (bn, "running_mean")
                out[f"{base}.running_var"] = (bn, "running_var")
        return out

    def encode(self, x, training=True, update_stats=True):
        return run_network(self.encoder, x, training, update_stats)

    def decode(self, z, training=True, update_stats=True):
        return run_network(self.decoder, z, training, update_stats)

    def supervise(self, x, training=True, update_stats=True):
        return run_network(self.supervisor, x, training, update_stats)

    def discriminate(self, z):
        """Per-sequence probability that ``z`` came from the prior (mean of per-step outputs)."""
        return ad.mean(run_network(self.discriminator, z), axis=(1, 2))


def init_model(config, n_features, rng) -> AvatarModel:
    """Fresh AVATAR networks; batch norm omitted everywhere when ``disable_rg`` is set."""
    H = config.hidden_size
    L = config.num_layers
    Z = config.latent_dim
    if min(H, L, Z, n_features) < 1:
        raise ValueError("hidden size, layer count, latent dim and feature count must be positive")
    bn = not config.disable_rg
    return AvatarModel(
        encoder=RegularizedGruStack(n_features, H, Z, L, rng, "linear", bn, "encoder"),
        decoder=RegularizedGruStack(Z, H, n_features, L, rng, "sigmoid", bn, "decoder"),
        supervisor=RegularizedGruStack(n_features, H, n_features, L, rng, "sigmoid", bn, "supervisor"),
        discriminator=RegularizedGruStack(Z, H, 1, L, rng, "sigmoid", False, "discriminator"),
        n_features=n_features,
        latent_dim=Z,
        config=config,
    )


# ---------------------------------------------------------------------------
# evaluation networks


class LstmClassifier:
    """One-layer LSTM; the last hidden state feeds a sigmoid unit."""

    def __init__(self, n_features, hidden_size, rng):
        self.cell = LstmCell(n_features, hidden_size, rng, name="clf.lstm")
        self.W = _uniform(rng, hidden_size, (hidden_size, 1), "clf.head.W")
        self.b = _zeros((1,), "clf.head.b")

    def parameters(self):
        return self.cell.parameters() + [self.W, self.b]

    def __call__(self, x):
        h = lstm_sequence(self.cell, x)
        last = h[:, -1, :]
        return ad.sigmoid(last @ self.W + self.b)[:, 0]


class LstmPredictor:
    """One-layer LSTM with a per-step sigmoid head of the input width."""

    def __init__(self, n_features, hidden_size, rng):
        self.cell = LstmCell(n_features, hidden_size, rng, name="pred.lstm")
        self.W = _uniform(rng, hidden_size, (hidden_size, n_features), "pred.head.W")
        self.b = _zeros((n_features,), "pred.head.b")

    def parameters(self):
        return self.cell.parameters() + [self.W, self.b]

    def __call__(self, x):
        h = lstm_sequence(self.cell, x)
        return ad.sigmoid(h @ self.W + self.b)
