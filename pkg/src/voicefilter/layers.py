"""Neural-network primitives with hand-derived backward passes.

Everything runs on ragged batches: a batch is a list of per-utterance
(T_i, C) arrays, so no padding or loss masking is needed. Convolutions and
recurrences act per sequence; batch norm pools statistics over every frame
in the batch. Layers cache activations on forward and accumulate parameter
gradients on backward.
"""

from __future__ import annotations

import numpy as np

from voicefilter.errors import NumericalError

Batch = list[np.ndarray]


def glorot(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    name: str = "layer"

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0


def _check_finite(name: str, batch: Batch) -> None:
    for x in batch:
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite values after layer {name}")


class Conv1d(Layer):
    """Same-padded 1-D convolution over time, (T, C_in) -> (ceil(T/s), C_out)."""

    def __init__(self, name, in_ch, out_ch, kernel, stride, rng, dtype=np.float32):
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.w = glorot(rng, (kernel * in_ch, out_ch), dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache: list[tuple[np.ndarray, int, int]] = []

    @property
    def params(self):
        return {"w": self.w, "b": self.b}

    @property
    def grads(self):
        return {"w": self.dw, "b": self.db}

    def _geometry(self, t: int) -> tuple[int, int]:
        t_out = -(-t // self.stride)
        total_pad = max((t_out - 1) * self.stride + self.kernel - t, 0)
        return t_out, total_pad // 2

    def forward(self, xs: Batch, train: bool) -> Batch:
        self._cache = []
        ys = []
        for x in xs:
            t = x.shape[0]
            t_out, left = self._geometry(t)
            total_pad = max((t_out - 1) * self.stride + self.kernel - t, 0)
            padded = np.zeros((t + total_pad, self.in_ch), dtype=x.dtype)
            padded[left : left + t] = x
            cols = np.empty((t_out, self.kernel, self.in_ch), dtype=x.dtype)
            for k in range(self.kernel):
                cols[:, k, :] = padded[k : k + t_out * self.stride : self.stride]
            cols2 = cols.reshape(t_out, self.kernel * self.in_ch)
            ys.append(cols2 @ self.w + self.b)
            if train:
                self._cache.append((cols2, t, left))
        return ys

    def backward(self, dys: Batch) -> Batch:
        dxs = []
        for dy, (cols2, t, left) in zip(dys, self._cache):
            self.dw += cols2.T @ dy
            self.db += dy.sum(axis=0)
            dcols = (dy @ self.w.T).reshape(dy.shape[0], self.kernel, self.in_ch)
            t_out = dy.shape[0]
            total_pad = max((t_out - 1) * self.stride + self.kernel - t, 0)
            dpadded = np.zeros((t + total_pad, self.in_ch), dtype=dy.dtype)
            for k in range(self.kernel):
                dpadded[k : k + t_out * self.stride : self.stride] += dcols[:, k, :]
            dxs.append(dpadded[left : left + t])
        return dxs


class BatchNorm(Layer):
    """Per-channel batch norm pooling statistics over all frames in a batch.

    `frozen` mode normalizes with the running statistics (no update) while
    still training scale/shift; used during speaker fine-tuning where batch
    statistics from one minute of speech are too noisy.
    """

    def __init__(self, name, channels, momentum=0.99, eps=1e-5, dtype=np.float32):
        self.name = name
        self.momentum, self.eps = momentum, eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)
        self._cache = None

    @property
    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    @property
    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    @property
    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, xs: Batch, mode: str) -> Batch:
        lengths = [x.shape[0] for x in xs]
        stacked = np.concatenate(xs, axis=0)
        if mode == "train":
            mean = stacked.mean(axis=0)
            var = stacked.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (stacked - mean) * inv_std
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
            self._cache = ("train", xhat, inv_std, lengths)
        else:  # eval / frozen: running statistics
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (stacked - self.running_mean) * inv_std
            self._cache = ("frozen", xhat, inv_std, lengths)
        y = self.gamma * xhat + self.beta
        return _split(y, lengths)

    def backward(self, dys: Batch) -> Batch:
        kind, xhat, inv_std, lengths = self._cache
        dy = np.concatenate(dys, axis=0)
        self.dgamma += (dy * xhat).sum(axis=0)
        self.dbeta += dy.sum(axis=0)
        if kind == "frozen":
            dx = dy * (self.gamma * inv_std)
        else:
            n = dy.shape[0]
            dxhat = dy * self.gamma
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=0)
                - xhat * (dxhat * xhat).sum(axis=0) / n
            )
        return _split(dx, lengths)


class ReLU(Layer):
    def __init__(self, name):
        self.name = name
        self._mask: Batch = []

    def forward(self, xs: Batch, train: bool) -> Batch:
        self._mask = [x > 0 for x in xs]
        return [np.maximum(x, 0) for x in xs]

    def backward(self, dys: Batch) -> Batch:
        return [dy * m for dy, m in zip(dys, self._mask)]


class Dense(Layer):
    def __init__(self, name, in_dim, out_dim, rng, dtype=np.float32):
        self.name = name
        self.w = glorot(rng, (in_dim, out_dim), dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache: list[np.ndarray] = []

    @property
    def params(self):
        return {"w": self.w, "b": self.b}

    @property
    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, xs: Batch, train: bool) -> Batch:
        if train:
            self._cache = xs
        return [x @ self.w + self.b for x in xs]

    def backward(self, dys: Batch) -> Batch:
        dxs = []
        for dy, x in zip(dys, self._cache):
            self.dw += x.T @ dy
            self.db += dy.sum(axis=0)
            dxs.append(dy @ self.w.T)
        return dxs


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class LSTM(Layer):
    """Uni-directional LSTM, zero initial state, gates ordered i, f, g, o."""

    def __init__(self, name, in_dim, hidden, rng, dtype=np.float32):
        self.name = name
        self.in_dim, self.hidden = in_dim, hidden
        self.wx = glorot(rng, (in_dim, 4 * hidden), dtype)
        self.wh = glorot(rng, (hidden, 4 * hidden), dtype)
        self.b = np.zeros(4 * hidden, dtype=dtype)
        self.b[hidden : 2 * hidden] = 1.0  # forget-gate bias
        self.dwx = np.zeros_like(self.wx)
        self.dwh = np.zeros_like(self.wh)
        self.db = np.zeros_like(self.b)
        self._cache = []

    @property
    def params(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}

    @property
    def grads(self):
        return {"wx": self.dwx, "wh": self.dwh, "b": self.db}

    def forward(self, xs: Batch, train: bool) -> Batch:
        self._cache = []
        hs_out = []
        hdim = self.hidden
        for x in xs:
            t_len = x.shape[0]
            hs = np.zeros((t_len, hdim), dtype=x.dtype)
            h = np.zeros(hdim, dtype=x.dtype)
            c = np.zeros(hdim, dtype=x.dtype)
            gates_cache = []
            pre = x @ self.wx  # hoist the input projection out of the loop
            for t in range(t_len):
                a = pre[t] + h @ self.wh + self.b
                i = _sigmoid(a[:hdim])
                f = _sigmoid(a[hdim : 2 * hdim])
                g = np.tanh(a[2 * hdim : 3 * hdim])
                o = _sigmoid(a[3 * hdim :])
                c_prev = c
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h_prev = h
                h = o * tc
                hs[t] = h
                if train:
                    gates_cache.append((i, f, g, o, c_prev, tc, h_prev))
            hs_out.append(hs)
            if train:
                self._cache.append((x, gates_cache))
        return hs_out

    def backward(self, dys: Batch) -> Batch:
        hdim = self.hidden
        dxs = []
        for dy, (x, gates_cache) in zip(dys, self._cache):
            t_len = x.shape[0]
            dx = np.zeros_like(x)
            dh_next = np.zeros(hdim, dtype=x.dtype)
            dc_next = np.zeros(hdim, dtype=x.dtype)
            da_rows = np.zeros((t_len, 4 * hdim), dtype=x.dtype)
            for t in range(t_len - 1, -1, -1):
                i, f, g, o, c_prev, tc, h_prev = gates_cache[t]
                dh = dy[t] + dh_next
                do = dh * tc
                dc = dc_next + dh * o * (1 - tc**2)
                di, df, dg = dc * g, dc * c_prev, dc * i
                da = np.concatenate(
                    [
                        di * i * (1 - i),
                        df * f * (1 - f),
                        dg * (1 - g**2),
                        do * o * (1 - o),
                    ]
                )
                da_rows[t] = da
                self.dwh += np.outer(h_prev, da)
                dh_next = da @ self.wh.T
                dc_next = dc * f
            self.dwx += x.T @ da_rows
            self.db += da_rows.sum(axis=0)
            dx = da_rows @ self.wx.T
            dxs.append(dx)
        return dxs


def _split(stacked: np.ndarray, lengths: list[int]) -> Batch:
    out, pos = [], 0
    for n in lengths:
        out.append(stacked[pos : pos + n])
        pos += n
    return out
