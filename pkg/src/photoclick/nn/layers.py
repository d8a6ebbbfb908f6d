"""Layers with hand-written backward passes.

Every layer keeps its parameters as views into one flat vector owned by the
network, so optimisers and checkpoints deal with a single array.
"""
from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01


class Layer:
    n_params = 0

    def bind(self, flat: np.ndarray, grad: np.ndarray) -> None:
        """Attach parameter and gradient views into the network's flat buffers."""

    def init(self, rng) -> None:
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.n_params = n_in * n_out + n_out

    def bind(self, flat, grad):
        k = self.n_in * self.n_out
        self.w = flat[:k].reshape(self.n_in, self.n_out)
        self.b = flat[k:]
        self.gw = grad[:k].reshape(self.n_in, self.n_out)
        self.gb = grad[k:]

    def init(self, rng):
        # He initialisation suits the leaky-ReLU stack
        self.w[:] = rng.normal(0.0, np.sqrt(2.0 / self.n_in), self.w.shape)
        self.b[:] = 0.0

    def forward(self, x):
        self.x = x
        return x @ self.w + self.b

    def backward(self, g):
        self.gw += self.x.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.w.T

    def describe(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, self.slope * x)

    def backward(self, g):
        return np.where(self.pos, g, self.slope * g)

    def describe(self):
        return {"type": "LeakyReLU", "slope": self.slope}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MGU(Layer):
    """Minimal gated unit: one forget gate shared with the candidate update.

    ``f = sig(x Wf + h Uf + bf)``,
    ``c = tanh(x Wh + (f * h) Uh + bh)``,
    ``h' = (1 - f) * h + f * c``.
    Input has shape (batch, steps, n_in); output is the final hidden state.
    """

    def __init__(self, n_in: int, n_hidden: int):
        self.n_in, self.n_hidden = n_in, n_hidden
        self._shapes = [(n_in, n_hidden), (n_hidden, n_hidden), (n_hidden,)] * 2
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)

    def bind(self, flat, grad):
        views, gviews, k = [], [], 0
        for s in self._shapes:
            n = int(np.prod(s))
            views.append(flat[k:k + n].reshape(s))
            gviews.append(grad[k:k + n].reshape(s))
            k += n
        self.wf, self.uf, self.bf, self.wh, self.uh, self.bh = views
        self.gwf, self.guf, self.gbf, self.gwh, self.guh, self.gbh = gviews

    def init(self, rng):
        for w in (self.wf, self.wh):
            w[:] = rng.normal(0.0, np.sqrt(1.0 / self.n_in), w.shape)
        for u in (self.uf, self.uh):
            q, _ = np.linalg.qr(rng.normal(size=u.shape))
            u[:] = q
        self.bf[:] = 1.0  # start close to carrying the input through
        self.bh[:] = 0.0

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        b, t, _ = x.shape
        h = np.zeros((b, self.n_hidden))
        self.x = x
        self.cache = []
        for s in range(t):
            xs = x[:, s]
            f = _sigmoid(xs @ self.wf + h @ self.uf + self.bf)
            fh = f * h
            c = np.tanh(xs @ self.wh + fh @ self.uh + self.bh)
            self.cache.append((h, f, fh, c))
            h = (1.0 - f) * h + f * c
        return h

    def backward(self, g):
        x = self.x
        dh = g
        dx = np.zeros_like(x)
        for s in range(x.shape[1] - 1, -1, -1):
            h, f, fh, c = self.cache[s]
            xs = x[:, s]
            df = dh * (c - h)
            dc = dh * f
            dzc = dc * (1.0 - c * c)
            self.gwh += xs.T @ dzc
            self.guh += fh.T @ dzc
            self.gbh += dzc.sum(axis=0)
            dfh = dzc @ self.uh.T
            df = df + dfh * h
            dzf = df * f * (1.0 - f)
            self.gwf += xs.T @ dzf
            self.guf += h.T @ dzf
            self.gbf += dzf.sum(axis=0)
            dx[:, s] = dzc @ self.wh.T + dzf @ self.wf.T
            dh = dh * (1.0 - f) + dfh * f + dzf @ self.uf.T
        return dx

    def describe(self):
        return {"type": "MGU", "n_in": self.n_in, "n_hidden": self.n_hidden}


def build_layer(desc: dict) -> Layer:
    kind = desc["type"]
    if kind == "Dense":
        return Dense(desc["n_in"], desc["n_out"])
    if kind == "LeakyReLU":
        return LeakyReLU(desc.get("slope", LEAKY_SLOPE))
    if kind == "MGU":
        return MGU(desc["n_in"], desc["n_hidden"])
    raise ValueError(f"unknown layer type {kind!r}")
