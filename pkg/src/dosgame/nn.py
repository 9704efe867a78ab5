"""Small feed-forward networks with hand-written backward passes."""
from __future__ import annotations

import numpy as np


class MlpNet:
    """tanh MLP with a linear output layer.

    All weights and biases live in one flat vector, ``params``; the per-layer
    matrices are views into it, so an optimiser can update ``params`` in
    place.
    """

    def __init__(self, sizes, seed=0, out_scale=1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least input and output sizes, all positive")
        self.sizes = sizes
        shapes = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.n_params = sum(a * b + b for a, b in shapes)
        self.params = np.zeros(self.n_params)
        self.W, self.b = [], []
        off = 0
        for a, b in shapes:
            self.W.append(self.params[off:off + a * b].reshape(a, b))
            off += a * b
            self.b.append(self.params[off:off + b])
            off += b
        rng = np.random.default_rng(seed)
        for i, (a, b) in enumerate(shapes):
            gain = out_scale if i == len(shapes) - 1 else 1.0
            self.W[i][...] = rng.normal(0.0, gain / np.sqrt(a), size=(a, b))
        self._cache = None

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != self.params.shape:
            raise ValueError(f"expected {self.params.shape} parameters, got {flat.shape}")
        self.params[...] = flat

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dimension {h.shape[1]} != {self.in_dim}")
        acts = [h]
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        return h[0] if single else h

    def backward(self, grad_out) -> np.ndarray:
        """Gradient w.r.t. ``params`` of ``sum(grad_out * output)`` for the
        last :meth:`forward` call (summed over the batch)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts = self._cache
        g = np.asarray(grad_out, dtype=float).reshape(acts[-1].shape)
        grads = np.zeros_like(self.params)
        gW, gb = [], []
        off = 0
        for W in self.W:
            a, b = W.shape
            gW.append(grads[off:off + a * b].reshape(a, b))
            off += a * b
            gb.append(grads[off:off + b])
            off += b
        for i in range(len(self.W) - 1, -1, -1):
            gW[i][...] = acts[i].T @ g
            gb[i][...] = g.sum(axis=0)
            if i:
                g = (g @ self.W[i].T) * (1.0 - acts[i] ** 2)
        return grads

    def copy(self) -> "MlpNet":
        other = MlpNet.__new__(MlpNet)
        MlpNet.__init__(other, self.sizes)
        other.set_params(self.params)
        return other


class Adam:
    def __init__(self, n, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Descend ``grad`` in place."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


def clip_by_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if not max_norm:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g
