"""Uncertainty-aware surrogate: a mean/log-variance regressor for
aleatoric noise plus a small ensemble whose spread stands in for
epistemic uncertainty. Plain numpy with hand-written backprop so the
acquisition gradient with respect to the input is exact."""
from __future__ import annotations

import numpy as np

LOGVAR_MIN, LOGVAR_MAX = -14.0, 4.0


class UnfittedSurrogate(RuntimeError):
    pass


class MLP:
    """tanh feed-forward net with linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.W = [rng.normal(0, 1 / np.sqrt(a), size=(a, b)) for a, b in zip(sizes, sizes[1:])]
        self.b = [np.zeros(b) for b in sizes[1:]]

    def forward(self, X: np.ndarray):
        hs = [X]
        h = X
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            h = np.tanh(z) if i < len(self.W) - 1 else z
            hs.append(h)
        return h, hs

    def backward(self, hs, dout: np.ndarray, want_params: bool = True):
        """Gradients w.r.t. params (if asked) and the input."""
        gW, gb = [], []
        d = dout
        for i in range(len(self.W) - 1, -1, -1):
            if i < len(self.W) - 1:
                d = d * (1.0 - hs[i + 1] ** 2)
            if want_params:
                gW.append(hs[i].T @ d)
                gb.append(d.sum(0))
            d = d @ self.W[i].T
        return gW[::-1], gb[::-1], d

    def params(self) -> list[np.ndarray]:
        return self.W + self.b


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / (1 - b1 ** self.t)) / (np.sqrt(v / (1 - b2 ** self.t)) + eps)


def _train(net: MLP, X, y, loss: str, epochs: int, lr: float, wd: float):
    opt = _Adam(net.params(), lr)
    n = X.shape[0]
    for _ in range(epochs):
        out, hs = net.forward(X)
        if loss == "mse":
            dout = (2.0 / n) * (out - y[:, None])
        else:
            mu = out[:, 0]
            s = np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX)
            iv = np.exp(-s)
            r = mu - y
            dout = np.empty_like(out)
            dout[:, 0] = r * iv / n
            dout[:, 1] = 0.5 * (1.0 - r * r * iv) / n
            inside = (out[:, 1] > LOGVAR_MIN) & (out[:, 1] < LOGVAR_MAX)
            dout[:, 1] *= inside
        gW, gb, _ = net.backward(hs, dout)
        gW = [g + wd * W for g, W in zip(gW, net.W)]
        opt.step(net.params(), gW + gb)


class Surrogate:
    def __init__(self, n_ensemble: int = 3, hidden: int = 32, epochs: int = 250, lr: float = 1e-2,
                 weight_decay: float = 1e-4, seed: int = 0):
        self.n_ensemble = n_ensemble
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.wd = weight_decay
        self.seed = seed
        self.mv: MLP | None = None
        self.ens: list[MLP] = []

    @property
    def fitted(self) -> bool:
        return self.mv is not None

    def fit(self, X, y) -> "Surrogate":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("need a non-empty 2-D dataset")
        self.y_mean = float(y.mean())
        self.y_std = float(y.std()) if y.std() > 1e-12 else 1.0
        ys = (y - self.y_mean) / self.y_std
        d = X.shape[1]
        rng = np.random.default_rng(self.seed)
        self.mv = MLP([d, self.hidden, self.hidden, 2], rng)
        self.mv.b[-1][1] = -2.0
        _train(self.mv, X, ys, "nll", self.epochs, self.lr, self.wd)
        self.ens = []
        for _ in range(self.n_ensemble):
            net = MLP([d, self.hidden, self.hidden, 1], rng)
            _train(net, X, ys, "mse", self.epochs, self.lr, self.wd)
            self.ens.append(net)
        return self

    def _check(self):
        if not self.fitted:
            raise UnfittedSurrogate("fit the surrogate first")

    def predict(self, X):
        """Mean, aleatoric std and epistemic std, in target units."""
        self._check()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out, _ = self.mv.forward(X)
        mu = out[:, 0]
        al = np.exp(0.5 * np.clip(out[:, 1], LOGVAR_MIN, LOGVAR_MAX))
        means = np.stack([net.forward(X)[0][:, 0] for net in self.ens]) if self.ens else mu[None]
        ep = np.sqrt(means.var(0) + 1e-12)
        s = self.y_std
        return mu * s + self.y_mean, al * s, ep * s

    def acquisition(self, X, kappa: float) -> np.ndarray:
        mu, al, ep = self.predict(X)
        return mu + kappa * (al + ep)

    def acquisition_grad(self, X, kappa: float):
        """Acquisition value and its exact gradient with respect to X."""
        self._check()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        s = self.y_std
        out, hs = self.mv.forward(X)
        lv = out[:, 1]
        inside = (lv > LOGVAR_MIN) & (lv < LOGVAR_MAX)
        al = np.exp(0.5 * np.clip(lv, LOGVAR_MIN, LOGVAR_MAX))
        dout = np.zeros_like(out)
        dout[:, 0] = s
        dout[:, 1] = kappa * s * 0.5 * al * inside
        _, _, gx = self.mv.backward(hs, dout, want_params=False)
        mu = out[:, 0]
        val = mu * s + self.y_mean + kappa * s * al
        if self.ens:
            K = len(self.ens)
            fw = [net.forward(X) for net in self.ens]
            means = np.stack([o[:, 0] for o, _ in fw])
            mbar = means.mean(0)
            ep = np.sqrt(means.var(0) + 1e-12)
            val = val + kappa * s * ep
            for k, (net, (_, h)) in enumerate(zip(self.ens, fw)):
                # d ep / d m_k = (m_k - mbar) / (K ep)
                coef = kappa * s * (means[k] - mbar) / (K * ep)
                _, _, g = net.backward(h, coef.reshape(n, 1), want_params=False)
                gx = gx + g
        return val, gx

    def mean_grad(self, X):
        self._check()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out, hs = self.mv.forward(X)
        dout = np.zeros_like(out)
        dout[:, 0] = self.y_std
        return self.mv.backward(hs, dout, want_params=False)[2]
