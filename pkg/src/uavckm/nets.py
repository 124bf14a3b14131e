"""Minimal dense-network machinery shared by the channel map and the policies.

Plain numpy, float64, explicit backward passes. Layers cache what their
backward needs during forward; a forward/backward pair per minibatch. All
parameters are numpy arrays updated in place, so an Adam instance can hold
references to them directly.
"""

from __future__ import annotations

import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite during gradient training."""


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 w_scale: float | None = None):
        scale = w_scale if w_scale is not None else np.sqrt(2.0 / n_in)
        self.W = rng.normal(0.0, scale, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._x = x
        return x @ self.W + self.b

    def backward(self, g: np.ndarray) -> np.ndarray:
        self.gW += self._x.T @ g
        self.gb += g.sum(axis=0)
        return g @ self.W.T

    def trainables(self):
        return [("W", self.W, self.gW), ("b", self.b, self.gb)]

    def state(self):
        return {"W": self.W, "b": self.b}


class Relu:
    def __init__(self):
        self._mask = None

    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask

    def trainables(self):
        return []

    def state(self):
        return {}


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x, train):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y ** 2)

    def trainables(self):
        return []

    def state(self):
        return {}


class BatchNorm:
    """Per-feature normalization; batch statistics in training, running in eval."""

    def __init__(self, n: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._cache = None

    def forward(self, x, train):
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in training")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            invstd = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu) * invstd
            self.running_mean += self.momentum * (mu - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
            self._cache = ("train", x, mu, invstd, xhat)
        else:
            invstd = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * invstd
            self._cache = ("eval", invstd, xhat)
        return self.gamma * xhat + self.beta

    def backward(self, g):
        mode = self._cache[0]
        if mode == "train":
            _, x, mu, invstd, xhat = self._cache
            n = x.shape[0]
            self.ggamma += (g * xhat).sum(axis=0)
            self.gbeta += g.sum(axis=0)
            gxhat = g * self.gamma
            dvar = (gxhat * (x - mu)).sum(axis=0) * (-0.5) * invstd ** 3
            dmu = -(gxhat.sum(axis=0)) * invstd + dvar * (-2.0 / n) * (x - mu).sum(axis=0)
            return gxhat * invstd + dvar * 2.0 * (x - mu) / n + dmu / n
        _, invstd, xhat = self._cache
        self.ggamma += (g * xhat).sum(axis=0)
        self.gbeta += g.sum(axis=0)
        return g * self.gamma * invstd

    def trainables(self):
        return [("gamma", self.gamma, self.ggamma), ("beta", self.beta, self.gbeta)]

    def state(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}


class ResidualBlock:
    """x + BatchNorm(Relu(Dense(x))); width-preserving."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.dense = Dense(width, width, rng)
        self.relu = Relu()
        self.bn = BatchNorm(width)

    def forward(self, x, train):
        h = self.dense.forward(x, train)
        h = self.relu.forward(h, train)
        h = self.bn.forward(h, train)
        return h + x

    def backward(self, g):
        gh = self.bn.backward(g)
        gh = self.relu.backward(gh)
        gh = self.dense.backward(gh)
        return gh + g

    def trainables(self):
        out = []
        for prefix, sub in (("dense", self.dense), ("bn", self.bn)):
            out.extend((f"{prefix}.{n}", p, gr) for n, p, gr in sub.trainables())
        return out

    def state(self):
        out = {}
        for prefix, sub in (("dense", self.dense), ("bn", self.bn)):
            out.update({f"{prefix}.{n}": a for n, a in sub.state().items()})
        return out


class Sequential:
    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def trainables(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{n}", p, gr) for n, p, gr in layer.trainables())
        return out

    def zero_grads(self):
        for _name, _p, g in self.trainables():
            g[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"{i}.{n}": a for n, a in layer.state().items()})
        return out

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(d):
            missing = set(own) ^ set(d)
            raise ValueError(f"state keys mismatch: {sorted(missing)}")
        for k, a in own.items():
            v = np.asarray(d[k], dtype=float)
            if v.shape != a.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {a.shape}")
            a[...] = v


def mlp(sizes: list[int], rng: np.random.Generator, activation: str = "tanh",
        out_scale: float | None = None) -> Sequential:
    """Fully connected net; `activation` between hidden layers, linear output."""
    act = {"tanh": Tanh, "relu": Relu}[activation]
    layers: list = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(Dense(sizes[i], sizes[i + 1], rng,
                            w_scale=out_scale if last and out_scale is not None else None))
        if not last:
            layers.append(act())
    return Sequential(layers)


def residual_regressor(input_dim: int, width: int, blocks: int,
                       rng: np.random.Generator) -> Sequential:
    """Input projection, `blocks` residual blocks, scalar head."""
    layers: list = [Dense(input_dim, width, rng)]
    layers.extend(ResidualBlock(width, rng) for _ in range(blocks))
    layers.append(Dense(width, 1, rng))
    return Sequential(layers)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient wrt pred."""
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def numeric_param_grad(net: Sequential, loss_fn, param: np.ndarray, index: tuple,
                       eps: float = 1e-6) -> float:
    """Central finite difference of loss_fn() wrt one parameter entry."""
    orig = param[index]
    param[index] = orig + eps
    hi = loss_fn()
    param[index] = orig - eps
    lo = loss_fn()
    param[index] = orig
    return (hi - lo) / (2.0 * eps)
