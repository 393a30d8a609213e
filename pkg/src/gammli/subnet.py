"""Small tanh feed-forward approximators and their training loop.

Every additive term is a [20, 10] tanh network with a linear output head plus
a frozen ``output_offset`` that absorbs centering shifts. Training is plain
mini-batch Adam with patience-based early stopping; the best validation epoch
is restored. All randomness flows through explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

HIDDEN = (20, 10)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Subnet:
    """One trained approximator of arity 1 (main effect) or 2 (interaction)."""

    arity: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    output_offset: float = 0.0

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ValueError(f"arity must be 1 or 2, got {self.arity}")
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite subnet parameter")

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


def init_subnet(arity: int, seed: int, hidden: tuple[int, int] = HIDDEN) -> Subnet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    return Subnet(
        arity,
        w1=glorot(rng, arity, h1, (arity, h1)),
        b1=np.zeros(h1),
        w2=glorot(rng, h1, h2, (h1, h2)),
        b2=np.zeros(h2),
        w3=glorot(rng, h2, 1, (h2,)),
        b3=np.zeros(1),
    )


def forward_batch(net: Subnet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != net.arity:
        raise ValueError(f"expected {net.arity} input(s), got {x.shape[1]}")
    a1 = np.tanh(x @ net.w1 + net.b1)
    a2 = np.tanh(a1 @ net.w2 + net.b2)
    return a2 @ net.w3 + net.b3[0] + net.output_offset


def forward(net: Subnet, x) -> float:
    """Evaluate one input (a scalar for arity 1, a length-2 vector for arity 2)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (net.arity,):
        raise ValueError(f"expected {net.arity} input(s), got shape {x.shape}")
    return float(forward_batch(net, x[None, :])[0])


def _forward_cache(net: Subnet, x: np.ndarray):
    a1 = np.tanh(x @ net.w1 + net.b1)
    a2 = np.tanh(a1 @ net.w2 + net.b2)
    out = a2 @ net.w3 + net.b3[0] + net.output_offset
    return out, (x, a1, a2)


def _backward(net: Subnet, cache, dout: np.ndarray) -> list[np.ndarray]:
    # dout holds d(loss)/d(output) per sample, already weighted by 1/batch.
    x, a1, a2 = cache
    db3 = np.array([dout.sum()])
    dw3 = a2.T @ dout
    da2 = np.outer(dout, net.w3)
    dz2 = da2 * (1.0 - a2 * a2)
    db2 = dz2.sum(axis=0)
    dw2 = a1.T @ dz2
    da1 = dz2 @ net.w2.T
    dz1 = da1 * (1.0 - a1 * a1)
    db1 = dz1.sum(axis=0)
    dw1 = x.T @ dz1
    return [dw1, db1, dw2, db2, dw3, db3]


# -- losses -------------------------------------------------------------------

def squared_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. the predictions."""
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / len(pred)


def logistic_loss(score: np.ndarray, target: np.ndarray):
    """Binomial deviance on half-log-odds scores.

    Targets are 0/1; internally y = 2*target - 1 and the per-sample loss is
    log(1 + exp(-2*y*score)), so the implied probability is 1/(1+exp(-2F)).
    """
    y = 2.0 * target - 1.0
    z = -2.0 * y * score
    loss = float(np.mean(np.logaddexp(0.0, z)))
    dscore = -2.0 * y * expit(z) / len(score)
    return loss, dscore


LOSSES = {"squared": squared_loss, "logistic": logistic_loss}


def gradient(net: Subnet, x: np.ndarray, target: np.ndarray, loss: str = "squared"):
    """Exact analytic gradient of the mean batch loss, ordered like params()."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    out, cache = _forward_cache(net, x)
    _, dout = LOSSES[loss](out, np.asarray(target, dtype=np.float64))
    return _backward(net, cache, dout)


# -- optimizer ----------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 1000
    fine_tune_epochs: int = 200
    batch_size: int = 256
    patience: int = 100
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if min(self.max_epochs, self.fine_tune_epochs, self.batch_size) < 1:
            raise ValueError("epoch and batch settings must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")

    def reseeded(self, seed: int) -> "TrainConfig":
        return TrainConfig(
            self.learning_rate,
            self.max_epochs,
            self.fine_tune_epochs,
            self.batch_size,
            self.patience,
            self.validation_fraction,
            seed,
        )


# -- generic training loop ----------------------------------------------------

class _SingleNet:
    """Adapter giving one Subnet the interface train_loop expects."""

    def __init__(self, net, x, target, loss, lr):
        self.net = net
        self.x = np.asarray(x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.target = np.asarray(target, dtype=np.float64)
        self.loss = LOSSES[loss]
        self.opt = Adam(net.params(), lr=lr)

    def loss_on(self, rows) -> float:
        out = forward_batch(self.net, self.x[rows])
        return self.loss(out, self.target[rows])[0]

    def step_batch(self, rows) -> float:
        out, cache = _forward_cache(self.net, self.x[rows])
        value, dout = self.loss(out, self.target[rows])
        self.opt.step(self.net.params(), _backward(self.net, cache, dout))
        return value

    def snapshot(self):
        return [p.copy() for p in self.net.params()]

    def restore(self, state) -> None:
        for p, s in zip(self.net.params(), state):
            p[...] = s


def train_loop(model, n_samples: int, config: TrainConfig, max_epochs: int):
    """Mini-batch epochs with patience early stopping on an inner validation
    fraction carved out of the given samples. Returns (trace, best_epoch)
    where trace rows are (epoch, train_loss, val_loss); the model is left at
    the best-validation-epoch parameters (epoch 0 = untrained counts too).
    """
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n_samples)
    n_val = int(np.floor(config.validation_fraction * n_samples + 0.5))
    n_val = min(max(n_val, 1), n_samples - 1) if n_samples >= 2 else 0
    val_rows = perm[:n_val]
    fit_rows = perm[n_val:] if n_val else perm
    monitor_rows = val_rows if n_val else fit_rows

    trace = [(0, model.loss_on(fit_rows), model.loss_on(monitor_rows))]
    best_val, best_epoch, best_state = trace[0][2], 0, model.snapshot()
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(fit_rows))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = fit_rows[order[start : start + config.batch_size]]
            total += model.step_batch(batch) * len(batch)
        train_loss = total / len(fit_rows)
        val_loss = model.loss_on(monitor_rows)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch} "
                f"(train={train_loss}, val={val_loss}); try a smaller learning rate"
            )
        trace.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.snapshot()
        elif epoch - best_epoch >= config.patience:
            break
    model.restore(best_state)
    return trace, best_epoch


def train(net: Subnet, x, target, config: TrainConfig, loss: str = "squared"):
    """Fit one subnet; returns (net, trace). The net is updated in place and
    holds the parameters of the best validation epoch."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if x.ndim > 1 else len(x)
    if n == 0:
        raise ValueError("empty training data")
    adapter = _SingleNet(net, x, target, loss, config.learning_rate)
    trace, _ = train_loop(adapter, n, config, config.max_epochs)
    return net, trace


# -- vectorized bank of same-shape subnets -------------------------------------

class SubnetArray:
    """E structurally identical subnets evaluated with batched matmuls.

    Inputs use layout (E, B, arity). Kept numerically identical to looping
    the scalar Subnet path (covered by tests); this is the fast route for
    joint stage training.
    """

    def __init__(self, arity, w1, b1, w2, b2, w3, b3, offset):
        self.arity = arity
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.w3, self.b3, self.offset = w3, b3, offset

    @classmethod
    def init(cls, count: int, arity: int, seed: int, hidden=HIDDEN) -> "SubnetArray":
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        return cls(
            arity,
            w1=glorot(rng, arity, h1, (count, arity, h1)),
            b1=np.zeros((count, h1)),
            w2=glorot(rng, h1, h2, (count, h1, h2)),
            b2=np.zeros((count, h2)),
            w3=glorot(rng, h2, 1, (count, h2)),
            b3=np.zeros(count),
            offset=np.zeros(count),
        )

    @classmethod
    def from_subnets(cls, nets: list[Subnet]) -> "SubnetArray":
        arity = nets[0].arity
        if any(n.arity != arity for n in nets):
            raise ValueError("mixed arities in one bank")
        return cls(
            arity,
            w1=np.stack([n.w1 for n in nets]),
            b1=np.stack([n.b1 for n in nets]),
            w2=np.stack([n.w2 for n in nets]),
            b2=np.stack([n.b2 for n in nets]),
            w3=np.stack([n.w3 for n in nets]),
            b3=np.array([n.b3[0] for n in nets]),
            offset=np.array([n.output_offset for n in nets]),
        )

    def to_subnets(self) -> list[Subnet]:
        return [
            Subnet(
                self.arity,
                self.w1[e].copy(),
                self.b1[e].copy(),
                self.w2[e].copy(),
                self.b2[e].copy(),
                self.w3[e].copy(),
                np.array([self.b3[e]]),
                float(self.offset[e]),
            )
            for e in range(self.count)
        ]

    @property
    def count(self) -> int:
        return self.w1.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x: np.ndarray):
        # x: (E, B, arity) -> out: (E, B)
        a1 = np.tanh(np.matmul(x, self.w1) + self.b1[:, None, :])
        a2 = np.tanh(np.matmul(a1, self.w2) + self.b2[:, None, :])
        out = np.matmul(a2, self.w3[:, :, None])[:, :, 0]
        out += (self.b3 + self.offset)[:, None]
        return out, (x, a1, a2)

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        x, a1, a2 = cache
        db3 = dout.sum(axis=1)
        dw3 = np.einsum("ebh,eb->eh", a2, dout)
        da2 = dout[:, :, None] * self.w3[:, None, :]
        dz2 = da2 * (1.0 - a2 * a2)
        db2 = dz2.sum(axis=1)
        dw2 = np.matmul(a1.transpose(0, 2, 1), dz2)
        da1 = np.matmul(dz2, self.w2.transpose(0, 2, 1))
        dz1 = da1 * (1.0 - a1 * a1)
        db1 = dz1.sum(axis=1)
        dw1 = np.matmul(x.transpose(0, 2, 1), dz1)
        return [dw1, db1, dw2, db2, dw3, db3]


def subnet_to_dict(net: Subnet) -> dict:
    return {
        "arity": net.arity,
        "w1": net.w1.tolist(),
        "b1": net.b1.tolist(),
        "w2": net.w2.tolist(),
        "b2": net.b2.tolist(),
        "w3": net.w3.tolist(),
        "b3": net.b3.tolist(),
        "output_offset": net.output_offset,
    }


def subnet_from_dict(d: dict) -> Subnet:
    return Subnet(
        int(d["arity"]),
        np.array(d["w1"], dtype=np.float64),
        np.array(d["b1"], dtype=np.float64),
        np.array(d["w2"], dtype=np.float64),
        np.array(d["b2"], dtype=np.float64),
        np.array(d["w3"], dtype=np.float64),
        np.array(d["b3"], dtype=np.float64),
        float(d["output_offset"]),
    )
