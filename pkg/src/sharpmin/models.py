"""Small differentiable models and analytic loss landscapes.

Everything here is deliberately tiny (parameter counts up to a few
hundred) so that dense-Hessian oracles stay tractable in tests. No
normalization layers: curvature diagnostics need an unobscured Hessian.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import Batch, Dataset, Splits, make_synthetic
from .errors import ConfigError
from .tensor import ParamVector, Tensor

ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}
LOSS_KINDS = ("xent", "mse")


def _one_hot(y, classes):
    out = np.zeros((len(y), classes))
    out[np.arange(len(y)), y] = 1.0
    return out


class Mlp:
    """Fully connected net; cross-entropy (optional label smoothing) or MSE loss.

    Weights init from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded, so two
    models built with the same arguments are identical.
    """

    def __init__(self, layers, activation="tanh", seed=0, loss_kind="xent",
                 label_smoothing=0.0):
        if len(layers) < 2:
            raise ConfigError("need at least input and output sizes")
        if any(int(s) <= 0 for s in layers):
            raise ConfigError(f"layer sizes must be positive, got {layers}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {loss_kind!r}")
        if not 0.0 <= label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        self.layers = [int(s) for s in layers]
        self.activation = activation
        self.seed = seed
        self.loss_kind = loss_kind
        self.label_smoothing = label_smoothing
        self.num_classes = self.layers[-1]
        self.name = f"mlp{self.layers}-{activation}-{loss_kind}"

    @property
    def param_dim(self):
        return sum(
            a * b + b for a, b in zip(self.layers[:-1], self.layers[1:])
        )

    def init_params(self, seed=None) -> ParamVector:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        segs = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            segs.append((f"w{i}", rng.uniform(-bound, bound, (fan_in, fan_out))))
            segs.append((f"b{i}", rng.uniform(-bound, bound, (fan_out,))))
        return ParamVector.from_arrays(segs)

    def logits(self, params: ParamVector, x: np.ndarray) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = T.constant(np.asarray(x, dtype=T.get_dtype()), "x")
        tensors = dict(params.segments)
        n_layers = len(self.layers) - 1
        for i in range(n_layers):
            h = T.add_bias(T.matmul(h, tensors[f"w{i}"]), tensors[f"b{i}"])
            if i < n_layers - 1:
                h = act(h)
        return h

    def per_example_losses(self, params: ParamVector, batch: Batch) -> Tensor:
        z = self.logits(params, batch.x)
        n, classes = z.shape
        targets = _one_hot(batch.y, classes)
        if self.label_smoothing > 0.0:
            a = self.label_smoothing
            targets = (1.0 - a) * targets + a / classes
        if self.loss_kind == "mse":
            diff = T.cadd(z, -targets)
            return T.scale(T.sum1(T.mul(diff, diff)), 1.0 / classes)
        # stable log-softmax; the row-max shift is a constant and leaves
        # all derivatives unchanged
        shift = z.data.max(axis=1, keepdims=True)
        zs = T.cadd(z, -shift)
        lse = T.cadd(T.log(T.sum1(T.exp(zs))), shift[:, 0])
        logp = T.sub(z, T.broadcast1(lse, classes))
        return T.neg(T.sum1(T.cmul(logp, targets)))

    def loss(self, params: ParamVector, batch: Batch) -> Tensor:
        if len(batch) == 0:
            raise ConfigError("empty batch")
        per_ex = self.per_example_losses(params, batch)
        return T.scale(T.sum_all(per_ex), 1.0 / len(batch))

    def predict_labels(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, x).data, axis=1)

    def error_rate(self, params: ParamVector, ds) -> float:
        pred = self.predict_labels(params, ds.x)
        return float(np.mean(pred != ds.y))


def make_mlp(layers, activation="tanh", seed=0, loss_kind="xent",
             label_smoothing=0.0) -> Mlp:
    return Mlp(layers, activation, seed, loss_kind, label_smoothing)


# ---------------------------------------------------------------------------
# analytic landscapes


class AnalyticLandscape:
    """Closed-form scalar loss over a low-dim parameter vector.

    Carries analytic gradient/Hessian callables next to the taped loss, so
    autodiff results can be cross-checked exactly. The batch argument is
    ignored; landscapes have no data.
    """

    def __init__(self, name, dim, tape_fn, value_fn, grad_fn, hess_fn, init):
        self.name = name
        self.dim = dim
        self._tape_fn = tape_fn
        self.value = value_fn
        self.gradient = grad_fn
        self.hessian = hess_fn
        self._init = np.asarray(init, dtype=np.float64)

    @property
    def param_dim(self):
        return self.dim

    def init_params(self, seed=None) -> ParamVector:
        w = self._init
        if seed is not None:
            w = w + np.random.default_rng(seed).normal(0.0, 0.1, self.dim)
        return self.params_from(w)

    def params_from(self, w) -> ParamVector:
        arr = np.asarray(w, dtype=np.float64).reshape(self.dim)
        return ParamVector.from_arrays([("w", arr)])

    def loss(self, params: ParamVector, batch=None) -> Tensor:
        return self._tape_fn(params.tensors()[0])


def make_quadratic(matrix) -> AnalyticLandscape:
    """L(w) = 0.5 w^T A w for a symmetric matrix A."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError("quadratic matrix must be square")
    a = 0.5 * (a + a.T)
    k = a.shape[0]

    def tape(w: Tensor) -> Tensor:
        col = T.reshape(w, (k, 1))
        aw = T.matmul(T.constant(a, "A"), col)
        return T.scale(T.sum_all(T.mul(col, aw)), 0.5)

    return AnalyticLandscape(
        name=f"quadratic{k}",
        dim=k,
        tape_fn=tape,
        value_fn=lambda w: 0.5 * float(w @ a @ w),
        grad_fn=lambda w: a @ w,
        hess_fn=lambda w: a.copy(),
        init=np.ones(k),
    )


class DoubleWell(AnalyticLandscape):
    """Smoothed min of two 1-D quadratic wells with unequal curvature.

    L(x) = softmin_tau(q_sharp(x), q_flat(x)) with q_i = 0.5 c_i (x - x_i)^2.
    The temperature is small enough that at either minimum the other well's
    Boltzmann weight underflows to zero, so the minima sit at exactly 0 and
    the curvature there equals c_i exactly in float64.
    """

    def __init__(self, sharp_curv, flat_curv, separation):
        if not sharp_curv > flat_curv > 0:
            raise ConfigError(
                f"need sharp_curv > flat_curv > 0, got {sharp_curv}, {flat_curv}"
            )
        if separation <= 0:
            raise ConfigError("separation must be positive")
        self.sharp_curv = float(sharp_curv)
        self.flat_curv = float(flat_curv)
        self.separation = float(separation)
        self.x_sharp = -self.separation / 2.0
        self.x_flat = +self.separation / 2.0
        # exp(-q_other/tau) == 0.0 in float64 at both minima requires
        # q_other/tau > 745; q_other at a minimum is 0.5*c*sep^2
        self.tau = self.flat_curv * self.separation**2 / 1600.0
        self._curvs = np.array([self.sharp_curv, self.flat_curv])
        self._mins = np.array([self.x_sharp, self.x_flat])
        super().__init__(
            name="double_well",
            dim=1,
            tape_fn=self._tape,
            value_fn=self._value,
            grad_fn=self._grad,
            hess_fn=self._hess,
            init=np.array([self.x_sharp]),
        )

    def _wells(self, x):
        d = x[..., None] - self._mins
        q = 0.5 * self._curvs * d * d
        return d, q

    def _weights(self, x):
        _, q = self._wells(x)
        m = q.min(axis=-1, keepdims=True)
        e = np.exp(-(q - m) / self.tau)
        return e / e.sum(axis=-1, keepdims=True)

    def _value(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(())
        _, q = self._wells(x)
        m = q.min()
        return float(m - self.tau * np.log(np.sum(np.exp(-(q - m) / self.tau))))

    def _grad(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(())
        d, _ = self._wells(x)
        w = self._weights(x)
        return np.array([float(np.sum(w * self._curvs * d))])

    def _hess(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(())
        d, _ = self._wells(x)
        w = self._weights(x)
        dq = self._curvs * d
        first = float(np.sum(w * dq))
        return np.array([[float(np.sum(w * self._curvs))
                          - (float(np.sum(w * dq * dq)) - first**2) / self.tau]])

    def _tape(self, w: Tensor) -> Tensor:
        terms = []
        for c, x0 in zip(self._curvs, self._mins):
            d = T.cadd(w, -x0)
            terms.append(T.scale(T.mul(d, d), 0.5 * c))
        m = np.minimum(terms[0].data, terms[1].data)
        e0 = T.exp(T.scale(T.cadd(terms[0], -m), -1.0 / self.tau))
        e1 = T.exp(T.scale(T.cadd(terms[1], -m), -1.0 / self.tau))
        soft = T.cadd(T.scale(T.log(T.add(e0, e1)), -self.tau), m)
        return T.sum_all(soft)


def make_double_well(sharp_curv, flat_curv, separation) -> DoubleWell:
    return DoubleWell(sharp_curv, flat_curv, separation)


def landscape_splits() -> Splits:
    """Trivial one-example splits so landscapes can drive the training loop."""
    mk = lambda v, split: Dataset(
        np.array([[float(v)]]), np.array([0]), 1, split, "landscape-dummy"
    )
    return Splits(mk(0, "train"), mk(1, "val"), mk(2, "test"))


# ---------------------------------------------------------------------------
# registry used by gradient/HVP integrity checks


def model_zoo():
    """(name, model, batch) triples covering every architecture and loss kind."""
    moons = make_synthetic("moons", 80, 0.2, seed=11).train
    blobs = make_synthetic("blobs", 90, 0.8, seed=12).train
    members = [
        ("logreg", make_mlp([2, 3], seed=1), Batch(blobs.x[:32], blobs.y[:32])),
        ("mlp_tanh", make_mlp([2, 8, 2], seed=2), Batch(moons.x[:32], moons.y[:32])),
        ("mlp_relu", make_mlp([2, 8, 2], activation="relu", seed=3),
         Batch(moons.x[:32], moons.y[:32])),
        ("mlp_mse", make_mlp([2, 6, 2], seed=4, loss_kind="mse"),
         Batch(moons.x[:32], moons.y[:32])),
        ("mlp_smoothed", make_mlp([2, 5, 3], seed=5, label_smoothing=0.1),
         Batch(blobs.x[:32], blobs.y[:32])),
        ("deep_tanh", make_mlp([2, 6, 6, 2], seed=6), Batch(moons.x[:24], moons.y[:24])),
    ]
    rng = np.random.default_rng(21)
    spd = rng.normal(size=(6, 6))
    spd = spd @ spd.T + 0.5 * np.eye(6)
    for land in (
        make_quadratic(np.diag([2.0, 4.0])),
        make_quadratic(spd),
        make_double_well(100.0, 1.0, 4.0),
    ):
        members.append((land.name, land, landscape_splits().train.batch()))
    return members
