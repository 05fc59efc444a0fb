"""SGD and the sharpness-aware update family.

Includes the dual-norm perturbation, the two-gradient first-order update,
the exact second-order variant (differentiating through the perturbation),
multi-step projected-ascent inner maximization, the random-direction
baseline, and sub-batch (m-sharpness) gradient averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import ConfigError, DivergenceError, NonFiniteError
from .tensor import ParamVector, grad, vjp_backward

DIVERGENCE_THRESHOLD = 1e6
_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class SamConfig:
    """Sharpness-aware update settings.

    p_norm may be any p in (1, inf]; 2 and inf are the supported surface
    for every variant, the rest only for the one-shot perturbation.
    m = 0 perturbs the whole batch; m > 0 splits it into independent
    sub-batches of size m, each with its own perturbation.
    """

    rho: float = 0.05
    p_norm: float = 2.0
    m: int = 0
    ascent_steps: int = 1
    second_order: bool = False
    random_perturbation: bool = False

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if not (self.p_norm > 1):
            raise ConfigError("p_norm must lie in (1, inf]")
        if self.ascent_steps < 1:
            raise ConfigError("ascent_steps must be >= 1")
        if self.m < 0:
            raise ConfigError("m must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = "constant"  # constant | cosine
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class OptimizerState:
    params: ParamVector
    momentum: ParamVector
    t: int = 0

    def __post_init__(self):
        if self.momentum.dim != self.params.dim:
            raise ConfigError("momentum buffer dimension != parameter dimension")


@dataclass
class EpochRow:
    step: int
    epoch: int
    train_loss: float
    train_err: float
    val_err: float
    test_err: float
    lr: float
    grad_evals: int


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]


# ---------------------------------------------------------------------------
# the dual-norm perturbation


def epsilon_hat(g: ParamVector, rho: float, p: float) -> ParamVector:
    """Norm-ball ascent direction: argmax of <eps, g> subject to ||eps||_p <= rho.

    p=2 rescales the gradient to norm rho; p=inf takes rho * sign(g);
    general p in (1, inf) uses the dual-exponent form with q = p/(p-1).
    A zero (or sub-1e-12) gradient yields the zero vector: at a stationary
    point the linearized inner problem is uninformative, so the
    perturbation is skipped rather than raising.
    """
    if rho < 0:
        raise ConfigError("rho must be >= 0")
    flat = g.flatten()
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("gradient", "cannot form perturbation")
    if rho == 0.0:
        return g.zeros_like()
    if math.isinf(p):
        eps = rho * np.sign(flat)
    elif p == 2.0:
        norm = float(np.linalg.norm(flat))
        if norm < _NORM_GUARD:
            return g.zeros_like()
        eps = flat * (rho / norm)
    else:
        if not p > 1:
            raise ConfigError("p_norm must lie in (1, inf]")
        q = p / (p - 1.0)
        a = np.abs(flat)
        denom_q = float(np.sum(a**q))
        if denom_q < _NORM_GUARD**q:
            return g.zeros_like()
        eps = rho * np.sign(flat) * a ** (q - 1.0) / denom_q ** (1.0 / p)
    return g.unflatten(eps)


def _is_zero(pv: ParamVector) -> bool:
    return not any(seg.data.any() for _, seg in pv.segments)


def _perturbed(params: ParamVector, eps: ParamVector) -> ParamVector:
    # adding an all-zero perturbation must leave params bitwise untouched
    return params if _is_zero(eps) else params.add(eps)


def sam_gradient(model, params: ParamVector, batch, cfg: SamConfig) -> ParamVector:
    """First-order sharpness-aware gradient: grad evaluated at the perturbed point.

    Always performs exactly two gradient computations, matching the
    advertised 2x cost of a sharpness-aware step.
    """
    g1 = grad(model, params, batch)
    eps = epsilon_hat(g1, cfg.rho, cfg.p_norm)
    return grad(model, _perturbed(params, eps), batch)


def sam_gradient_second_order(model, params: ParamVector, batch,
                              cfg: SamConfig) -> ParamVector:
    """Exact gradient of w -> L(w + eps_hat(w)), second-order terms included.

    Built by keeping the perturbation inside the tape: the first backward
    pass produces gradient *tensors*, the perturbation is assembled from
    them with differentiable ops, and a second backward pass through the
    perturbed loss picks up the Hessian-dependent correction.
    """
    leaves = params.tensors()
    first_loss = model.loss(params, batch)
    g = vjp_backward(first_loss, leaves)
    rho, p = cfg.rho, cfg.p_norm

    if rho == 0.0:
        return ParamVector(
            (name, T.constant(c.data.copy(), name))
            for (name, _), c in zip(params.segments, g)
        )
    if math.isinf(p):
        # sign(g) is piecewise constant, so the correction vanishes a.e.
        eps_segs = [T.constant(rho * np.sign(c.data), "eps") for c in g]
        perturbed = ParamVector(
            (name, T.add(leaf, e))
            for (name, leaf), e in zip(params.segments, eps_segs)
        )
    elif p == 2.0:
        sq = None
        for c in g:
            term = T.sum_all(T.mul(c, c))
            sq = term if sq is None else T.add(sq, term)
        # guard keeps the map smooth through g ~ 0 without moving the value
        coef = T.scale(T.reciprocal(T.sqrt(T.cadd(sq, _NORM_GUARD**2))), rho)
        perturbed = ParamVector(
            (name, T.add(leaf, T.smul(c, coef)))
            for (name, leaf), c in zip(params.segments, g)
        )
    else:
        raise ConfigError("second-order update supports p_norm in {2, inf} only")

    second_loss = model.loss(perturbed, batch)
    total = vjp_backward(second_loss, leaves)
    return ParamVector(
        (name, T.constant(c.data.copy(), name))
        for (name, _), c in zip(params.segments, total)
    )


def _project(eps_flat: np.ndarray, rho: float, p: float) -> np.ndarray:
    if math.isinf(p):
        return np.clip(eps_flat, -rho, rho)
    if p == 2.0:
        norm = float(np.linalg.norm(eps_flat))
        if norm > rho:
            return eps_flat * (rho / norm)
        return eps_flat
    raise ConfigError("projection supports p_norm in {2, inf} only")


def inner_maximize(model, params: ParamVector, batch, rho: float, p: float,
                   steps: int, step_size: float | None = None,
                   normalized_steps: bool = False, kick_seed: int = 0,
                   return_trajectory: bool = False):
    """Projected gradient ascent on eps -> L(w + eps) over the p-ball of radius rho.

    Raw-gradient steps followed by projection; step_size defaults to
    rho/steps. With steps=1 and a step size of at least rho/||g|| this
    reproduces the one-shot dual-norm direction for p=2.

    With normalized_steps the iterate instead moves a fixed distance
    step_size along the unit gradient each step (total path length rho at
    the default), taking a seeded random direction wherever the gradient
    vanishes; sharpness estimation uses this flavor so it can leave exact
    stationary points.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if step_size is None:
        step_size = rho / steps
    eps = params.zeros_like()
    trajectory = [eps]
    for k in range(steps):
        g = grad(model, _perturbed(params, eps), batch).flatten()
        if normalized_steps:
            norm = float(np.linalg.norm(g))
            if norm < _NORM_GUARD:
                rng = np.random.default_rng([kick_seed, k])
                g = rng.standard_normal(g.shape)
                norm = float(np.linalg.norm(g))
            g = g / norm
        moved = eps.flatten() + step_size * g
        eps = eps.unflatten(_project(moved, rho, p))
        trajectory.append(eps)
    return trajectory if return_trajectory else eps


def msharpness_gradient(model, params: ParamVector, batch, cfg: SamConfig,
                        executor=None) -> ParamVector:
    """Mean of independent sub-batch SAM gradients (each with its own perturbation).

    Sub-batches are contiguous index ranges of size cfg.m. When an
    executor is given they are computed concurrently, but the mean always
    reduces in sub-batch index order so results match the serial path
    bitwise.
    """
    n = len(batch)
    m = cfg.m if cfg.m > 0 else n
    if n % m != 0:
        raise ConfigError(f"m={m} does not divide batch size {n}")
    count = n // m

    def one(i):
        sub = Batch(batch.x[i * m : (i + 1) * m], batch.y[i * m : (i + 1) * m])
        return sam_gradient(model, params, sub, cfg)

    if executor is not None and count > 1:
        grads = list(executor.map(one, range(count)))
    else:
        grads = [one(i) for i in range(count)]
    acc = grads[0]
    for g in grads[1:]:
        acc = acc.add(g)
    return acc.scaled(1.0 / count)


def random_perturbation(like: ParamVector, rho: float, seed) -> ParamVector:
    """Seeded Gaussian direction rescaled to Euclidean norm exactly rho."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(like.dim)
    ne = float(np.linalg.norm(z))
    return like.unflatten(z * (rho / ne))


def random_perturbation_gradient(model, params: ParamVector, batch, rho: float,
                                 seed) -> ParamVector:
    """Ablation baseline: gradient at w + rho * z/||z|| for Gaussian z."""
    if rho < 0:
        raise ConfigError("rho must be >= 0")
    if rho == 0.0:
        return grad(model, params, batch)
    eps = random_perturbation(params, rho, seed)
    return grad(model, params.add(eps), batch)


# ---------------------------------------------------------------------------
# base optimizer


def lr_at(tcfg: TrainConfig, t: int, total_steps: int) -> float:
    if tcfg.schedule == "constant":
        return tcfg.lr
    if total_steps <= 1:
        return tcfg.lr
    # reaches exactly 0 on the final step
    return tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


def step(state: OptimizerState, g: ParamVector, tcfg: TrainConfig,
         total_steps: int) -> OptimizerState:
    """One SGD step: weight decay onto the gradient, momentum, scheduled lr."""
    if g.dim != state.params.dim:
        raise ConfigError("gradient dimension != parameter dimension")
    eta = lr_at(tcfg, state.t, total_steps)
    g_eff = g.add(state.params, tcfg.weight_decay) if tcfg.weight_decay else g
    buf = state.momentum.scaled(tcfg.momentum).add(g_eff) if tcfg.momentum \
        else g_eff
    return OptimizerState(state.params.add(buf, -eta), buf, state.t + 1)


# ---------------------------------------------------------------------------
# training loop


def _gradient_for(model, params, batch, scfg, base_seed, t, executor):
    if scfg is None:
        return grad(model, params, batch)
    if scfg.random_perturbation:
        return random_perturbation_gradient(
            model, params, batch, scfg.rho, seed=[base_seed, 0x5EED, t]
        )
    if scfg.m > 0:
        return msharpness_gradient(model, params, batch, scfg, executor)
    if scfg.second_order:
        return sam_gradient_second_order(model, params, batch, scfg)
    if scfg.ascent_steps > 1:
        eps = inner_maximize(
            model, params, batch, scfg.rho, scfg.p_norm, scfg.ascent_steps
        )
        return grad(model, _perturbed(params, eps), batch)
    return sam_gradient(model, params, batch, scfg)


def _error_rate(model, params, ds) -> float:
    if hasattr(model, "predict_labels") and len(ds):
        return float(np.mean(model.predict_labels(params, ds.x) != ds.y))
    return float("nan")


def train(model, dataset, tcfg: TrainConfig, scfg: SamConfig | None = None,
          init_params: ParamVector | None = None,
          parallel_subbatches: bool = False):
    """Full seeded training loop; returns (final params, per-epoch metrics).

    scfg=None runs plain SGD. Batches are drawn without replacement from a
    per-epoch seeded shuffle; a trailing partial batch is dropped so every
    step sees the configured batch size.
    """
    train_ds, val_ds, test_ds = dataset.train, dataset.val, dataset.test
    if len(train_ds) == 0:
        raise ConfigError("empty training set")
    b = min(tcfg.batch_size, len(train_ds))
    steps_per_epoch = len(train_ds) // b
    total_steps = tcfg.epochs * steps_per_epoch
    if scfg is not None and scfg.m > 0 and b % scfg.m != 0:
        raise ConfigError(f"m={scfg.m} does not divide batch size {b}")

    params = init_params if init_params is not None else model.init_params()
    state = OptimizerState(params, params.zeros_like(), 0)
    rng = np.random.default_rng(tcfg.seed)
    log = MetricsLog()
    evals0 = T.grad_eval_count()

    pool = None
    if parallel_subbatches and scfg is not None and scfg.m > 0:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=4)
    try:
        for epoch in range(tcfg.epochs):
            perm = rng.permutation(len(train_ds))
            for i in range(steps_per_epoch):
                idx = perm[i * b : (i + 1) * b]
                batch = Batch(train_ds.x[idx], train_ds.y[idx])
                try:
                    g = _gradient_for(
                        model, state.params, batch, scfg, tcfg.seed, state.t, pool
                    )
                except NonFiniteError as exc:
                    raise DivergenceError(state.t, str(exc), metrics=log) from exc
                state = step(state, g, tcfg, total_steps)
            try:
                train_loss = T.loss_value(model, state.params, train_ds.batch())
            except NonFiniteError as exc:
                raise DivergenceError(state.t, str(exc), metrics=log) from exc
            if not math.isfinite(train_loss) or train_loss > DIVERGENCE_THRESHOLD:
                raise DivergenceError(state.t, f"train loss {train_loss}", metrics=log)
            log.rows.append(
                EpochRow(
                    step=state.t,
                    epoch=epoch,
                    train_loss=train_loss,
                    train_err=_error_rate(model, state.params, train_ds),
                    val_err=_error_rate(model, state.params, val_ds),
                    test_err=_error_rate(model, state.params, test_ds),
                    lr=lr_at(tcfg, state.t - 1, total_steps),
                    grad_evals=T.grad_eval_count() - evals0,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return state.params, log
