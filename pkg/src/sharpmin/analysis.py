"""Post-hoc landscape diagnostics.

Lanczos Hessian spectra (matrix-free, full reorthogonalization), norm-ball
sharpness estimation, the PAC-Bayes generalization-bound evaluator, and
the first-vs-second-order update similarity probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .optim import SamConfig, inner_maximize, sam_gradient, sam_gradient_second_order
from .tensor import ParamVector, hvp, loss_value

_BREAKDOWN_TOL = 1e-12


@dataclass(frozen=True)
class SpectrumReport:
    """Ritz-value estimates of a symmetric operator's spectrum."""

    ritz_values: tuple
    lambda_max: float
    bulk_ratio: float | None  # lambda_max / lambda_5 when defined
    iterations: int
    residual_norms: tuple
    breakdown: bool

    def to_json_dict(self):
        return {
            "ritz_values": list(self.ritz_values),
            "lambda_max": self.lambda_max,
            "bulk_ratio": self.bulk_ratio,
            "iterations": self.iterations,
            "residual_norms": list(self.residual_norms),
            "breakdown": self.breakdown,
        }


@dataclass(frozen=True)
class BoundReport:
    """Decomposed PAC-Bayes bound: neighborhood max loss plus complexity term."""

    sharpness_term: float
    norm_term: float
    total: float
    inputs: dict

    def to_json_dict(self):
        return {
            "sharpness_term": self.sharpness_term,
            "norm_term": self.norm_term,
            "total": self.total,
            "inputs": dict(self.inputs),
        }


def _as_train_split(dataset):
    return dataset.train if hasattr(dataset, "train") else dataset


# ---------------------------------------------------------------------------
# Lanczos


def lanczos_tridiagonal(matvec, dim: int, k_iters: int, seed):
    """Lanczos iteration with full reorthogonalization on a matrix-free operator.

    Starts from a seeded normalized Rademacher vector. Returns
    (ritz_values desc, residual_norms, iterations, breakdown). Residuals
    are the classical |beta_k * s_k| Ritz-pair bounds.
    """
    if k_iters < 1:
        raise ConfigError("k_iters must be >= 1")
    if k_iters > dim:
        raise ConfigError(f"k_iters={k_iters} exceeds operator dimension {dim}")
    rng = np.random.default_rng(seed)
    r = rng.integers(0, 2, dim).astype(np.float64) * 2.0 - 1.0
    q = r / np.linalg.norm(r)
    basis = [q]
    alphas, betas = [], []
    breakdown = False
    final_beta = 0.0
    for j in range(k_iters):
        w = matvec(basis[j])
        alpha = float(np.dot(basis[j], w))
        alphas.append(alpha)
        w = w - alpha * basis[j]
        if j > 0:
            w = w - betas[j - 1] * basis[j - 1]
        # two reorthogonalization sweeps against the whole basis; cheap at
        # these dimensions and keeps Ritz values clean
        qmat = np.stack(basis, axis=1)
        for _ in range(2):
            w = w - qmat @ (qmat.T @ w)
        beta = float(np.linalg.norm(w))
        final_beta = beta
        if beta < _BREAKDOWN_TOL:
            breakdown = j + 1 < k_iters
            break
        if j + 1 < k_iters:
            betas.append(beta)
            basis.append(w / beta)
    it = len(alphas)
    tri = np.diag(alphas)
    for i, b in enumerate(betas[: it - 1]):
        tri[i, i + 1] = b
        tri[i + 1, i] = b
    vals, vecs = np.linalg.eigh(tri)
    order = np.argsort(vals)[::-1]
    ritz = vals[order]
    residuals = np.abs(final_beta * vecs[-1, order])
    return ritz, residuals, it, breakdown


def _spectrum_from(ritz, residuals, iterations, breakdown) -> SpectrumReport:
    bulk = None
    if len(ritz) >= 5 and ritz[4] > 0:
        bulk = float(ritz[0] / ritz[4])
    return SpectrumReport(
        ritz_values=tuple(float(v) for v in ritz),
        lambda_max=float(ritz[0]),
        bulk_ratio=bulk,
        iterations=iterations,
        residual_norms=tuple(float(r) for r in residuals),
        breakdown=breakdown,
    )


def lanczos_spectrum(model, params: ParamVector, dataset, k_iters: int,
                     seed) -> SpectrumReport:
    """Ritz values of the full-dataset training-loss Hessian at `params`.

    The Hessian is accessed only through Hessian-vector products; weight
    decay is not part of the differentiated loss.
    """
    train = _as_train_split(dataset)
    if k_iters > params.dim:
        raise ConfigError(
            f"k_iters={k_iters} exceeds parameter dimension {params.dim}"
        )
    batch = train.batch()

    def matvec(v: np.ndarray) -> np.ndarray:
        return hvp(model, params, batch, params.unflatten(v)).flatten()

    ritz, residuals, it, breakdown = lanczos_tridiagonal(
        matvec, params.dim, k_iters, seed
    )
    return _spectrum_from(ritz, residuals, it, breakdown)


def dense_hessian(model, params: ParamVector, dataset) -> np.ndarray:
    """Explicitly assembled Hessian, column by column from basis-vector HVPs.

    Quadratic cost in the parameter count; intended as an oracle for small
    models only.
    """
    train = _as_train_split(dataset)
    batch = train.batch()
    dim = params.dim
    cols = np.zeros((dim, dim))
    basis = np.zeros(dim)
    for i in range(dim):
        basis[:] = 0.0
        basis[i] = 1.0
        cols[:, i] = hvp(model, params, batch, params.unflatten(basis)).flatten()
    return cols


# ---------------------------------------------------------------------------
# sharpness


def estimate_sharpness(model, params: ParamVector, dataset, rho: float,
                       p: float = 2.0, steps: int = 1) -> float:
    """max over the rho-ball of L(w+eps) - L(w), via projected gradient ascent.

    Ascent settings: `steps` unit-gradient moves of length rho/steps each
    (projected onto the ball), with a seeded escape direction at exact
    stationary points. The maximum is taken over the whole trajectory
    including the starting point eps=0, so the estimate is never negative.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    train = _as_train_split(dataset)
    batch = train.batch()
    base = loss_value(model, params, batch)
    if rho == 0.0:
        return 0.0
    trajectory = inner_maximize(
        model, params, batch, rho, p, steps,
        normalized_steps=True, return_trajectory=True,
    )
    best = base
    for eps in trajectory[1:]:
        best = max(best, loss_value(model, params.add(eps), batch))
    return best - base


def sharpness_deltas(model, params: ParamVector, dataset, rho: float,
                     p: float = 2.0, steps: int = 1):
    """(loss delta, error-rate delta) under the worst perturbation found.

    Ascent always runs on the differentiable loss; the error-rate delta is
    evaluated at the loss-maximizing perturbation.
    """
    train = _as_train_split(dataset)
    batch = train.batch()
    base_loss = loss_value(model, params, batch)
    base_err = float(np.mean(model.predict_labels(params, train.x) != train.y))
    if rho == 0.0:
        return 0.0, 0.0
    trajectory = inner_maximize(
        model, params, batch, rho, p, steps,
        normalized_steps=True, return_trajectory=True,
    )
    best_loss, best_eps = base_loss, None
    for eps in trajectory[1:]:
        val = loss_value(model, params.add(eps), batch)
        if val > best_loss:
            best_loss, best_eps = val, eps
    if best_eps is None:
        return 0.0, 0.0
    at_worst = params.add(best_eps)
    worst_err = float(np.mean(model.predict_labels(at_worst, train.x) != train.y))
    return best_loss - base_loss, worst_err - base_err


# ---------------------------------------------------------------------------
# PAC-Bayes bound evaluator


def pac_bayes_bound(max_loss: float, w_norm_sq: float, rho: float, k: int,
                    n: int, delta: float) -> BoundReport:
    """Evaluate the sharpness-based generalization bound.

    total = max_loss + sqrt((k*log(1 + (||w||^2/rho^2)(1 + sqrt(log(n)/k))^2)
                             + 4*log(n/delta) + 8*log(6n + 3k)) / (n - 1))

    The proof's explicit 8*log(6n+3k) stands in for the O(1) term. All
    logs are natural.
    """
    if n < 2:
        raise ConfigError("n must be >= 2")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ConfigError("delta must lie in (0, 1)")
    if rho <= 0.0:
        raise ConfigError("rho must be > 0")
    if w_norm_sq < 0.0 or not math.isfinite(w_norm_sq):
        raise ConfigError("w_norm_sq must be finite and >= 0")
    if not math.isfinite(max_loss):
        raise ConfigError("max_loss must be finite")
    ratio = w_norm_sq / rho**2
    inflate = (1.0 + math.sqrt(math.log(n) / k)) ** 2
    numerator = (
        k * math.log1p(ratio * inflate)
        + 4.0 * math.log(n / delta)
        + 8.0 * math.log(6.0 * n + 3.0 * k)
    )
    norm_term = math.sqrt(numerator / (n - 1))
    return BoundReport(
        sharpness_term=float(max_loss),
        norm_term=norm_term,
        total=float(max_loss) + norm_term,
        inputs={
            "max_loss": float(max_loss),
            "w_norm_sq": float(w_norm_sq),
            "rho": float(rho),
            "k": int(k),
            "n": int(n),
            "delta": float(delta),
        },
    )


# ---------------------------------------------------------------------------
# update similarity


def update_cosine_similarity(model, params: ParamVector, batch,
                             cfg: SamConfig) -> float:
    """Cosine of the angle between the first- and second-order updates.

    Returns exactly 1.0 when the two updates are identical (e.g. rho=0)
    and NaN when either update has zero norm.
    """
    a = sam_gradient(model, params, batch, cfg).flatten()
    b = sam_gradient_second_order(model, params, batch, cfg).flatten()
    if np.array_equal(a, b):
        return 1.0
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))
