"""Meta-gradient estimators and exact oracles for the adapted objective.

The meta-objective treats one gradient step of task adaptation as part
of the loss: with inner stepsize alpha,

    F(w) = sum_i p_i f_i(w - alpha grad f_i(w)),

whose exact gradient is

    grad F(w) = sum_i p_i (I - alpha hess f_i(w)) grad f_i(w - alpha grad f_i(w)).

Three per-task descent directions estimate this from noisy oracles:

  * maml_direction      uses a noisy Hessian in (I - alpha H) v,
  * fomaml_direction    drops the Hessian factor entirely,
  * hfmaml_direction    replaces H v by a central finite difference of
                        two noisy gradients that share one data batch.

Sharing the batch means the additive noise cancels in the difference,
so on quadratics the probe reproduces A v exactly for any probe width.
The probe width delta = 1/(6 rho alpha ||v||) calibrates the remaining
curvature error to at most ||v|| / (6 alpha) times alpha, i.e. a sixth
of the correction term's scale.

Everything here is a pure function of its inputs and the RNG stream, so
repeated evaluation is reproducible and parallel evaluation is safe.
"""

from __future__ import annotations

import numpy as np

from .numerics import Mat, RngStream, Vec, standard_normals
from .stochastic import (
    HESS,
    INNER,
    OUTER,
    PROBE,
    BatchSpec,
    StochasticOracle,
    grad_noise_scale,
    hess_noise_scale,
)
from .tasks import TaskFamily

MAML = "maml"
FOMAML = "fomaml"
HFMAML = "hfmaml"
ALGORITHMS = (MAML, FOMAML, HFMAML)

ZERO_PROBE_TOL = 1e-12


def inner_step(task, w: Vec, alpha: float, D_in: int, oracle: StochasticOracle, rng: RngStream) -> Vec:
    """One stochastic adaptation step: w - alpha * noisy grad."""
    return w - alpha * oracle.grad(task, w, D_in, rng.child(INNER))


def maml_direction(
    task, w: Vec, alpha: float, oracle: StochasticOracle, batches: BatchSpec, rng: RngStream
) -> Vec:
    """(I - alpha H_tilde(w)) applied to the outer gradient at the adapted point."""
    w_i = inner_step(task, w, alpha, batches.D_in, oracle, rng)
    go = oracle.grad(task, w_i, batches.D_o, rng.child(OUTER))
    h = oracle.hess(task, w, batches.D_h, rng.child(HESS))
    return go - alpha * (h @ go)


def fomaml_direction(
    task, w: Vec, alpha: float, oracle: StochasticOracle, batches: BatchSpec, rng: RngStream
) -> Vec:
    """Outer gradient at the adapted point, Hessian factor dropped."""
    w_i = inner_step(task, w, alpha, batches.D_in, oracle, rng)
    return oracle.grad(task, w_i, batches.D_o, rng.child(OUTER))


def hvp_finite_diff(
    task, w: Vec, v: Vec, delta: float, D: int, oracle: StochasticOracle, rng: RngStream
) -> Vec:
    """Central-difference estimate of hess f(w) @ v from two noisy gradients.

    Both probe gradients are evaluated on the same stream, i.e. the same
    data batch, so their additive noise is identical and cancels in the
    difference.  The surviving error is curvature-only: at most
    rho * delta * ||v||^2 for a Hessian with Lipschitz modulus rho.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    probe = rng.child(PROBE)
    gp = oracle.grad(task, w + delta * v, D, probe)
    gm = oracle.grad(task, w - delta * v, D, probe)
    return (gp - gm) / (2.0 * delta)


def probe_delta(rho: float, alpha: float, v_norm: float, w: Vec) -> float:
    """Probe width for the Hessian-free correction.

    1/(6 rho alpha ||v||) balances the curvature error against the size
    of the correction term.  When the calibration product vanishes (flat
    curvature, zero stepsize, or zero probe vector) fall back to a small
    width scaled to the current iterate.
    """
    base = rho * alpha * v_norm
    if base <= 0.0:
        return 1e-3 * (1.0 + float(np.linalg.norm(w)))
    return 1.0 / (6.0 * base)


def hfmaml_direction(
    task,
    w: Vec,
    alpha: float,
    rho: float,
    oracle: StochasticOracle,
    batches: BatchSpec,
    rng: RngStream,
) -> Vec:
    """Outer gradient corrected by a finite-difference curvature probe."""
    w_i = inner_step(task, w, alpha, batches.D_in, oracle, rng)
    v = oracle.grad(task, w_i, batches.D_o, rng.child(OUTER))
    nv = float(np.linalg.norm(v))
    if nv <= ZERO_PROBE_TOL:
        return v  # nothing to probe along, correction is zero
    delta = probe_delta(rho, alpha, nv, w)
    dk = hvp_finite_diff(task, w, v, delta, batches.D_h, oracle, rng)
    return v - alpha * dk


def direction(
    algorithm: str,
    task,
    w: Vec,
    alpha: float,
    rho: float,
    oracle: StochasticOracle,
    batches: BatchSpec,
    rng: RngStream,
) -> Vec:
    """Per-task descent direction for the named algorithm."""
    if algorithm == MAML:
        return maml_direction(task, w, alpha, oracle, batches, rng)
    if algorithm == FOMAML:
        return fomaml_direction(task, w, alpha, oracle, batches, rng)
    if algorithm == HFMAML:
        return hfmaml_direction(task, w, alpha, rho, oracle, batches, rng)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# --------------------------------------------------------- exact oracles


def exact_grad_F_i(task, w: Vec, alpha: float) -> Vec:
    """Exact per-task meta-gradient (I - alpha H(w)) grad f(w - alpha grad f(w))."""
    g = task.grad(w)
    go = task.grad(w - alpha * g)
    return go - alpha * (task.hess(w) @ go)


def exact_grad_F(family: TaskFamily, w: Vec, alpha: float) -> Vec:
    """Exact meta-gradient, the weighted sum of per-task meta-gradients."""
    g = family.grads(w)  # (n, d)
    go = family.grads_rowwise(w - alpha * g)  # (n, d)
    h = family.hessians(w)  # (n, d, d)
    dirs = go - alpha * np.einsum("nij,nj->ni", h, go)
    return family.weights @ dirs


def value_F(family: TaskFamily, w: Vec, alpha: float) -> float:
    """Exact meta-objective sum_i p_i f_i(w - alpha grad f_i(w))."""
    g = family.grads(w)
    return float(family.weights @ family.values_rowwise(w - alpha * g))


def mc_grad_F_hat_draws(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_test: int,
    n_mc: int,
    oracle: StochasticOracle,
    rng: RngStream,
) -> Mat:
    """Per-draw realizations of the evaluation-time surrogate gradient.

    Row m is the weighted task sweep under the m-th independent noise
    realization; the mean over rows is the Monte Carlo estimate and the
    row dispersion yields its standard error.  Memory grows as
    n_mc * d^2; intended for desk-scale dimensions.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if D_test < 1:
        raise ValueError("D_test must be >= 1")
    d = family.dim
    g_scale = grad_noise_scale(d, D_test, oracle.sigma_tilde)
    h_scale = hess_noise_scale(d, D_test, oracle.sigma_H)
    draws = np.zeros((n_mc, d))
    for i, task in enumerate(family.tasks):
        g = task.grad(w)
        if g_scale > 0.0:
            z = g_scale * standard_normals(rng.child("task", i, "test_grad"), (n_mc, d))
        else:
            z = np.zeros((n_mc, d))
        go = task.grad_many(w - alpha * (g + z))  # exact outer gradient, (n_mc, d)
        if h_scale > 0.0:
            raw = standard_normals(rng.child("task", i, "test_hess"), (n_mc, d, d))
            e = h_scale * 0.5 * (raw + np.swapaxes(raw, 1, 2))
            corr = np.einsum("mij,mj->mi", e, go)
        else:
            corr = np.zeros((n_mc, d))
        dirs = go - alpha * (go @ task.hess(w).T + corr)
        draws += family.weights[i] * dirs
    return draws


def mc_grad_F_hat(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_test: int,
    n_mc: int,
    oracle: StochasticOracle,
    rng: RngStream,
) -> Vec:
    """Monte Carlo estimate of the evaluation-time surrogate gradient.

    The surrogate replaces the exact inner step and Hessian with
    batch-D_test noisy versions while keeping the outer gradient exact:

        grad F_hat(w) = E [ (I - alpha H_tilde(w)) grad f_i(w - alpha g_tilde(w)) ].

    The expectation over tasks is a finite weighted sum and is computed
    exactly; Monte Carlo averaging (n_mc draws per task, vectorized) is
    applied only to the data noise, so with zero noise the result equals
    exact_grad_F for any n_mc.
    """
    return mc_grad_F_hat_draws(family, w, alpha, D_test, n_mc, oracle, rng).mean(axis=0)
