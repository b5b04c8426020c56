"""Noisy first- and second-order oracles over task families.

A data batch of size D is realized as additive Gaussian noise scaled by
1/sqrt(D): the estimator is distributed like the mean of D independent
unit-budget estimates.  Concretely,

    noisy_grad:  grad f(w) + z,   z ~ N(0, (sigma_tilde^2 / (d D)) I),

so E||z||^2 = sigma_tilde^2 / D, and

    noisy_hess:  hess f(w) + E,   E symmetric Gaussian with
                 E||E||_F^2 = sigma_H^2 / D.

Noise is drawn from the stream passed in and nothing else, so a fixed
(seed, path) reproduces the same batch no matter where or when it is
consumed.  Callers that want two evaluations to share a data batch (the
two probes of a finite-difference Hessian-vector product) simply pass
the same stream to both calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Mat, RngStream, Vec, gaussian, standard_normals, uniforms
from .tasks import TaskFamily

# Purpose labels appended to RNG paths; one per draw site so streams
# never collide and paired algorithm runs stay aligned.
INNER = "inner"
OUTER = "outer"
HESS = "hess"
PROBE = "hvp"
STEPSIZE = "stepsize"
TEST = "test"
TASKS = "tasks"


@dataclass(frozen=True)
class BatchSpec:
    """Batch sizes for one optimizer configuration.

    B tasks per iteration; D_in, D_o, D_h data budgets for the inner
    step, outer gradient, and Hessian (or probe) estimates; B_prime and
    D_beta budgets for the adaptive stepsize estimate; D_test the budget
    of the evaluation-time surrogate objective.
    """

    B: int = 1
    D_in: int = 1
    D_o: int = 1
    D_h: int = 1
    B_prime: int = 1
    D_beta: int = 1
    D_test: int = 1

    def __post_init__(self):
        for name in ("B", "D_in", "D_o", "D_h", "B_prime", "D_beta", "D_test"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


def grad_noise_scale(d: int, D: int, sigma_tilde: float) -> float:
    """Per-coordinate stddev giving E||z||^2 = sigma_tilde^2 / D in d dims."""
    return sigma_tilde / np.sqrt(d * D)


def hess_noise_scale(d: int, D: int, sigma_H: float) -> float:
    """Pre-symmetrization entry stddev giving E||E||_F^2 = sigma_H^2 / D.

    For E = kappa (G + G') / 2 with i.i.d. standard normal G, the
    Frobenius energy is kappa^2 d (d + 1) / 2; solve for kappa.
    """
    return sigma_H * np.sqrt(2.0 / (D * d * (d + 1)))


def noisy_grad(task, w: Vec, D: int, sigma_tilde: float, rng: RngStream) -> Vec:
    """Gradient of the task plus batch-size-D Gaussian noise."""
    if D < 1:
        raise ValueError("D must be >= 1")
    g = task.grad(w)
    if sigma_tilde == 0.0:
        return g
    d = g.shape[0]
    return g + gaussian(rng, d, grad_noise_scale(d, D, sigma_tilde))


def noisy_hess(task, w: Vec, D: int, sigma_H: float, rng: RngStream) -> Mat:
    """Hessian of the task plus symmetric Gaussian noise."""
    if D < 1:
        raise ValueError("D must be >= 1")
    h = task.hess(w)
    if sigma_H == 0.0:
        return h
    d = h.shape[0]
    kappa = hess_noise_scale(d, D, sigma_H)
    g = standard_normals(rng, (d, d))
    return h + kappa * 0.5 * (g + g.T)


@dataclass(frozen=True)
class StochasticOracle:
    """Noise levels bundled with the oracle calls that realize them."""

    sigma_tilde: float = 0.0
    sigma_H: float = 0.0

    def __post_init__(self):
        if self.sigma_tilde < 0.0 or self.sigma_H < 0.0:
            raise ValueError("noise levels must be nonnegative")

    @property
    def exact(self) -> bool:
        return self.sigma_tilde == 0.0 and self.sigma_H == 0.0

    def grad(self, task, w: Vec, D: int, rng: RngStream) -> Vec:
        return noisy_grad(task, w, D, self.sigma_tilde, rng)

    def hess(self, task, w: Vec, D: int, rng: RngStream) -> Mat:
        return noisy_hess(task, w, D, self.sigma_H, rng)


def sample_task_batch(family: TaskFamily, B: int, rng: RngStream) -> np.ndarray:
    """B task indices drawn i.i.d. from the family weights, with replacement."""
    if B < 1:
        raise ValueError("B must be >= 1")
    cum = np.cumsum(family.weights)
    u = uniforms(rng, B)
    return np.minimum(np.searchsorted(cum, u, side="right"), family.n_tasks - 1)
