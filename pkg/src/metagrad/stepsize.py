"""State-dependent smoothness estimates and the adaptive stepsize rule.

The meta-objective's gradient Lipschitz modulus grows with the local
task-gradient scale:

    L(w) = 4 L + 2 rho alpha E_i ||grad f_i(w)||.

The adaptive rule estimates this from B' sampled tasks with batch-D_beta
noisy gradients,

    L_tilde(w) = 4 L + (2 rho alpha / B') sum_j ||g_tilde_j(w)||,

and steps with a fixed fraction of beta_tilde(w) = 1 / L_tilde(w).  The
estimate's moments are controlled only when the batches are large enough
to tame gradient dispersion and noise:

    B'     >= ceil(0.5 (rho alpha sigma / L)^2),
    D_beta >= ceil((2 rho alpha sigma_tilde / L)^2),

under which E[beta_tilde] >= 0.8 / L(w) and
E[beta_tilde^2] <= 3.125 / L(w)^2.  ``batch_conditions_ok`` checks the
two inequalities and ``beta_tilde`` refuses to run without them.

``recommended_batches`` inverts the convergence guarantees: given a
target gradient norm eps it returns batch sizes under which the floors
of the guarantee drop below eps (up to the first-order method's
irreducible sigma floor, which no batch size can remove).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBatchConfig
from .numerics import RngStream, Vec, standard_normals, uniforms
from .stochastic import STEPSIZE, BatchSpec, TASKS, grad_noise_scale, noisy_grad, sample_task_batch
from .tasks import SmoothnessProfile, TaskFamily

# Fractions of beta_tilde each algorithm may take per iteration, and the
# inner-stepsize caps (alpha * L at most this) its guarantee assumes.
ADAPTIVE_FRACTIONS = {"maml": 1.0 / 12.0, "fomaml": 1.0 / 18.0, "hfmaml": 1.0 / 25.0}
ALPHA_CAPS = {"maml": 1.0 / 6.0, "fomaml": 1.0 / 10.0, "hfmaml": 1.0 / 6.0}

# Leading constants of the convergence guarantees used to size batches:
# second-order variants carry 61, the first-order variant carries 14.
FLOOR_CONSTANT = {"maml": 61.0, "fomaml": 14.0, "hfmaml": 61.0}


def _ceil(x: float) -> int:
    """Ceiling with protection against float-representation overshoot."""
    return max(0, math.ceil(x - 1e-9 * max(1.0, abs(x))))


@dataclass(frozen=True)
class StepsizeRule:
    """Either a constant stepsize or a fraction of the adaptive estimate.

    kind "constant" uses beta as-is every iteration.  kind "adaptive"
    resamples beta_tilde(w_k) each iteration and multiplies by fraction;
    a None fraction means the algorithm's own default from
    ADAPTIVE_FRACTIONS.
    """

    kind: str = "adaptive"
    beta: float | None = None
    fraction: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "adaptive"):
            raise ValueError(f"unknown stepsize kind {self.kind!r}")
        if self.kind == "constant":
            if self.beta is None or self.beta <= 0.0:
                raise ValueError("constant rule needs beta > 0")
        elif self.fraction is not None and self.fraction <= 0.0:
            raise ValueError("fraction must be positive")

    def resolve_fraction(self, algorithm: str) -> float:
        if self.fraction is not None:
            return self.fraction
        return ADAPTIVE_FRACTIONS[algorithm]


@dataclass(frozen=True)
class StepsizeSample:
    """One draw of the smoothness estimate and its implied stepsize."""

    L_tilde: float
    beta_tilde: float


def smoothness_L_of_w(family: TaskFamily, profile: SmoothnessProfile, w: Vec, alpha: float) -> float:
    """Exact state-dependent modulus 4L + 2 rho alpha E_i ||grad f_i(w)||."""
    norms = np.linalg.norm(family.grads(w), axis=1)
    return 4.0 * profile.L + 2.0 * profile.rho * alpha * float(family.weights @ norms)


def required_B_prime(profile: SmoothnessProfile, alpha: float) -> int:
    return max(1, _ceil(0.5 * (profile.rho * alpha * profile.sigma / profile.L) ** 2))


def required_D_beta(profile: SmoothnessProfile, alpha: float) -> int:
    return max(1, _ceil((2.0 * profile.rho * alpha * profile.sigma_tilde / profile.L) ** 2))


def required_D_h(profile: SmoothnessProfile, alpha: float, algorithm: str) -> int:
    """Hessian-side batch the guarantees assume.

    The probe-based variant needs ceil(36 (alpha rho sigma_tilde)^2)
    probe gradients; the variants drawing a noisy Hessian need
    ceil(2 alpha^2 sigma_H^2) draws.
    """
    if algorithm not in ADAPTIVE_FRACTIONS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm == "hfmaml":
        return max(1, _ceil(36.0 * (alpha * profile.rho * profile.sigma_tilde) ** 2))
    return max(1, _ceil(2.0 * alpha**2 * profile.sigma_H**2))


def batch_conditions_ok(
    profile: SmoothnessProfile, alpha: float, B_prime: int, D_beta: int
) -> bool:
    """True when B' and D_beta satisfy the moment-control inequalities."""
    return B_prime >= required_B_prime(profile, alpha) and D_beta >= required_D_beta(
        profile, alpha
    )


def beta_tilde(
    family: TaskFamily,
    profile: SmoothnessProfile,
    w: Vec,
    alpha: float,
    B_prime: int,
    D_beta: int,
    rng: RngStream,
) -> StepsizeSample:
    """One sample of the adaptive stepsize at w.

    Raises InvalidBatchConfig when the batch sizes cannot control the
    estimate's moments.  With rho = 0 (or alpha = 0) the dispersion term
    vanishes and the sample is deterministically 1 / (4L): no randomness
    is consumed, which keeps exact-oracle runs free of RNG cost.
    """
    if not batch_conditions_ok(profile, alpha, B_prime, D_beta):
        raise InvalidBatchConfig(
            f"B_prime={B_prime} < {required_B_prime(profile, alpha)} or "
            f"D_beta={D_beta} < {required_D_beta(profile, alpha)} "
            "(stepsize moment-control preconditions)"
        )
    coeff = 2.0 * profile.rho * alpha
    if coeff == 0.0:
        l_tilde = 4.0 * profile.L
        return StepsizeSample(l_tilde, 1.0 / l_tilde)
    idx = sample_task_batch(family, B_prime, rng.child(TASKS))
    acc = 0.0
    for slot, i in enumerate(idx):
        g = noisy_grad(
            family.tasks[i], w, D_beta, profile.sigma_tilde, rng.child(STEPSIZE, slot)
        )
        acc += float(np.linalg.norm(g))
    l_tilde = 4.0 * profile.L + coeff * acc / B_prime
    return StepsizeSample(l_tilde, 1.0 / l_tilde)


def sample_beta_tilde(
    family: TaskFamily,
    profile: SmoothnessProfile,
    w: Vec,
    alpha: float,
    B_prime: int,
    D_beta: int,
    n: int,
    rng: RngStream,
) -> np.ndarray:
    """n independent draws of beta_tilde(w), vectorized for audits.

    Distribution-identical to n calls of ``beta_tilde`` (same inverse-CDF
    task sampling, same noise law), batched so moment audits with 1e5
    samples stay fast.
    """
    if not batch_conditions_ok(profile, alpha, B_prime, D_beta):
        raise InvalidBatchConfig(
            f"B_prime={B_prime} < {required_B_prime(profile, alpha)} or "
            f"D_beta={D_beta} < {required_D_beta(profile, alpha)} "
            "(stepsize moment-control preconditions)"
        )
    coeff = 2.0 * profile.rho * alpha
    if coeff == 0.0:
        return np.full(n, 0.25 / profile.L)
    d = family.dim
    cum = np.cumsum(family.weights)
    u = uniforms(rng.child(TASKS), (n, B_prime))
    idx = np.minimum(np.searchsorted(cum, u, side="right"), family.n_tasks - 1)
    grads = family.grads(w)  # (n_tasks, d)
    sel = grads[idx]  # (n, B', d)
    scale = grad_noise_scale(d, D_beta, profile.sigma_tilde)
    if scale > 0.0:
        sel = sel + scale * standard_normals(rng.child(STEPSIZE), (n, B_prime, d))
    norms = np.linalg.norm(sel, axis=2).mean(axis=1)
    return 1.0 / (4.0 * profile.L + coeff * norms)


def recommended_batches(
    profile: SmoothnessProfile, alpha: float, eps: float, algorithm: str
) -> BatchSpec:
    """Smallest batch sizes under which the guarantee's floors reach eps.

    Second-order variants size B, D_in, and B * D_o so each noise floor
    contributes at most eps^2 / 61; the first-order variant uses its own
    constant 14.  The Hessian budget follows the relevant precondition:
    ceil(2 alpha^2 sigma_H^2) where a noisy Hessian is drawn, and
    ceil(36 (alpha rho sigma_tilde)^2) for the probe-based variant.  The
    stepsize batches B' and D_beta come from the moment-control
    inequalities.  Note the first-order variant retains an irreducible
    floor proportional to alpha L sigma that no batch size removes.
    """
    if algorithm not in FLOOR_CONSTANT:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    c = FLOOR_CONSTANT[algorithm]
    s2, st2 = profile.sigma**2, profile.sigma_tilde**2
    B = max(20, _ceil(c * s2 / eps**2))
    D_in = max(1, _ceil(c * st2 / eps**2))
    D_o = max(1, _ceil(c * st2 / (B * eps**2)))
    D_h = required_D_h(profile, alpha, algorithm)
    return BatchSpec(
        B=B,
        D_in=D_in,
        D_o=D_o,
        D_h=D_h,
        B_prime=required_B_prime(profile, alpha),
        D_beta=required_D_beta(profile, alpha),
    )
