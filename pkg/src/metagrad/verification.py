"""Executable audits of the measurable guarantees.

Each audit draws a Monte Carlo (or exhaustive) sample of the quantity a
guarantee controls, computes the stated bound from the smoothness
profile, and reports both with an explicit sampling margin.  Audits are
one-sided: they check measured <= bound + margin, so a loose bound can
never fail, and a failure always indicates a real violation (or an
undersized sample, which the margin accounts for at the 4-sigma level).

All audits are deterministic functions of their RngStream argument.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace

import numpy as np

from .meta_gradient import exact_grad_F, hvp_finite_diff, mc_grad_F_hat_draws, probe_delta
from .numerics import RngStream, Vec, standard_normals
from .optimizer import OptimizerConfig, RunRecord, run
from .stepsize import sample_beta_tilde, smoothness_L_of_w
from .stochastic import StochasticOracle, grad_noise_scale
from .tasks import SmoothnessProfile, TaskFamily, ball_points


@dataclass(frozen=True)
class BoundAudit:
    """One measured quantity against one theoretical bound.

    passed is derived: measured <= bound + mc_margin.  mc_margin is the
    sampling allowance (0 for exhaustive or deterministic audits).
    """

    name: str
    measured: float
    bound: float
    mc_margin: float
    samples: int
    passed: bool = False

    def __post_init__(self):
        if self.mc_margin < 0.0:
            raise ValueError("mc_margin must be nonnegative")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        object.__setattr__(self, "passed", bool(self.measured <= self.bound + self.mc_margin))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def audits_to_json(audits: list[BoundAudit]) -> str:
    """Machine-readable audit report, stable across repeated runs."""
    return json.dumps([a.to_dict() for a in audits], indent=2, sort_keys=True) + "\n"


def _mean_vector_se(draws: np.ndarray) -> float:
    """Standard error of the norm-of-mean: sqrt(trace(cov) / n)."""
    n = draws.shape[0]
    if n < 2:
        return 0.0
    return float(np.sqrt(draws.var(axis=0, ddof=1).sum() / n))


def _adapted_outer_draws(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_in: int,
    D_o: int,
    sigma_tilde: float,
    n_mc: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy adapted-point gradient estimates, vectorized over draws.

    Returns (draws, sq) where draws[m] is the weighted task sweep of
    grad_tilde f_i(w - alpha grad_tilde f_i(w; D_in); D_o) under the
    m-th noise realization and sq[m] is the weighted per-task squared
    norm (the second-moment integrand, which is not ||draws[m]||^2).
    """
    d = family.dim
    s_in = grad_noise_scale(d, D_in, sigma_tilde)
    s_out = grad_noise_scale(d, D_o, sigma_tilde)
    draws = np.zeros((n_mc, d))
    sq = np.zeros(n_mc)
    for i, task in enumerate(family.tasks):
        g = task.grad(w)
        if s_in > 0.0:
            z = s_in * standard_normals(rng.child("task", i, "inner"), (n_mc, d))
            inner = w - alpha * (g + z)
        else:
            inner = np.broadcast_to(w - alpha * g, (n_mc, d))
        go = task.grad_many(inner)
        if s_out > 0.0:
            go = go + s_out * standard_normals(rng.child("task", i, "outer"), (n_mc, d))
        draws += family.weights[i] * go
        sq += family.weights[i] * np.einsum("md,md->m", go, go)
    return draws, sq


def audit_bias(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_in: int,
    D_o: int,
    n_mc: int,
    profile: SmoothnessProfile,
    rng: RngStream,
) -> BoundAudit:
    """Bias of the adapted-point gradient estimate.

    The estimate's conditional mean can differ from the exact adapted
    gradient only through the inner-step noise, which enters through an
    L-Lipschitz gradient scaled by alpha; the bound is therefore
    alpha * L * sigma_tilde / sqrt(D_in).  Outer noise is mean zero and
    only widens the Monte Carlo margin.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2 to estimate a margin")
    draws, _ = _adapted_outer_draws(
        family, w, alpha, D_in, D_o, profile.sigma_tilde, n_mc, rng
    )
    # reference through the same code path: at sigma_tilde = 0 every draw
    # is this row bit for bit and the measured bias is exactly zero
    exact = _adapted_outer_draws(family, w, alpha, D_in, D_o, 0.0, 1, rng)[0][0]
    mean = draws[0] if profile.sigma_tilde == 0.0 else draws.mean(axis=0)
    measured = float(np.linalg.norm(mean - exact))
    bound = alpha * profile.L * profile.sigma_tilde / np.sqrt(D_in)
    return BoundAudit(
        name="estimator_bias",
        measured=measured,
        bound=float(bound),
        mc_margin=4.0 * _mean_vector_se(draws),
        samples=n_mc,
    )


def audit_second_moment(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_in: int,
    D_o: int,
    phi: float,
    n_mc: int,
    profile: SmoothnessProfile,
    rng: RngStream,
) -> BoundAudit:
    """Second moment of the adapted-point gradient estimate.

    Splitting the estimate into its exact value plus noise-driven error
    gives, for any phi > 0,

        E||est||^2 <= (1 + 1/phi) ||grad f(w_in)||^2
                      + (1 + phi) alpha^2 L^2 sigma_tilde^2 / D_in
                      + sigma_tilde^2 / D_o

    task-weighted on both sides.
    """
    if phi <= 0.0:
        raise ValueError("phi must be positive")
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2 to estimate a margin")
    _, sq = _adapted_outer_draws(
        family, w, alpha, D_in, D_o, profile.sigma_tilde, n_mc, rng
    )
    measured = float(sq.mean())
    exact_sq = np.linalg.norm(
        family.grads_rowwise(w - alpha * family.grads(w)), axis=1
    ) ** 2
    st2 = profile.sigma_tilde**2
    bound = (
        (1.0 + 1.0 / phi) * float(family.weights @ exact_sq)
        + (1.0 + phi) * (alpha * profile.L) ** 2 * st2 / D_in
        + st2 / D_o
    )
    return BoundAudit(
        name="estimator_second_moment",
        measured=measured,
        bound=float(bound),
        mc_margin=4.0 * float(sq.std(ddof=1) / np.sqrt(n_mc)),
        samples=n_mc,
    )


def audit_grad_gap_F_hat(
    family: TaskFamily,
    w: Vec,
    alpha: float,
    D_test: int,
    n_mc: int,
    profile: SmoothnessProfile,
    rng: RngStream,
) -> BoundAudit:
    """Gap between the evaluation-time surrogate gradient and the truth.

    The surrogate evaluates tasks through batch-D_test noisy oracles;
    its gradient deviates from the exact meta-gradient by at most
    2 alpha L sigma_tilde / sqrt(D_test)
    + alpha^2 L sigma_H sigma_tilde / D_test.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2 to estimate a margin")
    oracle = StochasticOracle(sigma_tilde=profile.sigma_tilde, sigma_H=profile.sigma_H)
    draws = mc_grad_F_hat_draws(family, w, alpha, D_test, n_mc, oracle, rng)
    exact = exact_grad_F(family, w, alpha)
    measured = float(np.linalg.norm(draws.mean(axis=0) - exact))
    bound = (
        2.0 * alpha * profile.L * profile.sigma_tilde / np.sqrt(D_test)
        + alpha**2 * profile.L * profile.sigma_H * profile.sigma_tilde / D_test
    )
    return BoundAudit(
        name="surrogate_grad_gap",
        measured=measured,
        bound=float(bound),
        mc_margin=4.0 * _mean_vector_se(draws),
        samples=n_mc,
    )


def audit_hvp_probe_error(
    family: TaskFamily,
    profile: SmoothnessProfile,
    alpha: float,
    center: Vec,
    radius: float,
    n_probes: int,
    rng: RngStream,
) -> BoundAudit:
    """Worst observed finite-difference curvature-probe error.

    For each probe: a random point in the trust ball, a random direction
    v, the production probe width delta, and the ratio of the actual
    error ||FD - hess(w) v|| to its guarantee rho * delta * ||v||^2.
    The audit is deterministic (probe noise cancels by construction), so
    the margin is zero and measured is the max ratio against bound 1.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    if profile.rho <= 0.0:
        raise ValueError("probe-error audit needs a curvature-variation bound rho > 0")
    points = ball_points(center, radius, n_probes, rng.child("points"))
    dirs = standard_normals(rng.child("dirs"), (n_probes, family.dim))
    oracle = StochasticOracle(0.0, 0.0)
    worst = 0.0
    for j in range(n_probes):
        task = family.tasks[j % len(family.tasks)]
        w, v = points[j], dirs[j]
        delta = probe_delta(profile.rho, alpha, float(np.linalg.norm(v)), w)
        fd = hvp_finite_diff(task, w, v, delta, 1, oracle, rng.child("probe", j))
        err = np.linalg.norm(fd - task.hess(w) @ v)
        allowed = profile.rho * delta * float(np.linalg.norm(v)) ** 2
        worst = max(worst, float(err / allowed))
    return BoundAudit(
        name="hvp_probe_error",
        measured=worst,
        bound=1.0,
        mc_margin=0.0,
        samples=n_probes,
    )


def audit_smoothness_ratio(
    family: TaskFamily,
    profile: SmoothnessProfile,
    alpha: float,
    center: Vec,
    radius: float,
    n_pairs: int,
    rng: RngStream,
) -> BoundAudit:
    """Two-point smoothness of the meta-objective inside the trust ball.

    Checks ||grad F(w) - grad F(u)|| <= min{L(w), L(u)} ||w - u|| on
    random pairs, with the state-dependent modulus
    L(w) = 4L + 2 rho alpha E_i ||grad f_i(w)||.  Deterministic: the
    margin is zero and measured is the worst ratio against bound 1.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    ws = ball_points(center, radius, n_pairs, rng.child("w"))
    us = ball_points(center, radius, n_pairs, rng.child("u"))
    worst = 0.0
    for w, u in zip(ws, us):
        sep = float(np.linalg.norm(w - u))
        if sep == 0.0:
            continue  # coincident draws carry no information
        gap = float(np.linalg.norm(exact_grad_F(family, w, alpha) - exact_grad_F(family, u, alpha)))
        modulus = min(
            smoothness_L_of_w(family, profile, w, alpha),
            smoothness_L_of_w(family, profile, u, alpha),
        )
        worst = max(worst, gap / (modulus * sep))
    return BoundAudit(
        name="smoothness_ratio",
        measured=worst,
        bound=1.0,
        mc_margin=0.0,
        samples=n_pairs,
    )


def audit_stepsize_moments(
    family: TaskFamily,
    profile: SmoothnessProfile,
    alpha: float,
    points: np.ndarray,
    B_prime: int,
    D_beta: int,
    n_samples: int,
    rng: RngStream,
) -> list[BoundAudit]:
    """First and second moments of the adaptive stepsize at given points.

    At each point w two one-sided checks are emitted: the mean is at
    least 0.8 / L(w) (recast as 0.8 / L(w) - mean <= 0) and the second
    moment is at most 3.125 / L(w)^2.  Margins are 3 standard errors.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2 to estimate a margin")
    audits = []
    for j, w in enumerate(np.atleast_2d(points)):
        samples = sample_beta_tilde(
            family, profile, w, alpha, B_prime, D_beta, n_samples, rng.child("point", j)
        )
        l_w = smoothness_L_of_w(family, profile, w, alpha)
        mean = float(samples.mean())
        se_mean = float(samples.std(ddof=1) / np.sqrt(n_samples))
        sq = samples**2
        audits.append(
            BoundAudit(
                name=f"stepsize_mean_lower[{j}]",
                measured=0.8 / l_w - mean,
                bound=0.0,
                mc_margin=3.0 * se_mean,
                samples=n_samples,
            )
        )
        audits.append(
            BoundAudit(
                name=f"stepsize_second_moment[{j}]",
                measured=float(sq.mean()),
                bound=3.125 / l_w**2,
                mc_margin=3.0 * float(sq.std(ddof=1) / np.sqrt(n_samples)),
                samples=n_samples,
            )
        )
    return audits


def audit_kshot_floor(
    family: TaskFamily,
    alpha: float,
    K_list: list[int],
    config: OptimizerConfig,
    profile: SmoothnessProfile | None = None,
) -> list[tuple[int, float]]:
    """Convergence floor as a function of the inner-adaptation batch K.

    Runs the full second-order method with D_in = K for each K and
    reports the best-iterate exact meta-gradient norm.  With the task
    batch and outer batch sized large, the floor scales as 1/sqrt(K).
    """
    if list(K_list) != sorted(K_list) or len(K_list) == 0:
        raise ValueError("K_list must be nonempty and ascending")
    if any(k < 1 for k in K_list):
        raise ValueError("each K must be >= 1")
    floors = []
    for k in K_list:
        cfg = replace(config, alpha=alpha, batches=replace(config.batches, D_in=int(k)))
        rec: RunRecord = run(family, cfg, profile=profile)
        floors.append((int(k), rec.floor))
    return floors
