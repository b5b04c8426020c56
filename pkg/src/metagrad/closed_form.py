"""Closed-form meta-learning solutions on quadratic families.

For f_i(w) = 0.5 w'A_i w + b_i'w + c_i the adapted objective is itself
quadratic, so the stationary point solves a linear system:

    [sum_i p_i (I - a A_i)^2 A_i] w* = -[sum_i p_i (I - a A_i)^2 b_i].

Dropping one (I - a A_i) factor gives the fixed point of the first-order
iteration map, independent of the outer stepsize:

    [sum_i p_i (I - a A_i) A_i] w_fo = -[sum_i p_i (I - a A_i) b_i].

On a heterogeneous family the two differ, and ||grad F(w_fo)|| is the
exact convergence floor that the first-order method cannot descend
below.  Both coefficient matrices are symmetric positive definite when
alpha < 1 / max_i ||A_i||, so the systems are solved by Cholesky with
iterative refinement down to a 1e-12 residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IllConditioned
from .meta_gradient import exact_grad_F
from .numerics import Mat, Vec
from .tasks import QUADRATIC, TaskFamily

RESIDUAL_TOL = 1e-12


def _solve_spd(h: Mat, rhs: Vec) -> Vec:
    """Solve h x = rhs for symmetric positive definite h to tight residual."""
    try:
        factor = scipy.linalg.cho_factor(h)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned(f"coefficient matrix is not positive definite: {exc}") from exc
    except scipy.linalg.LinAlgError as exc:  # scipy raises its own flavor
        raise IllConditioned(f"coefficient matrix is not positive definite: {exc}") from exc
    x = scipy.linalg.cho_solve(factor, rhs)
    scale = max(1.0, float(np.linalg.norm(rhs)))
    for _ in range(3):  # iterative refinement, usually a no-op
        r = rhs - h @ x
        if float(np.linalg.norm(r)) <= RESIDUAL_TOL * scale:
            return x
        x = x + scipy.linalg.cho_solve(factor, r)
    if float(np.linalg.norm(rhs - h @ x)) > RESIDUAL_TOL * scale:
        raise IllConditioned("linear solve residual exceeds 1e-12 after refinement")
    return x


def _weighted_systems(family: TaskFamily, alpha: float):
    """Coefficient matrices and right-hand sides of both linear systems."""
    if family.kind != QUADRATIC:
        raise ValueError("closed forms exist only for quadratic families")
    d = family.dim
    eye = np.eye(d)
    meta_m = np.zeros((d, d))
    meta_r = np.zeros(d)
    fo_m = np.zeros((d, d))
    fo_r = np.zeros(d)
    for p, task in zip(family.weights, family.tasks):
        m = eye - alpha * task.A
        m2 = m @ m
        meta_m += p * (m2 @ task.A)
        meta_r += p * (m2 @ task.b)
        fo_m += p * (m @ task.A)
        fo_r += p * (m @ task.b)
    # Polynomials in symmetric A_i are symmetric; kill rounding skew.
    meta_m = 0.5 * (meta_m + meta_m.T)
    fo_m = 0.5 * (fo_m + fo_m.T)
    return meta_m, meta_r, fo_m, fo_r


@dataclass(frozen=True)
class QuadraticAnalysis:
    """Both fixed points, the floor separating them, and the system matrices."""

    alpha: float
    w_star: Vec
    w_fo: Vec
    fo_gap: float
    meta_matrix: Mat
    fo_matrix: Mat


def solve_quadratic_maml(family: TaskFamily, alpha: float) -> Vec:
    """Stationary point of the adapted objective: grad F(w*) = 0."""
    meta_m, meta_r, _, _ = _weighted_systems(family, alpha)
    return _solve_spd(meta_m, -meta_r)


def solve_quadratic_fo(family: TaskFamily, alpha: float) -> Vec:
    """Fixed point of the first-order iteration map (stepsize-independent)."""
    _, _, fo_m, fo_r = _weighted_systems(family, alpha)
    return _solve_spd(fo_m, -fo_r)


def fo_gap(family: TaskFamily, alpha: float) -> float:
    """||grad F(w_fo)||: the first-order method's exact convergence floor."""
    return float(np.linalg.norm(exact_grad_F(family, solve_quadratic_fo(family, alpha), alpha)))


def analyze_quadratic(family: TaskFamily, alpha: float) -> QuadraticAnalysis:
    """Solve both systems once and package the fixed points and floor."""
    meta_m, meta_r, fo_m, fo_r = _weighted_systems(family, alpha)
    w_star = _solve_spd(meta_m, -meta_r)
    w_fo = _solve_spd(fo_m, -fo_r)
    gap = float(np.linalg.norm(exact_grad_F(family, w_fo, alpha)))
    return QuadraticAnalysis(
        alpha=alpha,
        w_star=w_star,
        w_fo=w_fo,
        fo_gap=gap,
        meta_matrix=meta_m,
        fo_matrix=fo_m,
    )
