"""Synthetic task families with exact derivative oracles.

Two task kinds are supported.  A quadratic task is

    f(w) = 0.5 w' A w + b' w + c,      A symmetric positive definite,

so gradients and Hessians are exact linear algebra.  A rank-1 matrix
factorization task plants a symmetric target M = g g' and scores

    f(x) = 0.25 * ||x x' - M||_F^2,

whose gradient is (x x' - M) x and whose Hessian is
||x||^2 I + 2 x x' - M.  Quadratics admit closed-form meta-learning
solutions; the factorization family is nonquadratic, so its smoothness
constants must be estimated on a bounded region, which is what
``local_smoothness`` does (conservatively, by sampling and inflating).

A ``TaskFamily`` is a finite weighted collection of tasks of one kind.
Expectations over tasks are exact weighted sums, which is what makes
every downstream quantity (the meta-objective, its gradient, the
convergence floors) computable to machine precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Mat, RngStream, Vec, spectral_norm, standard_normals, uniforms

QUADRATIC = "quadratic"
RANK1MF = "rank1mf"


@dataclass(eq=False)
class QuadraticTask:
    """f(w) = 0.5 w'Aw + b'w + c with A symmetric positive definite."""

    A: Mat
    b: Vec
    c: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        d = self.b.shape[0]
        if self.A.shape != (d, d):
            raise ValueError(f"A has shape {self.A.shape}, expected {(d, d)}")
        if np.max(np.abs(self.A - self.A.T)) > 1e-12 * max(1.0, np.max(np.abs(self.A))):
            raise ValueError("A must be symmetric")
        if np.min(np.linalg.eigvalsh(self.A)) <= 0.0:
            raise ValueError("A must be positive definite")

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def value(self, w: Vec) -> float:
        return float(0.5 * w @ self.A @ w + self.b @ w + self.c)

    def grad(self, w: Vec) -> Vec:
        return self.A @ w + self.b

    def hess(self, w: Vec) -> Mat:
        return self.A.copy()

    def grad_many(self, W: np.ndarray) -> np.ndarray:
        """Gradients at each row of W, shape (m, d)."""
        return W @ self.A.T + self.b


@dataclass(eq=False)
class MatrixFactorizationTask:
    """f(x) = 0.25 ||x x' - g g'||_F^2, the planted rank-1 recovery loss."""

    g: Vec

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        if self.g.ndim != 1:
            raise ValueError("g must be a vector")
        self.M = np.outer(self.g, self.g)

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def value(self, x: Vec) -> float:
        # ||xx' - M||_F^2 expands to ||x||^4 - 2 x'Mx + ||M||_F^2.
        nx2 = float(x @ x)
        return 0.25 * (nx2 * nx2 - 2.0 * float(x @ self.M @ x) + float(np.sum(self.M * self.M)))

    def grad(self, x: Vec) -> Vec:
        return (x @ x) * x - self.M @ x

    def hess(self, x: Vec) -> Mat:
        return (x @ x) * np.eye(self.dim) + 2.0 * np.outer(x, x) - self.M

    def grad_many(self, X: np.ndarray) -> np.ndarray:
        """Gradients at each row of X, shape (m, d)."""
        nx2 = np.sum(X * X, axis=1, keepdims=True)
        return nx2 * X - X @ self.M


Task = QuadraticTask | MatrixFactorizationTask


@dataclass(eq=False)
class TaskFamily:
    """A finite weighted family of tasks of one kind.

    Weights are the sampling distribution p over tasks; they must be
    positive and sum to one.  Stacked per-task arrays are precomputed so
    family-wide expectations are single vectorized expressions.
    """

    kind: str
    tasks: list
    weights: Vec = None

    def __post_init__(self):
        if self.kind not in (QUADRATIC, RANK1MF):
            raise ValueError(f"unknown family kind {self.kind!r}")
        if not self.tasks:
            raise ValueError("family needs at least one task")
        dims = {t.dim for t in self.tasks}
        if len(dims) != 1:
            raise ValueError(f"tasks disagree on dimension: {sorted(dims)}")
        n = len(self.tasks)
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (n,):
            raise ValueError("weights length must match task count")
        if np.any(self.weights <= 0.0):
            raise ValueError("weights must be positive")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if self.kind == QUADRATIC:
            self._As = np.stack([t.A for t in self.tasks])  # (n, d, d)
            self._bs = np.stack([t.b for t in self.tasks])  # (n, d)
            self._cs = np.array([t.c for t in self.tasks])
        else:
            self._Ms = np.stack([t.M for t in self.tasks])  # (n, d, d)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    # ------------------------------------------------ vectorized oracles

    def grads(self, w: Vec) -> np.ndarray:
        """All task gradients at one point, shape (n, d)."""
        if self.kind == QUADRATIC:
            return self._As @ w + self._bs
        return (w @ w) * w - self._Ms @ w

    def grads_rowwise(self, W: np.ndarray) -> np.ndarray:
        """Gradient of task i at row W[i], shape (n, d)."""
        if self.kind == QUADRATIC:
            return np.einsum("nij,nj->ni", self._As, W) + self._bs
        nx2 = np.sum(W * W, axis=1, keepdims=True)
        return nx2 * W - np.einsum("nij,nj->ni", self._Ms, W)

    def hessians(self, w: Vec) -> np.ndarray:
        """All task Hessians at one point, shape (n, d, d)."""
        if self.kind == QUADRATIC:
            return self._As.copy()
        base = (w @ w) * np.eye(self.dim) + 2.0 * np.outer(w, w)
        return base[None, :, :] - self._Ms

    def values_rowwise(self, W: np.ndarray) -> np.ndarray:
        """Value of task i at row W[i], shape (n,)."""
        if self.kind == QUADRATIC:
            quad = 0.5 * np.einsum("ni,nij,nj->n", W, self._As, W)
            return quad + np.einsum("ni,ni->n", self._bs, W) + self._cs
        nx2 = np.sum(W * W, axis=1)
        xmx = np.einsum("ni,nij,nj->n", W, self._Ms, W)
        m2 = np.einsum("nij,nij->n", self._Ms, self._Ms)
        return 0.25 * (nx2 * nx2 - 2.0 * xmx + m2)

    def mean_grad(self, w: Vec) -> Vec:
        """Weighted mean gradient across tasks."""
        return self.weights @ self.grads(w)

    # ---------------------------------------------------- serialization

    def to_dict(self) -> dict:
        if self.kind == QUADRATIC:
            payload = [
                {"A": t.A.tolist(), "b": t.b.tolist(), "c": float(t.c)} for t in self.tasks
            ]
        else:
            payload = [{"g": t.g.tolist()} for t in self.tasks]
        return {
            "kind": self.kind,
            "dim": self.dim,
            "tasks": payload,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskFamily":
        kind = data["kind"]
        if kind == QUADRATIC:
            tasks = [
                QuadraticTask(np.array(t["A"]), np.array(t["b"]), float(t.get("c", 0.0)))
                for t in data["tasks"]
            ]
        elif kind == RANK1MF:
            tasks = [MatrixFactorizationTask(np.array(t["g"])) for t in data["tasks"]]
        else:
            raise ValueError(f"unknown family kind {kind!r}")
        fam = cls(kind=kind, tasks=tasks, weights=np.array(data["weights"], dtype=float))
        if fam.dim != int(data["dim"]):
            raise ValueError("dim field disagrees with task payloads")
        return fam

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TaskFamily":
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------ generators


def random_quadratic_family(
    n: int,
    d: int,
    rng: RngStream,
    eig_range: tuple[float, float] = (0.5, 2.0),
    b_scale: float = 1.0,
) -> TaskFamily:
    """n random SPD quadratics with eigenvalues drawn in eig_range."""
    lo, hi = eig_range
    if not (0.0 < lo <= hi):
        raise ValueError("eig_range must be positive and ordered")
    tasks = []
    for i in range(n):
        sub = rng.child("quad_task", i)
        lams = lo + (hi - lo) * uniforms(sub.child("eigs"), d)
        z = standard_normals(sub.child("basis"), (d, d))
        q, _ = np.linalg.qr(z)
        a = (q * lams) @ q.T
        a = 0.5 * (a + a.T)  # kill rounding asymmetry
        b = b_scale * standard_normals(sub.child("b"), d)
        tasks.append(QuadraticTask(a, b))
    return TaskFamily(QUADRATIC, tasks)


def rank1_mf_family(n: int, d: int, rng: RngStream, scale: float = 1.0) -> TaskFamily:
    """n planted rank-1 factorization tasks with g_i ~ N(0, scale^2 I).

    The scale controls task heterogeneity: small scale keeps the planted
    targets close together, large scale spreads them out.
    """
    tasks = [
        MatrixFactorizationTask(scale * standard_normals(rng.child("mf_task", i), d))
        for i in range(n)
    ]
    return TaskFamily(RANK1MF, tasks)


# ------------------------------------------------- convenience wrappers


def quad_grad(task: QuadraticTask, w: Vec) -> Vec:
    """Gradient A w + b of a quadratic task."""
    return task.grad(w)


def mf_value_grad_hess(task: MatrixFactorizationTask, x: Vec) -> tuple[float, Vec, Mat]:
    """Value, gradient, and Hessian of a factorization task at x."""
    return task.value(x), task.grad(x), task.hess(x)


# ------------------------------------------------- smoothness profiling


@dataclass(frozen=True)
class SmoothnessProfile:
    """Constants governing a family on a bounded region.

    L bounds every task Hessian norm, rho bounds the Hessian's Lipschitz
    modulus, sigma bounds task-gradient dispersion around the mean.  The
    noise levels sigma_tilde (gradient) and sigma_H (Hessian) describe
    the stochastic oracle, not the tasks; they default to zero and are
    set by the experiment configuration.
    """

    L: float
    rho: float
    sigma: float
    sigma_tilde: float = 0.0
    sigma_H: float = 0.0

    def with_noise(self, sigma_tilde: float, sigma_H: float) -> "SmoothnessProfile":
        return replace(self, sigma_tilde=sigma_tilde, sigma_H=sigma_H)


def ball_points(center: Vec, radius: float, n: int, rng: RngStream) -> np.ndarray:
    """n points spread over the ball, deterministic in the stream."""
    d = center.shape[0]
    dirs = standard_normals(rng.child("dirs"), (n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * uniforms(rng.child("radii"), n) ** (1.0 / d)
    return center + radii[:, None] * dirs


def _spectral_norms(stack: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack of symmetric matrices via eigvalsh."""
    eigs = np.linalg.eigvalsh(stack)
    return np.maximum(np.abs(eigs[..., 0]), np.abs(eigs[..., -1]))


def local_smoothness(
    family: TaskFamily,
    center: Vec,
    radius: float,
    n_samples: int = 96,
    inflation: float = 1.5,
    seed: int = 0,
) -> SmoothnessProfile:
    """Conservative smoothness constants on the ball around center.

    Quadratic families get L = max_i ||A_i|| exactly and rho = 0 (their
    Hessians are constant).  Otherwise L and rho come from the sampled
    suprema of Hessian norms and Hessian-difference ratios, and sigma
    from the sampled worst task-vs-mean gradient deviation; each sampled
    estimate is inflated to hedge the gap between a finite sample
    maximum and the true supremum.  At least 64 sample points are used.
    """
    if n_samples < 64:
        raise ValueError("need at least 64 sample points")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float)
    rng = RngStream(seed, ("local_smoothness",))
    points = ball_points(center, radius, n_samples, rng)

    if family.kind == QUADRATIC:
        L = max(spectral_norm(t.A) for t in family.tasks)
        rho = 0.0
    else:
        hess_sup = 0.0
        ratio_sup = 0.0
        # Pair points for Lipschitz ratios three ways: consecutive sample
        # pairs, radially aligned pairs (where the factorization Hessian
        # moves fastest), and tight pairs probing the local modulus.
        offsets = standard_normals(rng.child("tight"), points.shape)
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        tight = points + 0.01 * radius * offsets
        radial_hi = ball_points(center, radius, n_samples, rng.child("radial"))
        radial_lo = center + 0.5 * (radial_hi - center)
        pair_sets = [
            (points[:-1], points[1:]),
            (points, tight),
            (radial_lo, radial_hi),
        ]
        for task in family.tasks:
            h_pts = np.stack([task.hess(p) for p in points])
            hess_sup = max(hess_sup, float(np.max(_spectral_norms(h_pts))))
            for xs, ys in pair_sets:
                hx = np.stack([task.hess(p) for p in xs])
                hy = np.stack([task.hess(p) for p in ys])
                num = _spectral_norms(hx - hy)
                den = np.linalg.norm(xs - ys, axis=1)
                ratio_sup = max(ratio_sup, float(np.max(num / den)))
        L = inflation * hess_sup
        rho = inflation * ratio_sup

    per_task = np.stack([family.grads(p) for p in points])  # (m, n, d)
    mean = np.einsum("n,mnd->md", family.weights, per_task)
    dev = np.linalg.norm(per_task - mean[:, None, :], axis=2)
    sigma = inflation * float(np.max(dev))
    return SmoothnessProfile(L=L, rho=rho, sigma=sigma)
