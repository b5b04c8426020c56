"""Dense linear algebra and deterministic random streams.

Vectors and matrices are plain float64 numpy arrays (aliased ``Vec`` and
``Mat`` below).  Randomness flows through ``RngStream``, a counter-based
stream keyed by a base seed plus a path of labels.  A stream is a value,
not a mutable cursor: materializing the same (seed, path) twice yields
the same draws, regardless of when or in what order other streams were
consumed.  Branch randomness by deriving children, never by drawing a
variable amount and hoping call order stays fixed.

Gaussians come from a Box-Muller transform applied to uniforms from a
keyed Philox generator, so every draw is reproducible under parallel or
reordered evaluation.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import IllConditioned

Vec = np.ndarray  # shape (d,)
Mat = np.ndarray  # shape (d, d) or (m, n)

PathLabel = int | str


@dataclass(frozen=True)
class RngStream:
    """A deterministic random stream identified by (base_seed, path).

    The stream's generator is Philox keyed by a 128-bit hash of the seed
    and path, so draws depend only on the identity of the stream.  Equal
    (seed, path) always reproduce equal values; distinct paths give
    independent-behaving streams.
    """

    base_seed: int
    path: tuple[PathLabel, ...] = ()

    def child(self, *labels: PathLabel) -> "RngStream":
        """Derive a sub-stream by appending labels to the path."""
        for lab in labels:
            if not isinstance(lab, (int, str)):
                raise TypeError(f"path labels must be int or str, got {type(lab).__name__}")
        return RngStream(self.base_seed, self.path + tuple(labels))

    def _key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<q", self.base_seed))
        for lab in self.path:
            if isinstance(lab, int):
                h.update(b"i")
                h.update(struct.pack("<q", lab))
            else:
                data = lab.encode("utf-8")
                h.update(b"s")
                h.update(struct.pack("<I", len(data)))
                h.update(data)
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        """Materialize the stream from its start.

        Calling twice returns generators that replay the same sequence;
        use ``child`` to obtain fresh randomness for distinct draw sites.
        """
        return np.random.Generator(np.random.Philox(key=self._key()))


_BORROWED = threading.local()


def _borrowed_generator(rng: RngStream) -> np.random.Generator:
    """A thread-local generator repointed at the stream's start.

    Constructing a keyed Philox costs more than the small draws made in
    the hot loops, so one bit generator per thread is rewound by state
    assignment instead.  The draws are identical to generator()'s.  The
    returned object is only valid until the next call on this thread;
    callers must finish drawing before returning.
    """
    slot = getattr(_BORROWED, "slot", None)
    if slot is None:
        bits = np.random.Philox(key=0)
        slot = (bits, np.random.Generator(bits), bits.state)
        _BORROWED.slot = slot
    bits, gen, state = slot
    key = rng._key()
    state["state"] = {
        "counter": np.zeros(4, dtype=np.uint64),
        "key": np.array([key & 0xFFFFFFFFFFFFFFFF, key >> 64], dtype=np.uint64),
    }
    state["buffer"] = np.zeros(4, dtype=np.uint64)
    state["buffer_pos"] = 4
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bits.state = state
    return gen


def uniforms(rng: RngStream, shape: int | tuple[int, ...]) -> np.ndarray:
    """Uniform [0, 1) draws of the given shape from the stream."""
    gen = _borrowed_generator(rng)
    return gen.random(shape)


def standard_normals(rng: RngStream, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard normal draws via Box-Muller on the stream's uniforms."""
    if isinstance(shape, int):
        shape = (shape,)
    n = 1
    for dim in shape:
        n *= int(dim)
    pairs = (n + 1) // 2
    gen = _borrowed_generator(rng)
    u1 = 1.0 - gen.random(pairs)  # in (0, 1], keeps log finite
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n].reshape(shape)


def gaussian(rng: RngStream, n: int, stddev: float = 1.0) -> Vec:
    """An n-vector with i.i.d. N(0, stddev^2) entries."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if stddev < 0:
        raise ValueError("stddev must be nonnegative")
    return stddev * standard_normals(rng, n)


def matvec(m: Mat, v: Vec) -> Vec:
    """Matrix-vector product with shape validation."""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-d, got ndim={m.ndim}")
    if v.ndim != 1:
        raise ValueError(f"vector must be 1-d, got ndim={v.ndim}")
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} @ {v.shape}")
    return m @ v


def check_symmetric(m: Mat, tol: float = 1e-12) -> None:
    """Raise ValueError unless m is square and symmetric within tol."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 0.0)
    if m.size and float(np.max(np.abs(m - m.T))) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")


def spectral_norm(m: Mat, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Largest singular value of a symmetric matrix.

    Runs power iteration on m @ m (positive semidefinite even when m is
    indefinite) from a fixed pseudo-random start and returns the square
    root of the top eigenvalue.  Raises IllConditioned if the residual
    has not fallen below tol within max_iters sweeps, which happens when
    the two leading eigenvalues of m @ m are too close to separate.
    """
    m = np.asarray(m, dtype=float)
    check_symmetric(m)
    d = m.shape[0]
    if d == 0:
        return 0.0
    if not np.any(m):
        return 0.0

    b = m @ m
    for attempt in range(3):
        # Fixed stream makes the start vector deterministic yet generic
        # (a structured start like all-ones can be orthogonal to the top
        # eigenvector of adversarial inputs).
        v = standard_normals(RngStream(0, ("spectral_norm_start", d, attempt)), d)
        v /= np.linalg.norm(v)
        restart = False
        for _ in range(max_iters):
            y = b @ v
            ny = float(np.linalg.norm(y))
            if ny == 0.0:
                restart = True  # start landed in the null space, retry
                break
            theta = float(v @ y)  # Rayleigh quotient of b, equals ||m v||^2
            if float(np.linalg.norm(y - theta * v)) <= 0.5 * tol * theta:
                return float(np.sqrt(theta))
            v = y / ny
        if not restart:
            raise IllConditioned(
                f"power iteration did not reach tol={tol:g} within {max_iters} iterations"
            )
    return 0.0
