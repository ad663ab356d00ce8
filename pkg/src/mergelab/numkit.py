"""Deterministic numeric kernels: seeded RNG, softmax/KL, distances, orthogonality.

Everything here is pure and 64-bit float. The RNG is a from-scratch
xoshiro256** (seeded through splitmix64) so that a given seed yields the
same stream on every platform, independent of numpy's generator choices.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53

KL_CLAMP = 1e-12  # floor applied to predicted probabilities before log


# ---------------------------------------------------------------------------
# Seeding / stream derivation
# ---------------------------------------------------------------------------

def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Derive a named child seed from a root seed.

    Stable across platforms and runs (does not use Python's salted hash),
    so pipeline stages can re-derive their streams independently.
    """
    state = (seed ^ _fnv1a64(label.encode("utf-8"))) & _MASK64
    state, _ = _splitmix64(state)
    _, out = _splitmix64(state)
    return out


class Rng:
    """xoshiro256** stream with Box-Muller normals.

    Single-owner by design: never share an instance across threads; use
    ``derive_seed`` to hand child streams to parallel work.
    """

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3", "_spare")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        words = []
        for _ in range(4):
            state, w = _splitmix64(state)
            words.append(w)
        if not any(words):  # the all-zero state is the one invalid xoshiro state
            words[0] = 1
        self._s0, self._s1, self._s2, self._s3 = words
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s1 * 5) & _MASK64
        x = ((x << 7) | (x >> 57)) & _MASK64
        result = (x * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, low: float, high: float, size: int | tuple[int, ...] | None = None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = low + (high - low) * self.random()
        return out.reshape(size)

    def _next_normal(self) -> float:
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        u1 = 1.0 - self.random()  # (0, 1], keeps log finite
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normal(self, size: int | tuple[int, ...] | None = None):
        """Standard normal deviates via Box-Muller on the uniform stream."""
        if size is None:
            return self._next_normal()
        n = int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self._next_normal()
        return out.reshape(size)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by masked rejection."""
        if n <= 0:
            raise ValueError(f"below() requires n >= 1, got {n}")
        if n == 1:
            return 0
        mask = (1 << (n - 1).bit_length()) - 1
        while True:
            r = self.next_u64() & mask
            if r < n:
                return r

    def shuffle(self, arr) -> None:
        """In-place Fisher-Yates shuffle of a list or 1-D array."""
        for i in range(len(arr) - 1, 0, -1):
            j = self.below(i + 1)
            arr[i], arr[j] = arr[j], arr[i]

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


# ---------------------------------------------------------------------------
# Matrix / vector kernels
# ---------------------------------------------------------------------------

def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name}: non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def softmax(logits) -> np.ndarray:
    """Subtract-max stabilized softmax of a 1-D vector."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax: expected nonempty 1-D vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("softmax: non-finite entries")
    z = np.exp(v - v.max())
    return z / z.sum()


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of an (n, C) logit matrix."""
    m = np.asarray(logits, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ShapeError(f"softmax_rows: expected (n, C) with C >= 1, got {m.shape}")
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _check_prob_vector(v: np.ndarray, name: str) -> None:
    s = float(v.sum())
    if abs(s - 1.0) > 1e-9:
        raise ValueError(f"{name} is not a probability vector (sums to {s!r})")


def kl_divergence(target, predicted) -> float:
    """KL(target || predicted) with 0*log(0) := 0 and predicted clamped at 1e-12."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeError(f"kl_divergence: shapes {t.shape} vs {p.shape}")
    _check_prob_vector(t, "target")
    _check_prob_vector(p, "predicted")
    p = np.clip(p, KL_CLAMP, None)
    mask = t > 0.0
    return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(p[mask]))))


def kl_divergence_rows(targets, predictions) -> np.ndarray:
    """Per-row KL(target || predicted) for matched (n, C) probability matrices."""
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 2:
        raise ShapeError(f"kl_divergence_rows: shapes {t.shape} vs {p.shape}")
    p = np.clip(p, KL_CLAMP, None)
    terms = np.where(t > 0.0, t * (np.log(np.clip(t, KL_CLAMP, None)) - np.log(p)), 0.0)
    return terms.sum(axis=1)


def euclidean_distance(x, y) -> float:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"euclidean_distance: shapes {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def orth_penalty(m) -> float:
    """Entrywise l1 norm of M^T M - I; zero iff M is orthogonal."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"orth_penalty: expected square matrix, got {a.shape}")
    gram = a.T @ a - np.eye(a.shape[0])
    return float(np.abs(gram).sum())


def random_orthogonal(d: int, rng: Rng) -> np.ndarray:
    """Haar-ish random orthogonal matrix via QR of a Gaussian matrix."""
    if d < 1:
        raise ValueError(f"random_orthogonal: d must be >= 1, got {d}")
    g = rng.normal((d, d))
    q, r = np.linalg.qr(g)
    # Fix column signs so the factorization is unique (diag(R) > 0).
    signs = np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    return q * signs


# ---------------------------------------------------------------------------
# Error-free float transformations (used by merging for exact identities)
# ---------------------------------------------------------------------------

def two_sum(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Knuth TwoSum: s + err == a + b exactly, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = a + b
    ap = s - b
    bp = s - ap
    err = (a - ap) + (b - bp)
    return s, err
