"""Dense linear algebra and statistics kernel.

Everything here is deterministic: randomness flows through the explicit
counter-based `Rng`, and the factorizations/eigensolvers below are plain
sequential float64 algorithms, so the same inputs always give the same bits.
"""

import math

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    ParameterError,
    SampleSizeError,
)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based deterministic random stream.

    Output i of a stream with seed s is splitmix64(s + (i+1)*golden), so the
    stream is a pure function of (seed, counter) and never touches platform
    RNG state. Normal variates come from Box-Muller on the uniform stream.
    Methods advance the counter in place; callers own the instance.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        return cls(state[0], state[1])

    def child(self, label: str) -> "Rng":
        """Derive an independent named substream (does not advance self)."""
        h = _FNV_OFFSET
        for b in label.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _U64
        mixed = _mix64(np.uint64(self.seed) ^ np.uint64(h))
        return Rng(int(mixed))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform floats in [low, high) with 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0):
        """Standard-normal variates via Box-Muller on the uniform stream."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] keeps log finite; u2 in [0, 1).
        u1 = ((raw[:m] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = mean + std * z
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def integers(self, bound: int, size=None):
        """Integers uniform on [0, bound). Bias from the float map is < 2^-53."""
        if bound <= 0:
            raise ParameterError(f"integer bound must be positive, got {bound}")
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = np.minimum((u * bound).astype(np.int64), bound - 1)
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), by partial Fisher-Yates."""
        if not 0 < k <= n:
            raise ParameterError(f"need 0 < k <= n, got k={k}, n={n}")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.integers(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()


def gaussian_matrix(rows: int, cols: int, mean: float, std: float, rng: Rng) -> np.ndarray:
    """rows x cols matrix of i.i.d. normal(mean, std^2) entries."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    return rng.normal(size=(rows, cols), mean=mean, std=std)


def qr_haar(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR factorization with the diagonal of R forced positive.

    The sign correction (Q <- Q D, R <- D R with D = diag(sign(R_ii))) makes
    the factorization unique; for a standard-Gaussian input matrix the
    corrected Q is then exactly Haar-distributed on the orthogonal group,
    which raw Householder QR alone does not give.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"qr_haar needs a square matrix, got shape {a.shape}")
    q, r = np.linalg.qr(a)
    d = np.diagonal(r)
    if np.min(np.abs(d)) < 1e-12:
        raise DegenerateInputError(
            f"rank-deficient input: min |R_ii| = {np.min(np.abs(d)):.3e}"
        )
    s = np.sign(d)
    return q * s[np.newaxis, :], r * s[:, np.newaxis]


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    asym = float(np.max(np.abs(m - m.T)))
    if asym > 1e-12 * scale:
        raise ContractError(f"matrix is not symmetric: max |M - M^T| = {asym:.3e}")
    return 0.5 * (m + m.T)


def _eigvals_3x3(a: np.ndarray) -> np.ndarray:
    """Closed-form eigenvalues of a symmetric 3x3 via the characteristic cubic."""
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    if p1 == 0.0:
        return np.sort(np.diagonal(a))[::-1].copy()
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    detb = (
        b[0, 0] * (b[1, 1] * b[2, 2] - b[1, 2] * b[2, 1])
        - b[0, 1] * (b[1, 0] * b[2, 2] - b[1, 2] * b[2, 0])
        + b[0, 2] * (b[1, 0] * b[2, 1] - b[1, 1] * b[2, 0])
    )
    r = min(1.0, max(-1.0, detb / 2.0))
    phi = math.acos(r) / 3.0
    e1 = q + 2.0 * p * math.cos(phi)
    e3 = q + 2.0 * p * math.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return np.array([e1, e2, e3])


def _eigvals_jacobi(a: np.ndarray, max_sweeps: int = 100) -> np.ndarray:
    """Cyclic Jacobi iteration, run until the off-diagonal norm is negligible."""
    a = a.copy()
    n = a.shape[0]
    if n == 1:
        return a.diagonal().copy()
    tol = 1e-12 * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.square(a)) - np.sum(np.square(np.diagonal(a)))))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
    else:
        raise ContractError("Jacobi eigensolver did not converge")
    return np.sort(np.diagonal(a))[::-1].copy()


def sym_eigvals(m: np.ndarray, method: str = "auto") -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending.

    method: "auto" uses the closed-form cubic for 3x3 and Jacobi otherwise;
    "closed_form" and "jacobi" force one route (the two are compared against
    each other and against a brute-force oracle in the verification suite).
    """
    a = _check_symmetric(m)
    if method == "closed_form":
        if a.shape[0] != 3:
            raise DimensionError("closed_form route is only defined for 3x3 input")
        return _eigvals_3x3(a)
    if method == "jacobi":
        return _eigvals_jacobi(a)
    if method != "auto":
        raise ParameterError(f"unknown eigensolver method {method!r}")
    return _eigvals_3x3(a) if a.shape[0] == 3 else _eigvals_jacobi(a)


def spectral_norm(m: np.ndarray, method: str = "auto") -> float:
    """Largest singular value, computed as sqrt(max eigenvalue of M^T M)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    gram = m.T @ m
    ev = sym_eigvals(0.5 * (gram + gram.T), method=method)
    return math.sqrt(max(float(ev[0]), 0.0))


def _kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution, Q(lam)."""
    if lam < 0.2:
        return 1.0
    total = 0.0
    sign = 1.0
    for j in range(1, 200):
        term = math.exp(-2.0 * j * j * lam * lam)
        total += sign * term
        if term < 1e-16:
            break
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def ks_statistic(samples, cdf) -> tuple[float, float]:
    """Two-sided one-sample Kolmogorov-Smirnov test against a cdf callable.

    Returns (statistic, asymptotic p-value). Requires >= 30 samples and a cdf
    that is monotone on the sample range.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n < 30:
        raise SampleSizeError(f"KS test needs >= 30 samples, got {n}")
    try:
        f = np.asarray(cdf(x), dtype=np.float64)
        if f.shape != x.shape:
            raise TypeError
    except (TypeError, ValueError):
        f = np.asarray([cdf(v) for v in x], dtype=np.float64)
    if np.any(np.diff(f) < -1e-12):
        raise ContractError("cdf is not monotone on the sample range")
    i = np.arange(1, n + 1, dtype=np.float64)
    d_plus = float(np.max(i / n - f))
    d_minus = float(np.max(f - (i - 1.0) / n))
    d = max(d_plus, d_minus)
    sqrt_n = math.sqrt(n)
    p = _kolmogorov_sf((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)
    return d, p


def binomial_two_sided_p(k: int, n: int) -> float:
    """Exact two-sided p-value for k successes in n fair-coin trials."""
    if not 0 <= k <= n or n < 1:
        raise ParameterError(f"need 0 <= k <= n with n >= 1, got k={k}, n={n}")
    lo = min(k, n - k)
    if 2 * lo >= n:
        return 1.0
    log_half_n = n * math.log(0.5)
    tail = 0.0
    for i in range(lo + 1):
        tail += math.exp(math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + log_half_n)
    return min(1.0, 2.0 * tail)
