"""Real symmetric spherical harmonics: basis evaluation, least-squares
coefficient fitting, Legendre machinery, and zonal spherical convolution.

Basis convention (documented because the literature varies): real,
orthonormal, even degrees only.  For degree ``n`` and order ``l`` the basis
function is

    l = 0 :  N(n,0)   * P_n^0(cos th)
    l > 0 :  sqrt(2) * N(n,l)   * P_n^l(cos th)   * cos(l * ph)
    l < 0 :  sqrt(2) * N(n,|l|) * P_n^|l|(cos th) * sin(|l| * ph)

with ``N(n,m) = sqrt((2n+1)/(4pi) * (n-m)!/(n+m)!)`` and ``P_n^m`` the
associated Legendre function including the Condon-Shortley phase.
Coefficients are indexed lexicographically: ``n`` ascending over even
degrees, ``l`` from ``-n`` to ``+n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, lpmv


@dataclass(frozen=True)
class GradientScheme:
    """Set of unit diffusion-encoding directions at a single b-value."""

    directions: np.ndarray  # (K, 3), unit norm
    b_value: float          # s/mm^2

    def __post_init__(self):
        dirs = np.ascontiguousarray(np.asarray(self.directions, dtype=np.float64))
        if dirs.ndim != 2 or dirs.shape[1] != 3 or dirs.shape[0] < 1:
            raise ValueError("directions must be a (K, 3) array with K >= 1")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("all directions must have unit norm (tol 1e-12)")
        if not self.b_value > 0:
            raise ValueError("b_value must be positive")
        object.__setattr__(self, "directions", dirs)

    @property
    def k(self) -> int:
        return self.directions.shape[0]


@dataclass(frozen=True)
class ShVector:
    """Coefficients of an even-degree real SH expansion."""

    coeffs: np.ndarray
    n_max: int

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.coeffs, dtype=np.float64))
        if c.ndim != 1 or c.size != num_coeffs(self.n_max):
            raise ValueError(
                f"expected {num_coeffs(self.n_max)} coefficients for n_max={self.n_max}, got {c.size}"
            )
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True)
class ShCube:
    """M x M x M x P block of SH coefficients around one voxel."""

    data: np.ndarray
    n_max: int
    radius: int

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        m = 2 * self.radius + 1
        if d.shape != (m, m, m, num_coeffs(self.n_max)):
            raise ValueError(f"expected shape {(m, m, m, num_coeffs(self.n_max))}, got {d.shape}")
        object.__setattr__(self, "data", d)


@dataclass(frozen=True)
class ZonalKernel:
    """Zonal spherical function given by one Legendre coefficient per even degree."""

    legendre_coeffs: np.ndarray  # xi_n for n = 0, 2, ..., n_max

    def __post_init__(self):
        c = np.ascontiguousarray(np.asarray(self.legendre_coeffs, dtype=np.float64))
        if c.ndim != 1 or c.size < 1:
            raise ValueError("legendre_coeffs must be a nonempty 1-D array")
        object.__setattr__(self, "legendre_coeffs", c)

    @property
    def n_max(self) -> int:
        return 2 * (self.legendre_coeffs.size - 1)


def legendre_poly(n, t):
    """Legendre polynomial p_n(t) by the stable three-term recurrence.

    Accepts scalar or array ``t``; raises on |t| > 1.
    """
    if n < 0 or int(n) != n:
        raise ValueError("degree must be a nonnegative integer")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(np.abs(t_arr) > 1.0 + 1e-12):
        raise ValueError("argument outside [-1, 1]")
    t_arr = np.clip(t_arr, -1.0, 1.0)
    p_prev = np.ones_like(t_arr)
    if n == 0:
        return p_prev if t_arr.ndim else float(p_prev)
    p_cur = t_arr.copy()
    for k in range(1, int(n)):
        p_next = ((2 * k + 1) * t_arr * p_cur - k * p_prev) / (k + 1)
        p_prev, p_cur = p_cur, p_next
    return p_cur if t_arr.ndim else float(p_cur)


def num_coeffs(n_max: int) -> int:
    """Number of even-degree SH coefficients up to n_max."""
    if n_max < 0 or n_max % 2 != 0:
        raise ValueError("n_max must be an even nonnegative integer")
    return (n_max + 1) * (n_max + 2) // 2


def band_degrees(n_max: int):
    """Even degrees 0, 2, ..., n_max."""
    num_coeffs(n_max)
    return tuple(range(0, n_max + 1, 2))


def channel_degrees(n_max: int) -> np.ndarray:
    """Per-coefficient degree n, in the lexicographic channel order."""
    return np.concatenate([np.full(2 * n + 1, n, dtype=np.int64) for n in band_degrees(n_max)])


def band_slice(n: int, n_max: int) -> slice:
    """Channel slice of band n within the length-P coefficient vector."""
    if n % 2 or n > n_max:
        raise ValueError("band must be an even degree <= n_max")
    start = num_coeffs(n - 2) if n > 0 else 0
    return slice(start, start + 2 * n + 1)


def basis_matrix(directions: np.ndarray, n_max: int) -> np.ndarray:
    """Evaluate the real symmetric basis at unit directions; returns (N, P)."""
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    p_total = num_coeffs(n_max)
    out = np.empty((dirs.shape[0], p_total))
    cos_theta = np.clip(dirs[:, 2], -1.0, 1.0)
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    col = 0
    for n in band_degrees(n_max):
        # m = 0 .. n evaluated once, reused for +/- orders
        for l in range(-n, n + 1):
            m = abs(l)
            norm = np.sqrt(
                (2 * n + 1) / (4.0 * np.pi) * np.exp(gammaln(n - m + 1) - gammaln(n + m + 1))
            )
            pnm = lpmv(m, n, cos_theta)
            if l == 0:
                out[:, col] = norm * pnm
            elif l > 0:
                out[:, col] = np.sqrt(2.0) * norm * pnm * np.cos(m * phi)
            else:
                out[:, col] = np.sqrt(2.0) * norm * pnm * np.sin(m * phi)
            col += 1
    return out


def sh_basis(scheme: GradientScheme, n_max: int) -> np.ndarray:
    """(K, P) design matrix of the scheme's directions."""
    return basis_matrix(scheme.directions, n_max)


def _fit_matrix(basis: np.ndarray, n_max: int, reg: float) -> np.ndarray:
    degrees = channel_degrees(n_max).astype(np.float64)
    penalty = (degrees * (degrees + 1.0)) ** 2
    return basis.T @ basis + reg * np.diag(penalty)


def fit_sh(samples: np.ndarray, scheme: GradientScheme, n_max: int, reg: float = 0.006) -> ShVector:
    """Least-squares SH fit with Laplace-Beltrami regularization.

    Minimizes ||B c - s||^2 + reg * ||diag(n(n+1)) c||^2 via the normal
    equations.  With reg = 0 the system must be determined (K >= P).
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size != scheme.k:
        raise ValueError("sample count does not match the scheme")
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    basis = sh_basis(scheme, n_max)
    p_total = num_coeffs(n_max)
    if reg == 0 and scheme.k < p_total:
        raise ValueError(f"underdetermined fit: K={scheme.k} < P={p_total} with reg=0")
    coeffs = np.linalg.solve(_fit_matrix(basis, n_max, reg), basis.T @ s)
    return ShVector(coeffs, n_max)


def fit_sh_many(signals: np.ndarray, scheme: GradientScheme, n_max: int, reg: float = 0.006) -> np.ndarray:
    """Voxelwise SH fit of an (N, K) signal array; returns (N, P)."""
    sig = np.asarray(signals, dtype=np.float64)
    if sig.ndim != 2 or sig.shape[1] != scheme.k:
        raise ValueError("signals must be (N, K) matching the scheme")
    basis = sh_basis(scheme, n_max)
    if reg == 0 and scheme.k < num_coeffs(n_max):
        raise ValueError("underdetermined fit with reg=0")
    return np.linalg.solve(_fit_matrix(basis, n_max, reg), basis.T @ sig.T).T


def eval_sh(c: ShVector, u: np.ndarray) -> float:
    """Evaluate the expansion at one unit direction."""
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return float(basis_matrix(u[None, :], c.n_max)[0] @ c.coeffs)


def render_sh(coeffs: np.ndarray, directions: np.ndarray, n_max: int) -> np.ndarray:
    """Evaluate coefficient rows at many directions: (..., P) x (N, 3) -> (..., N)."""
    return np.asarray(coeffs, dtype=np.float64) @ basis_matrix(directions, n_max).T


def zonal_convolve(c: ShVector, xi: ZonalKernel) -> ShVector:
    """Spherical convolution with a zonal kernel: scales band n by xi_n."""
    if xi.n_max != c.n_max:
        raise ValueError(f"kernel n_max {xi.n_max} does not match coefficients n_max {c.n_max}")
    gains = xi.legendre_coeffs[channel_degrees(c.n_max) // 2]
    return ShVector(c.coeffs * gains, c.n_max)
