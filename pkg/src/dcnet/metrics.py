"""Per-voxel diffusion-tensor fitting and the eight scalar metrics used by
the reference classifiers: MD, FA, CL, CP (single-tensor) and DV, ASD, DE,
CVD (model-free statistics of the apparent-diffusivity samples).

Conventions, since these differ across the literature:

* CL = (l1 - l2) / l1 and CP = (l2 - l3) / l1, i.e. normalized by the
  largest eigenvalue;
* ASD = mean(ADC), CVD = population std(ADC) / mean(ADC), DE = sum(ADC^2),
  DV = (4 pi / 3) * ASD^(3/2) (a volume proxy monotone in ASD);
* negative eigenvalues from noisy fits are kept, not clipped, and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sh import GradientScheme

SIGNAL_FLOOR = 1e-6

METRIC_NAMES = ("md", "fa", "cl", "cp", "dv", "asd", "de", "cvd")


def adc(signal: np.ndarray, b_value: float) -> np.ndarray:
    """Apparent diffusivity per direction: -ln(s)/b with s clamped to [1e-6, 1]."""
    if not b_value > 0:
        raise ValueError("b_value must be positive")
    s = np.clip(np.asarray(signal, dtype=np.float64), SIGNAL_FLOOR, 1.0)
    return -np.log(s) / b_value


@dataclass(frozen=True)
class TensorFit:
    tensor: np.ndarray        # symmetric 3x3, mm^2/s
    eigenvalues: np.ndarray   # sorted descending
    residual: float           # rms of the log-linear fit
    negative_eigenvalues: bool


def _design_matrix(directions: np.ndarray) -> np.ndarray:
    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    return np.column_stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z])


def _assemble(d6: np.ndarray) -> np.ndarray:
    dxx, dyy, dzz, dxy, dxz, dyz = d6
    return np.array([[dxx, dxy, dxz], [dxy, dyy, dyz], [dxz, dyz, dzz]])


def fit_tensor(signal: np.ndarray, scheme: GradientScheme, b_value: float | None = None) -> TensorFit:
    """Log-linear least-squares single-tensor fit.

    Needs at least six non-coplanar directions; raises on a rank-deficient
    design matrix.
    """
    b = scheme.b_value if b_value is None else b_value
    g = _design_matrix(scheme.directions)
    if scheme.k < 6 or np.linalg.matrix_rank(g) < 6:
        raise ValueError("tensor fit needs >= 6 directions spanning all quadratic monomials")
    rhs = adc(signal, b)
    d6, *_ = np.linalg.lstsq(g, rhs, rcond=None)
    tensor = _assemble(d6)
    eigenvalues = np.linalg.eigvalsh(tensor)[::-1]
    residual = float(np.sqrt(np.mean((g @ d6 - rhs) ** 2)))
    return TensorFit(tensor, eigenvalues, residual, bool(eigenvalues[-1] < 0))


def fit_tensor_many(signals: np.ndarray, scheme: GradientScheme, b_value: float | None = None) -> np.ndarray:
    """Eigenvalues (N, 3, descending) of voxelwise tensor fits for (N, K) signals."""
    b = scheme.b_value if b_value is None else b_value
    g = _design_matrix(scheme.directions)
    if scheme.k < 6 or np.linalg.matrix_rank(g) < 6:
        raise ValueError("tensor fit needs >= 6 directions spanning all quadratic monomials")
    rhs = adc(np.asarray(signals, dtype=np.float64), b)       # (N, K)
    d6 = np.linalg.lstsq(g, rhs.T, rcond=None)[0].T           # (N, 6)
    tensors = np.empty((d6.shape[0], 3, 3))
    tensors[:, 0, 0], tensors[:, 1, 1], tensors[:, 2, 2] = d6[:, 0], d6[:, 1], d6[:, 2]
    tensors[:, 0, 1] = tensors[:, 1, 0] = d6[:, 3]
    tensors[:, 0, 2] = tensors[:, 2, 0] = d6[:, 4]
    tensors[:, 1, 2] = tensors[:, 2, 1] = d6[:, 5]
    return np.linalg.eigvalsh(tensors)[:, ::-1]


def westin_metrics(fit: TensorFit):
    """(MD, FA, CL, CP) of a tensor fit; CL/CP report 0 when l1 <= 0."""
    return tuple(float(v[0]) for v in _westin_many(fit.eigenvalues[None]))


def _westin_many(eigs: np.ndarray):
    l1, l2, l3 = eigs[:, 0], eigs[:, 1], eigs[:, 2]
    md = eigs.mean(axis=1)
    norm2 = (eigs ** 2).sum(axis=1)
    # pairwise form of the anisotropy numerator: identical algebraically to
    # sum (l_i - mean)^2 but exactly zero for exactly equal eigenvalues
    pairwise = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(0.5 * pairwise / norm2)
        cl = (l1 - l2) / l1
        cp = (l2 - l3) / l1
    fa = np.where(norm2 > 0, fa, 0.0)
    degenerate = l1 <= 0
    cl = np.where(degenerate, 0.0, cl)
    cp = np.where(degenerate, 0.0, cp)
    return md, fa, cl, cp


def model_free_metrics(adc_samples: np.ndarray):
    """(DV, ASD, DE, CVD) from the per-direction diffusivity samples."""
    dv, asd, de, cvd = (float(v[0]) for v in _model_free_many(np.atleast_2d(adc_samples)))
    return dv, asd, de, cvd


def _model_free_many(adcs: np.ndarray):
    asd = adcs.mean(axis=1)
    de = (adcs ** 2).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cvd = adcs.std(axis=1) / asd
    cvd = np.where(asd != 0, cvd, 0.0)
    dv = (4.0 * np.pi / 3.0) * np.abs(asd) ** 1.5 * np.sign(asd)
    return dv, asd, de, cvd


@dataclass(frozen=True)
class MetricVector:
    md: float
    fa: float
    cl: float
    cp: float
    dv: float
    asd: float
    de: float
    cvd: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in METRIC_NAMES])


def metric_vector(signal: np.ndarray, scheme: GradientScheme, b_value: float | None = None) -> MetricVector:
    """The eight metrics of one voxel, in the fixed report order."""
    return MetricVector(*metric_table(np.atleast_2d(signal), scheme, b_value)[0])


def metric_table(signals: np.ndarray, scheme: GradientScheme, b_value: float | None = None) -> np.ndarray:
    """(N, 8) metric matrix for (N, K) signals, columns in METRIC_NAMES order."""
    b = scheme.b_value if b_value is None else b_value
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    eigs = fit_tensor_many(signals, scheme, b)
    md, fa, cl, cp = _westin_many(eigs)
    dv, asd, de, cvd = _model_free_many(adc(signals, b))
    return np.column_stack([md, fa, cl, cp, dv, asd, de, cvd])
