"""Truncated Karhunen-Loeve sampling of Gaussian log-permeability fields.

The covariance is the separable exponential kernel

    C(x, y) = var * exp(-|x1 - y1| / corr) * exp(-|x2 - y2| / corr)

whose 1D factors have closed-form eigenpairs on an interval. 2D eigenpairs
are tensor products of the 1D ones, sorted by eigenvalue and truncated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CellField, InvalidArgument, RngStream, StructuredGrid, standard_normals
from .upscale import PermeabilityField


@dataclass(frozen=True)
class RandFieldSpec:
    mean: float = 0.0
    variance: float = 2.0
    corr_length: float = 19.0
    order: int = 31

    def __post_init__(self):
        if self.variance < 0:
            raise InvalidArgument("variance must be non-negative")
        if self.corr_length <= 0:
            raise InvalidArgument("correlation length must be positive")
        if self.order < 1:
            raise InvalidArgument("truncation order must be >= 1")


def _bisect(f, lo, hi, iters=200):
    """Vectorized bisection; ``f(lo)`` and ``f(hi)`` must differ in sign."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        left = np.sign(fmid) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fmid, flo)
        hi = np.where(left, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(hi))):
            break
    return 0.5 * (lo + hi)


def exponential_1d_roots(length: float, corr_length: float, count: int):
    """First ``count`` frequencies of the 1D exponential kernel on ``[0, length]``.

    Returns ``(omega, parity)`` sorted ascending, parity 0 for cosine (even)
    modes and 1 for sine (odd) modes about the interval midpoint.
    """
    c = 1.0 / corr_length
    a = 0.5 * length
    n_even = (count + 1) // 2
    n_odd = count // 2
    k = np.arange(n_even, dtype=float)
    # c cos(wa) - w sin(wa) = 0 on (k pi, k pi + pi/2) / a
    even = _bisect(
        lambda w: c * np.cos(w * a) - w * np.sin(w * a),
        k * np.pi / a,
        (k * np.pi + 0.5 * np.pi) / a,
    )
    k = np.arange(n_odd, dtype=float)
    # w cos(wa) + c sin(wa) = 0 on (k pi + pi/2, (k + 1) pi) / a
    odd = _bisect(
        lambda w: w * np.cos(w * a) + c * np.sin(w * a),
        (k * np.pi + 0.5 * np.pi) / a,
        (k + 1) * np.pi / a,
    )
    omega = np.empty(count)
    parity = np.empty(count, dtype=int)
    omega[0::2], parity[0::2] = even, 0
    omega[1::2], parity[1::2] = odd, 1
    return omega, parity


def exponential_1d_eigenvalues(omega: np.ndarray, corr_length: float) -> np.ndarray:
    """Unit-variance eigenvalues ``2 L / (L^2 w^2 + 1)`` for correlation length L."""
    return 2.0 * corr_length / (corr_length**2 * omega**2 + 1.0)


def exponential_1d_modes(x, length, omega, parity):
    """L2-normalized eigenfunctions evaluated at points ``x`` in ``[0, length]``.

    Returns an array of shape ``(len(omega), len(x))``.
    """
    a = 0.5 * length
    s = np.asarray(x, dtype=float)[None, :] - a
    w = omega[:, None]
    sin2 = np.sin(2.0 * omega * a) / (2.0 * omega)
    even = parity[:, None] == 0
    norm = np.sqrt(np.where(parity == 0, a + sin2, a - sin2))[:, None]
    return np.where(even, np.cos(w * s), np.sin(w * s)) / norm


def exponential_1d_trace(length: float, corr_length: float, n_terms: int = 200_000) -> float:
    """Sum of all 1D unit-variance eigenvalues (equals ``length``).

    Sums ``n_terms`` eigenvalues exactly and closes the series with the
    asymptotic tail, using frequencies ``m pi / length`` for large ``m``.
    """
    omega, _ = exponential_1d_roots(length, corr_length, n_terms)
    head = exponential_1d_eigenvalues(omega, corr_length)
    head = float(np.sum(head[::-1]))
    c = 1.0 / corr_length
    m = n_terms - 0.5
    tail = (2.0 * length / np.pi) * (0.5 * np.pi - np.arctan(m * np.pi / (length * c)))
    return head + tail


def kle_trace(spec: RandFieldSpec, lx: float, ly: float, n_terms: int = 200_000) -> float:
    """Sum of all (untruncated) 2D eigenvalues of the separable kernel."""
    return (
        spec.variance
        * exponential_1d_trace(lx, spec.corr_length, n_terms)
        * exponential_1d_trace(ly, spec.corr_length, n_terms)
    )


@dataclass(frozen=True)
class KLEBasis:
    """Truncated eigenpairs of the log-permeability covariance on a grid.

    ``modes`` has shape ``(order, ny, nx)``; ``eigenvalues`` are sorted
    descending and include the field variance.
    """

    grid: StructuredGrid
    spec: RandFieldSpec
    eigenvalues: np.ndarray
    modes: np.ndarray
    mode_index: np.ndarray

    @property
    def order(self) -> int:
        return len(self.eigenvalues)

    @property
    def captured_energy(self) -> float:
        total = self.spec.variance * self.grid.lx * self.grid.ly
        return float(np.sum(self.eigenvalues) / total) if total > 0 else 1.0

    def truncated_variance(self) -> np.ndarray:
        """Pointwise variance of the truncated expansion, shape ``(ny, nx)``."""
        return np.einsum("k,kij->ij", self.eigenvalues, self.modes**2)

    def on_grid(self, grid: StructuredGrid) -> "KLEBasis":
        """Same eigenpairs evaluated at the cell centers of another grid."""
        if (grid.lx, grid.ly) != (self.grid.lx, self.grid.ly):
            raise InvalidArgument("grids must cover the same domain")
        return build_kle(grid, self.spec)


def build_kle(grid: StructuredGrid, spec: RandFieldSpec) -> KLEBasis:
    p = spec.order
    if p > grid.n_cells:
        raise InvalidArgument(f"order {p} exceeds the {grid.n_cells} resolvable modes")
    n1 = p + 1
    wx, px = exponential_1d_roots(grid.lx, spec.corr_length, n1)
    wy, py = exponential_1d_roots(grid.ly, spec.corr_length, n1)
    lam_x = exponential_1d_eigenvalues(wx, spec.corr_length)
    lam_y = exponential_1d_eigenvalues(wy, spec.corr_length)

    prod = spec.variance * np.outer(lam_y, lam_x)  # [jy, ix]
    flat = prod.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:p]
    jy, ix = np.divmod(order, n1)

    xc, yc = grid.centers()
    phi_x = exponential_1d_modes(xc, grid.lx, wx, px)
    phi_y = exponential_1d_modes(yc, grid.ly, wy, py)
    modes = phi_y[jy][:, :, None] * phi_x[ix][:, None, :]
    eig = flat[order]
    eig.setflags(write=False)
    modes.setflags(write=False)
    return KLEBasis(grid, spec, eig, modes, np.stack([ix, jy], axis=1))


def sample_logperm(basis: KLEBasis, xi) -> CellField:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (basis.order,):
        raise InvalidArgument(f"expected {basis.order} coefficients, got shape {xi.shape}")
    y = basis.spec.mean + np.einsum("k,kij->ij", np.sqrt(basis.eigenvalues) * xi, basis.modes)
    return CellField(basis.grid, y)


def sample_logperm_batch(basis: KLEBasis, xi: np.ndarray) -> np.ndarray:
    """Vectorized sampling: ``xi`` of shape ``(n, order)`` -> ``(n, ny, nx)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2 or xi.shape[1] != basis.order:
        raise InvalidArgument(f"expected (n, {basis.order}) coefficients, got {xi.shape}")
    coeff = xi * np.sqrt(basis.eigenvalues)
    return basis.spec.mean + np.tensordot(coeff, basis.modes, axes=(1, 0))


def to_permeability(y: CellField) -> PermeabilityField:
    return PermeabilityField.scalar(y.grid, np.exp(y.values))


def realization_xi(seed: int, index: int, order: int) -> np.ndarray:
    """KLE coefficients of realization ``index`` under master ``seed``."""
    return standard_normals(RngStream(seed, index), order)


def realization_permeability(basis: KLEBasis, seed: int, index: int) -> PermeabilityField:
    return to_permeability(sample_logperm(basis, realization_xi(seed, index, basis.order)))
