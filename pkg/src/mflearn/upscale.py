"""Permeability coarsening and resolution changes between fidelities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CellField, InvalidArgument, StructuredGrid


@dataclass(frozen=True)
class PermeabilityField:
    """Diagonal permeability tensor per cell, in mDarcy.

    Scalar fields keep ``kxx is kyy``; the flow solver treats every field as
    diagonal so a single transmissibility path exists.
    """

    grid: StructuredGrid
    kxx: np.ndarray
    kyy: np.ndarray
    kind: str = "diagonal-tensor"

    def __post_init__(self):
        for name in ("kxx", "kyy"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(self.grid.shape)
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"{name} must be finite and positive")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.kind not in ("scalar", "diagonal-tensor"):
            raise InvalidArgument(f"unknown permeability kind {self.kind!r}")

    @classmethod
    def scalar(cls, grid: StructuredGrid, k) -> "PermeabilityField":
        k = np.asarray(k, dtype=np.float64).reshape(grid.shape)
        return cls(grid, k, k, kind="scalar")

    @property
    def k(self) -> np.ndarray:
        if self.kind != "scalar":
            raise InvalidArgument("tensor permeability has no single scalar value")
        return self.kxx

    def as_cellfields(self) -> tuple[CellField, CellField]:
        return CellField(self.grid, self.kxx), CellField(self.grid, self.kyy)


def _blocks(a: np.ndarray, factor: int) -> np.ndarray:
    """View ``(ny, nx)`` as ``(NY, NX, fy, fx)`` coarse blocks."""
    ny, nx = a.shape
    return a.reshape(ny // factor, factor, nx // factor, factor).transpose(0, 2, 1, 3)


def upscale_perm(fine: PermeabilityField, factor: int = 2) -> PermeabilityField:
    """Coarsen a scalar field by ``factor`` per axis.

    Within each coarse block, ``kxx`` is the arithmetic mean over rows of the
    harmonic mean along x, and ``kyy`` the arithmetic mean over columns of the
    harmonic mean along y. Spacing is uniform, so the distance weights are too.
    """
    if fine.kind != "scalar":
        raise InvalidArgument("upscale_perm expects a scalar permeability field")
    if factor < 1:
        raise InvalidArgument(f"factor must be >= 1, got {factor}")
    coarse = fine.grid.coarsen(factor)
    b = _blocks(fine.k, factor)
    inv = 1.0 / b
    harm_x = factor / inv.sum(axis=3)  # per row within block
    harm_y = factor / inv.sum(axis=2)  # per column within block
    kxx = harm_x.mean(axis=2)
    kyy = harm_y.mean(axis=2)
    return PermeabilityField(coarse, kxx, kyy)


def kron_upsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Replicate each pixel into a ``factor x factor`` block on the last two axes."""
    if factor < 1:
        raise InvalidArgument(f"factor must be >= 1, got {factor}")
    image = np.asarray(image)
    if factor == 1:
        return image.copy()
    return np.repeat(np.repeat(image, factor, axis=-2), factor, axis=-1)


def block_mean(image: np.ndarray, factor: int) -> np.ndarray:
    """Average ``factor x factor`` blocks on the last two axes."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape[-2:]
    if h % factor or w % factor:
        raise InvalidArgument(f"factor {factor} does not divide {h}x{w}")
    shaped = image.reshape(*image.shape[:-2], h // factor, factor, w // factor, factor)
    # offset by one block entry so constant blocks come back bit for bit
    ref = shaped[..., :1, :, :1]
    return ref[..., 0, :, 0] + (shaped - ref).mean(axis=(-3, -1))
