"""Structured grids, cell-centered fields and seeded random streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform Cartesian grid over ``[0, lx] x [0, ly]``.

    Cells are indexed row-major with x fastest: cell ``(i, j)`` sits at flat
    index ``j * nx + i``. Arrays holding one value per cell use shape
    ``(ny, nx)``.
    """

    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        # single-cell axes appear as coarsened blocks and 1D columns
        if self.nx < 1 or self.ny < 1:
            raise InvalidArgument(f"grid needs at least one cell per axis, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise InvalidArgument(f"domain extents must be positive, got {self.lx}, {self.ly}")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        # unit thickness
        return self.dx * self.dy

    def index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def ij(self, index: int) -> tuple[int, int]:
        j, i = divmod(index, self.nx)
        return i, j

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        return ((i + 0.5) * self.dx, (j + 0.5) * self.dy)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """1D arrays of x and y cell-center coordinates."""
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dy
        return xc, yc

    def coarsen(self, factor: int) -> "StructuredGrid":
        if factor < 1 or self.nx % factor or self.ny % factor:
            raise InvalidArgument(f"factor {factor} does not divide {self.nx}x{self.ny}")
        return StructuredGrid(self.nx // factor, self.ny // factor, self.lx, self.ly)

    def refine(self, factor: int) -> "StructuredGrid":
        if factor < 1:
            raise InvalidArgument(f"factor must be >= 1, got {factor}")
        return StructuredGrid(self.nx * factor, self.ny * factor, self.lx, self.ly)


def make_grid(nx: int, ny: int, lx: float, ly: float) -> StructuredGrid:
    """Simulation grid: at least two cells along the flow direction, ny == 1 for 1D columns."""
    if nx < 2 or ny < 1:
        raise InvalidArgument(f"simulation grids need nx >= 2 and ny >= 1, got {nx}x{ny}")
    return StructuredGrid(int(nx), int(ny), float(lx), float(ly))


@dataclass(frozen=True)
class CellField:
    """One float64 value per cell, stored as an ``(ny, nx)`` array."""

    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.size != self.grid.n_cells:
            raise InvalidArgument(
                f"field has {values.size} values, grid has {self.grid.n_cells} cells"
            )
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @classmethod
    def constant(cls, grid: StructuredGrid, value: float) -> "CellField":
        return cls(grid, np.full(grid.shape, float(value)))


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream)``.

    Draws come from numpy's PCG64 bit generator seeded through
    ``SeedSequence([seed, stream])``; normals use numpy's ziggurat sampler.
    Both are platform independent for a fixed numpy release.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        mask = (1 << 64) - 1
        ss = np.random.SeedSequence([self.seed & mask, self.stream & mask])
        return np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


def standard_normals(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    return rng.generator().standard_normal(n)


def parallel_map(fn, items, workers: int = 1):
    """Ordered map, in worker processes when ``workers > 1``.

    Results come back in input order, so per-item random streams keep runs
    reproducible regardless of the worker count.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
