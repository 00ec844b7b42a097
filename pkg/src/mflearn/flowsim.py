"""Fully implicit finite-volume solver for incompressible two-phase flow.

Phase 1 invades from the left (Dirichlet pressure and saturation), the right
boundary holds a fixed pressure and the top and bottom are no-flow. Capillary
pressure is neglected, so both phases share one pressure. Unknowns per cell
are ``(P, S1)``; the implicit-Euler residual is solved by Newton-Raphson with
Appleyard saturation chopping.

Units: P in MPa, k in mDarcy, viscosity in mPa.s, time in days, length in m.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import CellField, InvalidArgument, StructuredGrid
from .upscale import PermeabilityField

log = logging.getLogger(__name__)

# mD * MPa / (mPa.s * m) -> m/day
DARCY_CONSTANT = 9.869233e-16 * 1e6 / 1e-3 * 86400.0


class SimulationFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FluidProps:
    mu1: float = 1.0
    mu2: float = 5.0
    n1: float = 2.0
    n2: float = 2.0
    s1r: float = 0.0
    s2r: float = 0.0
    porosity: float = 0.25

    def __post_init__(self):
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise InvalidArgument("viscosities must be positive")
        if self.n1 < 1 or self.n2 < 1:
            raise InvalidArgument("Corey exponents must be >= 1")
        if not (0 <= self.s1r < 0.5 and 0 <= self.s2r < 0.5):
            raise InvalidArgument("residual saturations must lie in [0, 0.5)")
        if not 0 < self.porosity < 1:
            raise InvalidArgument("porosity must lie in (0, 1)")


@dataclass(frozen=True)
class SimConfig:
    grid: StructuredGrid
    horizon: float
    fluid: FluidProps = FluidProps()
    p_left: float = 10.2
    p_right: float = 10.1
    s_inlet: float = 1.0
    p0: float = 10.1
    s0: float = 0.0
    n_snapshots: int = 16
    base_dt: float | None = None
    eps1: float = 1e-6
    eps2: float = 1e-3
    eps3: float = 1e-2
    ds_max: float = 0.2
    max_newton: int = 12
    max_halvings: int = 10
    # extra acceptance test on |sum of phase-1 residuals| relative to injected volume
    balance_tol: float = 1e-8
    source: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.grid.nx < 2:
            raise InvalidArgument("the solver needs at least two cells along x")
        if self.horizon <= 0:
            raise InvalidArgument("horizon must be positive")
        if self.n_snapshots < 1:
            raise InvalidArgument("need at least one snapshot")
        if min(self.eps1, self.eps2, self.eps3) <= 0:
            raise InvalidArgument("tolerances must be positive")
        if not 0 < self.ds_max <= 1:
            raise InvalidArgument("ds_max must lie in (0, 1]")
        interval = self.horizon / self.n_snapshots
        ratio = interval / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise InvalidArgument("base time step must divide the snapshot interval")

    @property
    def dt(self) -> float:
        return self.base_dt if self.base_dt is not None else self.horizon / 64.0

    def with_grid(self, grid: StructuredGrid) -> "SimConfig":
        return replace(self, grid=grid)


@dataclass(frozen=True)
class SimState:
    pressure: np.ndarray  # (ny, nx)
    saturation: np.ndarray  # (ny, nx), invading phase
    time: float = 0.0

    def as_cellfields(self, grid) -> tuple[CellField, CellField]:
        return CellField(grid, self.pressure), CellField(grid, self.saturation)


@dataclass
class StepRecord:
    """Diagnostics of one accepted time step."""

    time: float
    dt: float
    iterations: int
    max_scaled_residual: float
    max_dp: float
    max_ds: float
    accumulation: float  # sum of phi V dS1 over cells
    net_inflow: float  # phase-1 boundary inflow minus sources, times dt
    injected: float  # phase-1 boundary inflow times dt
    max_total_divergence: float  # max_i |r1 + r2| * dt / (phi V)
    # with keep_states: the accepted state, its predecessor and the final Newton update (dP, dS)
    state: SimState | None = field(default=None, repr=False)
    previous: SimState | None = field(default=None, repr=False)
    update: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)


@dataclass
class SaturationSeries:
    grid: StructuredGrid
    times: np.ndarray  # (n_ts,)
    snapshots: np.ndarray  # (n_ts, ny, nx)
    fidelity: str = ""
    seed: int | None = None
    cost: float = 0.0
    steps: list[StepRecord] = field(default_factory=list, repr=False)

    @property
    def n_snapshots(self) -> int:
        return len(self.times)


def relperm(s1, fluid: FluidProps):
    """Brooks-Corey relative permeabilities ``(kr1, kr2)``."""
    se = np.clip((np.asarray(s1, dtype=float) - fluid.s1r) / (1.0 - fluid.s1r - fluid.s2r), 0.0, 1.0)
    return se**fluid.n1, (1.0 - se) ** fluid.n2


def _mobilities(s1, fluid: FluidProps):
    """Phase mobilities and their derivatives with respect to S1."""
    scale = 1.0 / (1.0 - fluid.s1r - fluid.s2r)
    raw = (np.asarray(s1, dtype=float) - fluid.s1r) * scale
    se = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    lam1 = se**fluid.n1 / fluid.mu1
    lam2 = (1.0 - se) ** fluid.n2 / fluid.mu2
    dlam1 = np.where(inside, fluid.n1 * se ** (fluid.n1 - 1) * scale / fluid.mu1, 0.0)
    dlam2 = np.where(inside, -fluid.n2 * (1.0 - se) ** (fluid.n2 - 1) * scale / fluid.mu2, 0.0)
    return lam1, lam2, dlam1, dlam2


@dataclass(frozen=True)
class _Pattern:
    """Fixed sparsity of the Newton Jacobian, mapped straight into CSC storage."""

    rows: np.ndarray
    cols: np.ndarray
    slot: np.ndarray  # raw entry -> CSC data position
    indices: np.ndarray
    indptr: np.ndarray
    size: int

    @classmethod
    def build(cls, rows, cols, size):
        key = cols.astype(np.int64) * size + rows
        uniq, slot = np.unique(key, return_inverse=True)
        ucol, urow = np.divmod(uniq, size)
        indptr = np.zeros(size + 1, dtype=np.int64)
        np.add.at(indptr, ucol + 1, 1)
        return cls(rows, cols, slot, urow.astype(np.int32), np.cumsum(indptr).astype(np.int32), size)

    def matrix(self, vals):
        data = np.bincount(self.slot, weights=vals, minlength=len(self.indices))
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


@dataclass(frozen=True)
class Transmissibilities:
    """Two-point transmissibilities including the unit-conversion constant.

    Interior faces connect ``left[f] -> right[f]`` (flat cell indices).
    Boundary faces connect a cell to the left or right Dirichlet boundary.
    """

    left: np.ndarray
    right: np.ndarray
    trans: np.ndarray
    west_cells: np.ndarray
    west_trans: np.ndarray
    east_cells: np.ndarray
    east_trans: np.ndarray
    n_cells: int
    pattern: _Pattern


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def face_transmissibility(grid: StructuredGrid, perm: PermeabilityField, constant: float = 1.0):
    """Geometric face transmissibilities for the x and y faces.

    Returns ``(tx, ty)`` with shapes ``(ny, nx - 1)`` and ``(ny - 1, nx)``.
    ``constant`` multiplies every value (1 gives pure geometry, in mD).
    """
    kxx, kyy = perm.kxx, perm.kyy
    with np.errstate(invalid="ignore", divide="ignore"):
        hx = np.nan_to_num(_harmonic(kxx[:, :-1], kxx[:, 1:]))
        hy = np.nan_to_num(_harmonic(kyy[:-1, :], kyy[1:, :]))
    tx = constant * (grid.dy / grid.dx) * hx
    ty = constant * (grid.dx / grid.dy) * hy
    return tx, ty


def _jacobian_pattern(L, R, west, east, n):
    rows, cols = [], []
    for ph in (0, 1):
        rl, rr = 2 * L + ph, 2 * R + ph
        for r in (rl, rr):
            for c in (2 * L, 2 * R, 2 * L + 1, 2 * R + 1):
                rows.append(r)
                cols.append(c)
        for cells in (west, east):
            rows += [2 * cells + ph, 2 * cells + ph]
            cols += [2 * cells, 2 * cells + 1]
    cells = np.arange(n)
    rows += [2 * cells, 2 * cells + 1]
    cols += [2 * cells + 1, 2 * cells + 1]
    return _Pattern.build(np.concatenate(rows), np.concatenate(cols), 2 * n)


def build_transmissibilities(perm: PermeabilityField) -> Transmissibilities:
    grid = perm.grid
    idx = np.arange(grid.n_cells).reshape(grid.shape)
    tx, ty = face_transmissibility(grid, perm, DARCY_CONSTANT)
    left = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    right = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    trans = np.concatenate([tx.ravel(), ty.ravel()])
    west, east = idx[:, 0].copy(), idx[:, -1].copy()
    # half-cell distance to the Dirichlet boundary
    tb = DARCY_CONSTANT * grid.dy / (0.5 * grid.dx)
    return Transmissibilities(
        left=left,
        right=right,
        trans=trans,
        west_cells=west,
        west_trans=tb * perm.kxx[:, 0],
        east_cells=east,
        east_trans=tb * perm.kxx[:, -1],
        n_cells=grid.n_cells,
        pattern=_jacobian_pattern(left, right, west, east, grid.n_cells),
    )


@dataclass
class _Assembly:
    r1: np.ndarray
    r2: np.ndarray
    jac: sp.csc_matrix | None
    boundary_in1: float  # phase-1 boundary inflow rate
    boundary_net1: float  # net phase-1 inflow rate (boundaries)


def _assemble(p, s, s_prev, dt, config: SimConfig, tr: Transmissibilities, jacobian=True):
    """Residuals of both phase balances and, optionally, the analytic Jacobian.

    Equation ``2 i + phase`` is the balance of that phase in cell ``i``;
    unknown ``2 i`` is its pressure and ``2 i + 1`` its saturation.
    """
    fluid = config.fluid
    n = tr.n_cells
    vol = config.grid.cell_volume
    pv = fluid.porosity * vol
    lam1, lam2, dlam1, dlam2 = _mobilities(s, fluid)

    r1 = pv * (s - s_prev) / dt + config.source[0] * vol
    r2 = -pv * (s - s_prev) / dt + config.source[1] * vol
    vals = []

    L, R, T = tr.left, tr.right, tr.trans
    dp = p[L] - p[R]
    from_left = dp >= 0.0
    up = np.where(from_left, L, R)
    bnd = []
    for cells, tb, pb, sb in (
        (tr.west_cells, tr.west_trans, config.p_left, config.s_inlet),
        (tr.east_cells, tr.east_trans, config.p_right, config.s0),
    ):
        dpb = p[cells] - pb
        lb = _mobilities(np.full(len(cells), sb), fluid)
        bnd.append((cells, tb, dpb, dpb >= 0.0, lb))

    in1 = net1 = 0.0
    for ph, (lam, dlam, r) in enumerate(((lam1, dlam1, r1), (lam2, dlam2, r2))):
        flux = T * lam[up] * dp
        r += np.bincount(L, weights=flux, minlength=n) - np.bincount(R, weights=flux, minlength=n)
        if jacobian:
            a = T * lam[up]
            b = T * dlam[up] * dp
            bl = np.where(from_left, b, 0.0)
            br = b - bl
            vals += [a, -a, bl, br, -a, a, -bl, -br]
        for cells, tb, dpb, out, lb in bnd:
            lam_up = np.where(out, lam[cells], lb[ph])
            bflux = tb * lam_up * dpb
            r[cells] += bflux
            if ph == 0:
                net1 -= float(np.sum(bflux))
                in1 += float(np.sum(np.where(bflux < 0, -bflux, 0.0)))
            if jacobian:
                vals += [tb * lam_up, np.where(out, tb * dlam[cells] * dpb, 0.0)]

    jac = None
    if jacobian:
        vals += [np.full(n, pv / dt), np.full(n, -pv / dt)]
        jac = tr.pattern.matrix(np.concatenate(vals))
    return _Assembly(r1, r2, jac, in1, net1)


def assemble_residual(state: SimState, prev_state: SimState, dt: float, config: SimConfig, perm: PermeabilityField):
    """Per-cell residuals ``(r1, r2)`` of both phase balances, shape ``(ny, nx)`` each."""
    tr = build_transmissibilities(perm)
    asm = _assemble(
        state.pressure.ravel(), state.saturation.ravel(), prev_state.saturation.ravel(),
        dt, config, tr, jacobian=False,
    )
    return asm.r1.reshape(config.grid.shape), asm.r2.reshape(config.grid.shape)


def convergence_measures(r1, r2, dp, ds, dt, config: SimConfig):
    """The three Newton convergence measures: scaled residual, max |dP|, max |dS|."""
    pv = config.fluid.porosity * config.grid.cell_volume
    res = max(float(np.max(np.abs(r1))), float(np.max(np.abs(r2)))) * dt / pv
    return res, float(np.max(np.abs(dp))), float(np.max(np.abs(ds)))


def is_converged(measures, config: SimConfig) -> bool:
    res, dp, ds = measures
    return res < config.eps1 and dp < config.eps2 and ds < config.eps3


def appleyard_chop(ds_raw, s, ds_max):
    """Cap each saturation update at ``ds_max`` and keep the result in [0, 1]."""
    s_new = np.clip(s + np.clip(ds_raw, -ds_max, ds_max), 0.0, 1.0)
    return s_new, s_new - s


@dataclass
class NewtonInfo:
    converged: bool
    measures: tuple[float, float, float]
    assembly: _Assembly | None = None
    update: tuple[np.ndarray, np.ndarray] | None = None


def newton_step(state: SimState, prev_state: SimState, dt: float, config: SimConfig,
                perm: PermeabilityField | None = None, transmissibilities: Transmissibilities | None = None):
    """One Newton iteration. Returns ``(new_state, converged, info)``.

    Raises ``np.linalg.LinAlgError`` when the Jacobian is singular.
    """
    tr = transmissibilities if transmissibilities is not None else build_transmissibilities(perm)
    p = state.pressure.ravel()
    s = state.saturation.ravel()
    s_prev = prev_state.saturation.ravel()
    asm = _assemble(p, s, s_prev, dt, config, tr)

    rhs = np.empty(2 * len(p))
    rhs[0::2] = -asm.r1
    rhs[1::2] = -asm.r2
    try:
        lu = spla.splu(asm.jac, permc_spec="MMD_AT_PLUS_A")
        delta = lu.solve(rhs)
    except RuntimeError as exc:  # SuperLU reports singular factors this way
        raise np.linalg.LinAlgError(str(exc)) from exc
    if not np.all(np.isfinite(delta)):
        raise np.linalg.LinAlgError("non-finite Newton update")

    dp = delta[0::2]
    p_new = p + dp
    s_new, ds = appleyard_chop(delta[1::2], s, config.ds_max)

    after = _assemble(p_new, s_new, s_prev, dt, config, tr, jacobian=False)
    measures = convergence_measures(after.r1, after.r2, dp, ds, dt, config)
    grid = config.grid
    new_state = SimState(p_new.reshape(grid.shape), s_new.reshape(grid.shape), state.time)
    converged = is_converged(measures, config)
    update = (dp.reshape(grid.shape), ds.reshape(grid.shape))
    return new_state, converged, NewtonInfo(converged, measures, after, update)


def initial_state(config: SimConfig) -> SimState:
    shape = config.grid.shape
    return SimState(np.full(shape, float(config.p0)), np.full(shape, float(config.s0)), 0.0)


def _balanced(asm: _Assembly, dt: float, config: SimConfig) -> bool:
    pv = config.fluid.porosity * config.grid.cell_volume
    scale = max(asm.boundary_in1 * dt, config.eps1 * pv)
    return abs(float(np.sum(asm.r1))) * dt <= config.balance_tol * scale


def _solve_step(state, dt, config, tr):
    """Newton loop for one time step; returns (state, iterations, info) or None."""
    prev = state
    current = state
    for it in range(1, config.max_newton + 1):
        try:
            current, converged, info = newton_step(current, prev, dt, config, transmissibilities=tr)
        except np.linalg.LinAlgError as exc:
            log.debug("singular Jacobian at t=%g dt=%g: %s", state.time, dt, exc)
            return None
        if converged and _balanced(info.assembly, dt, config):
            return SimState(current.pressure, current.saturation, state.time + dt), it, info
        if not np.isfinite(info.measures[0]):
            return None
    return None


def simulate(perm: PermeabilityField, config: SimConfig, fidelity: str = "", seed: int | None = None,
             state: SimState | None = None, keep_states: bool = False) -> SaturationSeries:
    """March from t = 0 to the horizon, recording evenly spaced snapshots.

    ``keep_states`` stores every accepted state in the step records so the
    convergence criteria can be re-checked afterwards.
    """
    if perm.grid != config.grid:
        raise InvalidArgument("permeability grid does not match the simulation grid")
    started = time.perf_counter()
    grid = config.grid
    tr = build_transmissibilities(perm)
    state = state or initial_state(config)
    pv = config.fluid.porosity * grid.cell_volume

    horizon = config.horizon
    base_dt = config.dt
    snap_times = horizon * np.arange(1, config.n_snapshots + 1) / config.n_snapshots
    snapshots = np.empty((config.n_snapshots,) + grid.shape)
    steps: list[StepRecord] = []

    t = 0.0
    dt = base_dt
    successes = 0
    halvings = 0
    k = 0
    tol = 1e-9 * base_dt
    while k < config.n_snapshots:
        target = snap_times[k]
        step = min(dt, target - t)
        result = _solve_step(state, step, config, tr)
        if result is None:
            halvings += 1
            successes = 0
            if halvings > config.max_halvings:
                raise SimulationFailure(
                    f"time step chopped {config.max_halvings} times at t={t:g}",
                    {"time": t, "dt": step, "accepted_steps": len(steps)},
                )
            dt = step / 2.0
            continue
        new_state, iterations, info = result
        ds = new_state.saturation - state.saturation
        asm = info.assembly
        steps.append(StepRecord(
            time=t + step,
            dt=step,
            iterations=iterations,
            max_scaled_residual=info.measures[0],
            max_dp=info.measures[1],
            max_ds=info.measures[2],
            accumulation=float(np.sum(pv * ds)),
            net_inflow=(asm.boundary_net1 - config.source[0] * grid.cell_volume * grid.n_cells) * step,
            injected=asm.boundary_in1 * step,
            max_total_divergence=float(np.max(np.abs(asm.r1 + asm.r2))) * step / pv,
            state=SimState(new_state.pressure, new_state.saturation, t + step) if keep_states else None,
            previous=state if keep_states else None,
            update=info.update if keep_states else None,
        ))
        state = new_state
        t = t + step
        halvings = 0
        successes += 1
        if successes >= 2 and dt < base_dt:
            dt = min(2.0 * dt, base_dt)
            successes = 0
        if abs(target - t) <= tol:
            t = target
            snapshots[k] = state.saturation
            k += 1

    cost = time.perf_counter() - started
    return SaturationSeries(grid, snap_times, snapshots, fidelity=fidelity, seed=seed, cost=cost, steps=steps)
