"""Multi-fidelity data generation and the three-phase transfer-learning workflow."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import neuralnet as nn_
from .core import InvalidArgument, StructuredGrid, parallel_map
from .flowsim import FluidProps, SimConfig, SimulationFailure, simulate
from .randperm import KLEBasis, RandFieldSpec, build_kle, realization_permeability
from .upscale import kron_upsample, upscale_perm
from .uqstats import BreakthroughConfig, breakthrough_time

log = logging.getLogger(__name__)

MFDS_MAGIC = b"MFDS v1"
# realization indices at or above this offset are reserved for test data
TEST_INDEX_OFFSET = 1 << 40


class TrainingDivergence(RuntimeError):
    pass


# ----------------------------------------------------------------- budget


@dataclass(frozen=True)
class BudgetPlan:
    budget: float
    c_hfs: float
    c_lfs: float
    n_hfs: int
    n_lfs: int

    @property
    def planned_cost(self) -> float:
        return self.n_hfs * self.c_hfs + self.n_lfs * self.c_lfs

    @property
    def lfs_hfs_ratio(self) -> float:
        return self.n_lfs / self.n_hfs if self.n_hfs else math.inf


def plan_budget(budget: float, c_hfs: float, c_lfs: float, n_hfs: int) -> BudgetPlan:
    if budget <= 0 or c_hfs <= 0 or c_lfs <= 0 or n_hfs < 0:
        raise InvalidArgument("budget and unit costs must be positive, n_hfs non-negative")
    hfs_cost = n_hfs * c_hfs
    if hfs_cost > budget:
        raise InvalidArgument(f"{n_hfs} HFS cost {hfs_cost:g} s, over the {budget:g} s budget")
    n_lfs = math.floor((budget - hfs_cost) / c_lfs + 1e-9)
    return BudgetPlan(budget, c_hfs, c_lfs, n_hfs, n_lfs)


# ----------------------------------------------------------------- problem setup


@dataclass(frozen=True)
class Problem:
    """Everything needed to turn a realization index into HFS and LFS data."""

    fine: SimConfig
    field: RandFieldSpec = RandFieldSpec()
    factor: int = 2

    @property
    def coarse(self) -> SimConfig:
        return self.fine.with_grid(self.fine.grid.coarsen(self.factor))

    def kle(self) -> KLEBasis:
        return build_kle(self.fine.grid, self.field)

    def config_hash(self) -> str:
        blob = json.dumps({"sim": _sim_dict(self.fine), "field": asdict(self.field), "factor": self.factor},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sim_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["base_dt"] = cfg.dt
    return d


def calibrate_horizon(grid: StructuredGrid, fluid: FluidProps = FluidProps(),
                      bcfg: BreakthroughConfig = BreakthroughConfig(), multiple: float = 2.0,
                      **sim_kwargs) -> float:
    """Horizon = ``multiple`` x the breakthrough time of the mean field (k = 1 mD).

    Runs pilot solves with 64 snapshots, doubling the pilot horizon until
    breakthrough is observed.
    """
    from .flowsim import DARCY_CONSTANT
    from .upscale import PermeabilityField

    perm = PermeabilityField.scalar(grid, np.ones(grid.shape))
    probe = SimConfig(grid=grid, horizon=1.0, fluid=fluid, **sim_kwargs)
    dp = abs(probe.p_left - probe.p_right)
    lam0 = 1.0 / fluid.mu2
    # time to fill the pore volume up to the plane at the initial flow rate
    guess = fluid.porosity * bcfg.plane * grid.lx / (DARCY_CONSTANT * lam0 * dp)
    for _ in range(12):
        cfg = SimConfig(grid=grid, horizon=guess, fluid=fluid, n_snapshots=64, base_dt=guess / 64, **sim_kwargs)
        t = breakthrough_time(simulate(perm, cfg), bcfg)
        if math.isfinite(t):
            return multiple * t
        guess *= 2.0
    raise SimulationFailure("no breakthrough in pilot runs")


# ----------------------------------------------------------------- datasets


@dataclass
class DatasetEntry:
    input: np.ndarray  # fine permeability (H, W), mD
    target: np.ndarray  # (N_ts, h, w) saturation at the fidelity's resolution
    fidelity: str  # "HFS" or "LFS"
    index: int  # realization index in the master stream
    cost: float = 0.0


@dataclass
class Dataset:
    entries: list[DatasetEntry] = field(default_factory=list)
    master_seed: int = 0
    split: str = "train"
    meta: dict = field(default_factory=dict)
    failures: int = 0

    def __len__(self):
        return len(self.entries)

    def select(self, fidelity: str) -> "Dataset":
        return Dataset([e for e in self.entries if e.fidelity == fidelity], self.master_seed, self.split,
                       dict(self.meta))

    def subset(self, idx) -> "Dataset":
        return Dataset([self.entries[i] for i in idx], self.master_seed, self.split, dict(self.meta))

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.entries + other.entries, self.master_seed, self.split, dict(self.meta))

    def inputs(self) -> np.ndarray:
        return np.stack([e.input for e in self.entries])[:, None].astype(np.float64)

    def targets(self) -> np.ndarray:
        return np.stack([e.target for e in self.entries]).astype(np.float64)

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    @property
    def total_cost(self) -> float:
        return float(sum(e.cost for e in self.entries))


def _solve_realization(args):
    problem, kle, seed, index, fidelity = args
    k = realization_permeability(kle, seed, index)
    if fidelity == "HFS":
        series = simulate(k, problem.fine, fidelity, index)
    else:
        series = simulate(upscale_perm(k, problem.factor), problem.coarse, fidelity, index)
    return DatasetEntry(k.k.copy(), series.snapshots.copy(), fidelity, index, series.cost)


def _try_solve(args):
    try:
        return _solve_realization(args)
    except SimulationFailure as exc:
        log.warning("realization %d (%s) failed: %s", args[3], args[4], exc)
        return None


def generate_entries(problem: Problem, kle: KLEBasis, seed: int, indices, fidelity: str,
                     workers: int = 1, max_failures: int = 100):
    """Solve the given realizations; failures are replaced by the next unused index."""
    indices = list(indices)
    used = set(indices)
    next_index = (max(indices) + 1) if indices else 0
    entries, failures = [], 0
    pending = indices
    while pending:
        results = parallel_map(_try_solve, [(problem, kle, seed, i, fidelity) for i in pending], workers)
        entries += [r for r in results if r is not None]
        n_failed = sum(r is None for r in results)
        failures += n_failed
        if failures > max_failures:
            raise SimulationFailure(f"{failures} failed realizations, over the re-seed budget")
        pending = []
        for _ in range(n_failed):
            while next_index in used:
                next_index += 1
            used.add(next_index)
            pending.append(next_index)
    entries.sort(key=lambda e: e.index)
    return entries, failures


def generate_dataset(plan: BudgetPlan, problem: Problem, seed: int, kle: KLEBasis | None = None,
                     start: int = 0, workers: int = 1, split: str = "train") -> Dataset:
    """HFS realizations ``start ..`` followed by LFS realizations, disjoint indices."""
    kle = kle or problem.kle()
    hfs, f1 = generate_entries(problem, kle, seed, range(start, start + plan.n_hfs), "HFS", workers)
    lfs_start = max([start + plan.n_hfs] + [e.index + 1 for e in hfs])
    lfs, f2 = generate_entries(problem, kle, seed, range(lfs_start, lfs_start + plan.n_lfs), "LFS", workers)
    meta = {"config_hash": problem.config_hash(), "plan": asdict(plan)}
    return Dataset(hfs + lfs, seed, split, meta, f1 + f2)


def generate_test_set(n: int, problem: Problem, seed: int, kle: KLEBasis | None = None, workers: int = 1) -> Dataset:
    """HFS-only test data from the reserved realization range."""
    kle = kle or problem.kle()
    entries, failures = generate_entries(problem, kle, seed, range(TEST_INDEX_OFFSET, TEST_INDEX_OFFSET + n),
                                         "HFS", workers)
    return Dataset(entries, seed, "test", {"config_hash": problem.config_hash()}, failures)


def measure_unit_costs(problem: Problem, seed: int, n: int = 2, kle: KLEBasis | None = None) -> tuple[float, float]:
    """Mean wall-clock seconds of pilot HFS and LFS solves."""
    kle = kle or problem.kle()
    idx = range(TEST_INDEX_OFFSET - n, TEST_INDEX_OFFSET)
    hfs, _ = generate_entries(problem, kle, seed, idx, "HFS")
    lfs, _ = generate_entries(problem, kle, seed, idx, "LFS")
    return float(np.mean([e.cost for e in hfs])), float(np.mean([e.cost for e in lfs]))


# ----------------------------------------------------------------- MFDS files


def write_mfds(path, data: Dataset, fidelity: str, problem: Problem | None = None):
    """One fidelity per file: text header, then little-endian float32 arrays.

    Per entry, the input field is followed by its N_ts target frames.
    """
    part = data.select(fidelity)
    if not part.entries:
        raise InvalidArgument(f"no {fidelity} entries to write")
    first = part.entries[0]
    header = {
        "format_version": 1,
        "fidelity": fidelity,
        "split": data.split,
        "master_seed": data.master_seed,
        "input_shape": list(first.input.shape),
        "target_shape": list(first.target.shape),
        "n_ts": int(first.target.shape[0]),
        "n_entries": len(part),
        "seeds": [int(e.index) for e in part.entries],
        "costs": [float(e.cost) for e in part.entries],
        "failures": data.failures,
    }
    if problem is not None:
        header["kle"] = asdict(problem.field)
        header["config_hash"] = problem.config_hash()
        header["solver"] = _sim_dict(problem.fine)
    elif "config_hash" in data.meta:
        header["config_hash"] = data.meta["config_hash"]
    text = json.dumps(header, sort_keys=True, default=_json_default).encode()
    with open(path, "wb") as fh:
        fh.write(MFDS_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for e in part.entries:
            fh.write(np.ascontiguousarray(e.input, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(e.target, dtype="<f4").tobytes())


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, StructuredGrid):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def read_mfds_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    magic = fh.readline().rstrip(b"\n")
    if magic != MFDS_MAGIC:
        raise InvalidArgument(f"not an MFDS v1 file (magic {magic!r})")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode())


def mfds_payload(path) -> bytes:
    with open(path, "rb") as fh:
        _read_header(fh)
        return fh.read()


def read_mfds(path) -> Dataset:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload = fh.read()
    ish, tsh = tuple(header["input_shape"]), tuple(header["target_shape"])
    ni, nt = int(np.prod(ish)), int(np.prod(tsh))
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != header["n_entries"] * (ni + nt):
        raise InvalidArgument(f"{path}: payload size does not match header")
    arr = arr.reshape(header["n_entries"], ni + nt).astype(np.float64)
    entries = [
        DatasetEntry(row[:ni].reshape(ish), row[ni:].reshape(tsh), header["fidelity"], s, c)
        for row, s, c in zip(arr, header["seeds"], header["costs"])
    ]
    meta = {k: header[k] for k in ("config_hash",) if k in header}
    return Dataset(entries, header["master_seed"], header["split"], meta, header.get("failures", 0))


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class PhaseConfig:
    lr: float = 5e-5
    epochs: int = 200
    batch_size: int = 8
    weight_decay: float = 1e-5
    factor: float = 0.6
    min_lr: float = 5e-6
    patience: int = 10

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise InvalidArgument("phase settings must be positive")


# learning rates and epochs of the three phases at full scale
FULL_SCALE_PHASES = (
    PhaseConfig(lr=5e-4, epochs=170),
    PhaseConfig(lr=5e-5, epochs=150),
    PhaseConfig(lr=1e-5, epochs=100),
)


@dataclass
class EpochLog:
    phase: str
    epoch: int
    loss: float
    lr: float


@dataclass
class TrainState:
    """Resumable training position inside one phase."""

    opt: nn_.OptimizerState
    sched: nn_.SchedulerState
    epoch: int = 0
    history: list[EpochLog] = field(default_factory=list)


def new_train_state(cfg: PhaseConfig) -> TrainState:
    return TrainState(
        nn_.OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay),
        nn_.SchedulerState(cfg.factor, cfg.min_lr, cfg.patience),
    )


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch]))).permutation(n)


def train(model: nn_.SurrogateModel, inputs: np.ndarray, targets: np.ndarray, cfg: PhaseConfig,
          seed: int = 0, phase: str = "train", state: TrainState | None = None,
          stop_after: int | None = None, callback=None) -> TrainState:
    """Minimize the summed L1 misfit with Adam and decoupled weight decay.

    Each epoch visits the samples in a seeded order; the plateau scheduler
    sees the epoch's summed misfit. ``stop_after`` ends early (for
    checkpointing) and ``state`` resumes.
    """
    out_shape = model.output_shape
    if targets.shape[1:] != out_shape:
        raise InvalidArgument(f"targets {targets.shape[1:]} do not match model output {out_shape}")
    state = state or new_train_state(cfg)
    x_all = torch.as_tensor(inputs, dtype=model.dtype)
    y_all = torch.as_tensor(targets, dtype=model.dtype)
    n = len(inputs)
    model.train()
    end = cfg.epochs if stop_after is None else min(cfg.epochs, state.epoch + stop_after)
    while state.epoch < end:
        order = _epoch_order(seed, state.epoch, n)
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[b:b + cfg.batch_size])
            params = model.trainable_parameters()
            misfit, _ = nn_.loss_terms(model(x_all[idx]), y_all[idx])
            grads = torch.autograd.grad(misfit, list(params.values()))
            nn_.adam_step(state.opt, params, dict(zip(params, grads)))
            total += float(misfit.detach())
        if not math.isfinite(total):
            raise TrainingDivergence(f"{phase}: non-finite loss at epoch {state.epoch}")
        entry = EpochLog(phase, state.epoch, total, state.opt.lr)
        state.history.append(entry)
        nn_.scheduler_step(state.sched, state.opt, total)
        state.epoch += 1
        if callback is not None:
            callback(entry)
    return state


def build_m1(init: nn_.SurrogateModel, seed: int | None = None) -> nn_.SurrogateModel:
    """Swap the full-resolution head for a low-resolution 3x3 conv head."""
    head = init.head
    m1 = init.replace_head(nn_.temp_layer_spec(head.in_channels, head.out_channels), seed=seed)
    m1.unfreeze_all()
    return m1


def build_m2(m1: nn_.SurrogateModel, seed: int | None = None) -> nn_.SurrogateModel:
    """Restore a fresh full-resolution head and freeze everything else."""
    head = m1.head
    m2 = m1.replace_head(nn_.last_layer_spec(head.in_channels, head.out_channels), seed=seed)
    m2.freeze_all_but(m2.head.name)
    return m2


def train_phase1(m1, lfs: Dataset, cfg: PhaseConfig, seed: int = 0, **kw) -> TrainState:
    m1.unfreeze_all()
    return train(m1, lfs.inputs(), lfs.targets(), cfg, seed, phase="phase1", **kw)


def train_phase2(m2, hfs: Dataset, cfg: PhaseConfig, seed: int = 0, **kw) -> TrainState:
    m2.freeze_all_but(m2.head.name)
    return train(m2, hfs.inputs(), hfs.targets(), cfg, seed, phase="phase2", **kw)


def train_phase3(m2, hfs: Dataset, cfg: PhaseConfig, seed: int = 0, **kw) -> TrainState:
    """Fine-tune every layer; ``m2`` is modified in place and becomes M3."""
    m2.unfreeze_all()
    return train(m2, hfs.inputs(), hfs.targets(), cfg, seed, phase="phase3", **kw)


@dataclass
class MultiFidelityResult:
    m1: nn_.SurrogateModel
    m2: nn_.SurrogateModel
    m3: nn_.SurrogateModel
    history: list[EpochLog]
    rmse_m2: float | None = None


def train_multifidelity(init: nn_.SurrogateModel, lfs: Dataset, hfs: Dataset,
                        phases=FULL_SCALE_PHASES, seed: int = 0, test: Dataset | None = None) -> MultiFidelityResult:
    m1 = build_m1(init, seed=seed + 1)
    h1 = train_phase1(m1, lfs, phases[0], seed)
    m2 = build_m2(m1, seed=seed + 2)
    h2 = train_phase2(m2, hfs, phases[1], seed + 1)
    rmse_m2 = evaluate_rmse(m2, test) if test is not None else None
    snapshot = nn_.model_copy(m2)
    h3 = train_phase3(m2, hfs, phases[2], seed + 2)
    return MultiFidelityResult(m1, snapshot, m2, h1.history + h2.history + h3.history, rmse_m2)


def train_hfs_only(init: nn_.SurrogateModel, hfs: Dataset, cfg: PhaseConfig, seed: int = 0, **kw) -> TrainState:
    init.unfreeze_all()
    return train(init, hfs.inputs(), hfs.targets(), cfg, seed, phase="hfs-only", **kw)


def train_lfs_only_baseline(init: nn_.SurrogateModel, lfs: Dataset, cfg: PhaseConfig, seed: int = 0,
                            factor: int = 2, **kw) -> TrainState:
    """Single-stage training on LFS targets replicated to the HFS resolution."""
    init.unfreeze_all()
    targets = kron_upsample(lfs.targets(), factor)
    return train(init, lfs.inputs(), targets, cfg, seed, phase="lfs-only", **kw)


def evaluate_rmse(model: nn_.SurrogateModel, test: Dataset) -> float:
    if len(test) == 0:
        raise InvalidArgument("empty test set")
    pred = nn_.predict(model, test.inputs())
    target = test.targets()
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction {pred.shape} vs test targets {target.shape}")
    return float(np.sqrt(np.mean((target - pred) ** 2)))


def hyperparameter_sweep(settings, repeats: int, arch: nn_.ArchConfig, train_data: Dataset, test: Dataset,
                         seed: int = 0, seeds=None, dtype: str = "float64") -> list[dict]:
    """Repeated single-stage HFS training per setting; mean and std of test RMSE.

    Repeat ``r`` uses ``seeds[r]`` (default ``seed + r``) for initialization
    and batch order.
    """
    if repeats < 2:
        raise InvalidArgument("a sweep needs at least two repeats")
    seeds = list(seeds) if seeds is not None else [seed + r for r in range(repeats)]
    if len(seeds) != repeats:
        raise InvalidArgument("need one seed per repeat")
    rows = []
    for i, cfg in enumerate(settings):
        scores = []
        for s in seeds:
            model = nn_.SurrogateModel.from_config(arch, seed=s).to(getattr(torch, dtype))
            train_hfs_only(model, train_data, cfg, seed=s)
            scores.append(evaluate_rmse(model, test))
        rows.append({**asdict(cfg), "setting": i, "rmse_mean": float(np.mean(scores)),
                     "rmse_std": float(np.std(scores)), "repeats": repeats})
    return rows


def reseeded(cfg: PhaseConfig, **changes) -> PhaseConfig:
    return replace(cfg, **changes)


# ----------------------------------------------------------------- budget experiments

STRATEGIES = ("multi-fidelity", "hfs-only", "lfs-only")


@dataclass(frozen=True)
class TrainingRecipe:
    """Everything a strategy needs besides data."""

    arch: nn_.ArchConfig = nn_.ArchConfig()
    phases: tuple = FULL_SCALE_PHASES
    single: PhaseConfig = PhaseConfig(lr=5e-4, epochs=170)
    dtype: str = "float64"
    factor: int = 2

    def new_model(self, seed: int) -> nn_.SurrogateModel:
        return nn_.SurrogateModel.from_config(self.arch, seed=seed).to(getattr(torch, self.dtype))


def train_strategy(strategy: str, recipe: TrainingRecipe, hfs: Dataset, lfs: Dataset, seed: int):
    """Train one model with the named strategy; returns ``(model, history)``."""
    init = recipe.new_model(seed)
    if strategy == "multi-fidelity":
        res = train_multifidelity(init, lfs, hfs, recipe.phases, seed)
        return res.m3, res.history
    if strategy == "hfs-only":
        return init, train_hfs_only(init, hfs, recipe.single, seed).history
    if strategy == "lfs-only":
        return init, train_lfs_only_baseline(init, lfs, recipe.single, seed, recipe.factor).history
    raise InvalidArgument(f"unknown strategy {strategy!r}")


def draw_subset(pool: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    if n > len(pool):
        raise InvalidArgument(f"pool holds {len(pool)} {pool.split} entries, {n} requested")
    return pool.subset(np.sort(rng.choice(len(pool), size=n, replace=False)))


def budget_experiment(strategy: str, plan: BudgetPlan, recipe: TrainingRecipe, hfs_pool: Dataset,
                      lfs_pool: Dataset, test: Dataset, repeats: int, seed: int = 0, on_model=None) -> list[float]:
    """Test RMSE of ``repeats`` seeded trainings on data drawn from fixed pools.

    Each repeat draws the plan's HFS and LFS counts without replacement from
    pre-generated pools (so repeats differ in data and initialization, not
    in simulator cost). HFS-only and LFS-only spend the whole budget on one
    fidelity. ``on_model(r, model)`` is called with each trained model.
    """
    n_hfs, n_lfs = {
        "multi-fidelity": (plan.n_hfs, plan.n_lfs),
        "hfs-only": (math.floor(plan.budget / plan.c_hfs + 1e-9), 0),
        "lfs-only": (0, math.floor(plan.budget / plan.c_lfs + 1e-9)),
    }[strategy]
    scores = []
    for r in range(repeats):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, r])))
        hfs = draw_subset(hfs_pool, n_hfs, rng)
        lfs = draw_subset(lfs_pool, n_lfs, rng)
        model, _ = train_strategy(strategy, recipe, hfs, lfs, seed + 1000 * r)
        scores.append(evaluate_rmse(model, test))
        if on_model is not None:
            on_model(r, model)
        log.info("%s repeat %d: n_hfs=%d n_lfs=%d rmse=%.5f", strategy, r, n_hfs, n_lfs, scores[-1])
    return scores
