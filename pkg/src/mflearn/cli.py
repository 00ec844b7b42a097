"""``mflearn`` command line: generate, train, eval, uq and sweep.

Configuration is a YAML file; every block is optional and unknown keys are
rejected. The effective configuration is echoed to ``<out>/config.yaml``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Literal, Optional, Union
from xml.sax.saxutils import escape

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError

from . import mfpipeline as mp
from . import neuralnet as nn_
from .core import InvalidArgument, make_grid
from .flowsim import FluidProps, SimConfig, SimulationFailure
from .randperm import RandFieldSpec
from .uqstats import (METRICS, BreakthroughConfig, bootstrap_compare, compare, comparison_grid, empirical_cdf,
                      export_distribution_csv, kde_pdf, load_distribution_csv, mc_breakthrough_times)

log = logging.getLogger("mflearn")

METRICS_SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(Exception):
    pass


# ----------------------------------------------------------------- configuration


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KLEBlock(_Block):
    mean: float = 0.0
    variance: PositiveFloat = 2.0
    corr_length: PositiveFloat = 19.0
    order: PositiveInt = 31


class FluidBlock(_Block):
    mu1: PositiveFloat = 1.0
    mu2: PositiveFloat = 5.0
    n1: float = 2.0
    n2: float = 2.0
    s1r: float = 0.0
    s2r: float = 0.0
    porosity: float = 0.25


class SolverBlock(_Block):
    p_left: float = 10.2
    p_right: float = 10.1
    s_inlet: float = 1.0
    p0: float = 10.1
    s0: float = 0.0
    n_snapshots: PositiveInt = 16
    steps: PositiveInt = 64
    eps1: PositiveFloat = 1e-6
    eps2: PositiveFloat = 1e-3
    eps3: PositiveFloat = 1e-2
    ds_max: PositiveFloat = 0.2
    max_newton: PositiveInt = 12
    max_halvings: PositiveInt = 10


class ProblemBlock(_Block):
    nx: PositiveInt = 32
    ny: PositiveInt = 32
    lx: PositiveFloat = 150.0
    ly: PositiveFloat = 150.0
    factor: PositiveInt = 2
    horizon: Union[Literal["calibrate"], PositiveFloat] = "calibrate"
    kle: KLEBlock = KLEBlock()
    fluid: FluidBlock = FluidBlock()
    solver: SolverBlock = SolverBlock()


class PhaseBlock(_Block):
    lr: PositiveFloat
    epochs: int = Field(ge=0)


class ArchBlock(_Block):
    conv1_out: PositiveInt = 32
    enc_block: tuple[PositiveInt, PositiveInt] = (3, 16)
    enc_out: PositiveInt = 40
    down_out: PositiveInt = 48
    mid_block: tuple[PositiveInt, PositiveInt] = (3, 16)
    mid_out: PositiveInt = 48
    up_out: PositiveInt = 48
    dec_block: tuple[PositiveInt, PositiveInt] = (3, 16)
    dec_out: PositiveInt = 24
    input_transform: Literal["log", "identity"] = "log"


class TrainingBlock(_Block):
    mode: Literal["multi-fidelity", "hfs-only", "lfs-only"] = "multi-fidelity"
    phases: tuple[PhaseBlock, PhaseBlock, PhaseBlock] = (
        PhaseBlock(lr=5e-4, epochs=170), PhaseBlock(lr=5e-5, epochs=150), PhaseBlock(lr=1e-5, epochs=100))
    single: PhaseBlock = PhaseBlock(lr=5e-4, epochs=170)
    batch_size: PositiveInt = 8
    weight_decay: float = Field(1e-5, ge=0)
    plateau_factor: float = Field(0.6, gt=0, lt=1)
    min_lr: PositiveFloat = 5e-6
    patience: int = Field(10, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    arch: ArchBlock = ArchBlock()
    checkpoint_every: int = Field(0, ge=0)
    halt_after: Optional[PositiveInt] = None
    resume: bool = False


class BudgetBlock(_Block):
    budget: PositiveFloat = 600.0
    c_hfs: Union[Literal["measure"], PositiveFloat] = "measure"
    c_lfs: Union[Literal["measure"], PositiveFloat] = "measure"
    n_hfs: int = Field(20, ge=0)
    n_test: PositiveInt = 20


class DataBlock(_Block):
    hfs: Optional[str] = None
    lfs: Optional[str] = None
    test: Optional[str] = None


class EvalBlock(_Block):
    checkpoint: Optional[str] = None
    sample: int = Field(0, ge=0)


class UQBlock(_Block):
    source: Literal["fine", "coarse", "model"] = "model"
    checkpoint: Optional[str] = None
    label: Optional[str] = None
    plane: PositiveFloat = 100.0
    threshold: float = Field(0.15, gt=0, lt=1)
    n: PositiveInt = 200
    start: Optional[int] = None
    reference: Optional[str] = None
    repeats: PositiveInt = 10
    n_grid: PositiveInt = 512


class SweepBlock(_Block):
    strategies: list[Literal["multi-fidelity", "hfs-only", "lfs-only"]] = ["multi-fidelity", "hfs-only", "lfs-only"]
    budgets: Optional[list[PositiveFloat]] = None
    n_hfs: Optional[list[int]] = None
    repeats: PositiveInt = 3
    learning_rates: list[PositiveFloat] = []


class RunConfig(_Block):
    seed: int = 0
    out: str = "mflearn-out"
    workers: Optional[PositiveInt] = None
    problem: ProblemBlock = ProblemBlock()
    training: TrainingBlock = TrainingBlock()
    budget: BudgetBlock = BudgetBlock()
    data: DataBlock = DataBlock()
    eval: EvalBlock = EvalBlock()
    uq: UQBlock = UQBlock()
    sweep: SweepBlock = SweepBlock()


def load_config(path, seed=None, out=None, workers=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key, value in (("seed", seed), ("out", out), ("workers", workers)):
        if value is not None:
            raw[key] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


class Run:
    """Resolved configuration plus output-path helpers."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.workers = cfg.workers or os.cpu_count() or 1
        self._problem = None
        p = cfg.problem
        if p.nx != p.ny:
            raise ConfigError("the surrogate needs a square grid (nx == ny)")
        if p.nx % (2 * p.factor) or p.nx // p.factor < 2:
            raise ConfigError(f"nx = {p.nx} not compatible with coarsening factor {p.factor}")
        if p.factor != 2:
            raise ConfigError("the surrogate's low-resolution head assumes a coarsening factor of 2")

    def path(self, name) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def data_path(self, key) -> Path:
        given = getattr(self.cfg.data, key)
        return Path(given) if given else self.out / f"{key}.mfds"

    def echo_config(self):
        with open(self.path("config.yaml"), "w") as fh:
            yaml.safe_dump(json.loads(self.cfg.model_dump_json()), fh, sort_keys=False)

    @property
    def problem(self) -> mp.Problem:
        if self._problem is None:
            p = self.cfg.problem
            grid = make_grid(p.nx, p.ny, p.lx, p.ly)
            fluid = FluidProps(**p.fluid.model_dump())
            solver = p.solver.model_dump()
            steps = solver.pop("steps")
            bcfg = self.breakthrough
            horizon = p.horizon
            if horizon == "calibrate":
                kw = {k: solver[k] for k in ("p_left", "p_right", "s_inlet", "p0", "s0")}
                horizon = mp.calibrate_horizon(grid, fluid, bcfg, **kw)
                log.info("calibrated horizon %.6g days", horizon)
            if steps % solver["n_snapshots"]:
                raise ConfigError("solver.steps must be a multiple of solver.n_snapshots")
            sim = SimConfig(grid=grid, horizon=horizon, fluid=fluid, base_dt=horizon / steps, **solver)
            self._problem = mp.Problem(sim, RandFieldSpec(**p.kle.model_dump()), p.factor)
        return self._problem

    @property
    def breakthrough(self) -> BreakthroughConfig:
        return BreakthroughConfig(self.cfg.uq.plane, self.cfg.uq.threshold)

    @property
    def recipe(self) -> mp.TrainingRecipe:
        t = self.cfg.training
        p = self.cfg.problem
        arch = nn_.ArchConfig(grid=p.nx, n_ts=p.solver.n_snapshots, **t.arch.model_dump())
        return mp.TrainingRecipe(arch, tuple(self.phase(b) for b in t.phases), self.phase(t.single), t.dtype,
                                 p.factor)

    def phase(self, block: PhaseBlock) -> mp.PhaseConfig:
        t = self.cfg.training
        return mp.PhaseConfig(lr=block.lr, epochs=block.epochs, batch_size=t.batch_size,
                              weight_decay=t.weight_decay, factor=t.plateau_factor, min_lr=t.min_lr,
                              patience=t.patience)

    def unit_costs(self) -> tuple[float, float]:
        b = self.cfg.budget
        c_hfs, c_lfs = b.c_hfs, b.c_lfs
        if "measure" in (c_hfs, c_lfs):
            m_hfs, m_lfs = mp.measure_unit_costs(self.problem, self.cfg.seed)
            log.info("measured unit costs: HFS %.3f s, LFS %.3f s", m_hfs, m_lfs)
            c_hfs = m_hfs if c_hfs == "measure" else c_hfs
            c_lfs = m_lfs if c_lfs == "measure" else c_lfs
        return float(c_hfs), float(c_lfs)

    def read_dataset(self, key) -> mp.Dataset:
        path = self.data_path(key)
        if not path.exists():
            raise ConfigError(f"dataset {path} not found (run `mflearn generate` or set data.{key})")
        return mp.read_mfds(path)


# ----------------------------------------------------------------- output helpers


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_pgm(path, image: np.ndarray, vmax: float = 1.0):
    """8-bit binary PGM; values are scaled by ``vmax`` and clipped to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=float) / vmax, 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lineplot(curves, title="", xlabel="", ylabel="", width=640, height=420) -> str:
    """Self-contained SVG with one polyline per ``(label, x, y)`` curve."""
    ml, mr, mt, mb = 70, 150, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(c[1], float) for c in curves])
    ys = np.concatenate([np.asarray(c[2], float) for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(0.0, float(ys.min())), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
           f'<text x="{ml + pw / 2}" y="{mt - 14}" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" '
           f'transform="rotate(-90 16 {mt + ph / 2})">{escape(ylabel)}</text>']
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, (label, x, y) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if np.isfinite(a) and np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 16 + 18 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 36}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out)


# ----------------------------------------------------------------- commands


def cmd_generate(run: Run) -> int:
    cfg = run.cfg
    problem = run.problem
    kle = problem.kle()
    c_hfs, c_lfs = run.unit_costs()
    plan = mp.plan_budget(cfg.budget.budget, c_hfs, c_lfs, cfg.budget.n_hfs)
    log.info("plan: %d HFS + %d LFS (planned %.1f of %.1f s)", plan.n_hfs, plan.n_lfs, plan.planned_cost, plan.budget)
    data = mp.generate_dataset(plan, problem, cfg.seed, kle, workers=run.workers)
    test = mp.generate_test_set(cfg.budget.n_test, problem, cfg.seed, kle, workers=run.workers)
    written = []
    for key, ds, fid in (("hfs", data, "HFS"), ("lfs", data, "LFS"), ("test", test, "HFS")):
        if ds.select(fid).entries:
            mp.write_mfds(run.data_path(key), ds, fid, problem)
            written.append(str(run.data_path(key)))
    hfs, lfs = data.select("HFS"), data.select("LFS")
    summary = {
        "schema_version": METRICS_SCHEMA,
        "plan": asdict(plan),
        "horizon": problem.fine.horizon,
        "n_hfs": len(hfs), "n_lfs": len(lfs), "n_test": len(test),
        "cost_hfs": hfs.total_cost, "cost_lfs": lfs.total_cost, "cost_test": test.total_cost,
        "failures": data.failures + test.failures,
        "files": written,
    }
    with open(run.path("generate_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"{'fidelity':<8} {'entries':>8} {'planned':>8} {'cost_s':>10}")
    print(f"{'HFS':<8} {len(hfs):>8} {plan.n_hfs:>8} {hfs.total_cost:>10.1f}")
    print(f"{'LFS':<8} {len(lfs):>8} {plan.n_lfs:>8} {lfs.total_cost:>10.1f}")
    print(f"{'test':<8} {len(test):>8} {cfg.budget.n_test:>8} {test.total_cost:>10.1f}")
    print(f"budget {plan.budget:.1f} s, training data cost {data.total_cost:.1f} s, failures {summary['failures']}")
    return EXIT_OK


def _stages(run: Run, mode: str):
    """(stage name, dataset key, phase config, data seed) for each training stage."""
    recipe = run.recipe
    seed = run.cfg.seed
    if mode == "multi-fidelity":
        return [("phase1", "lfs", recipe.phases[0], seed), ("phase2", "hfs", recipe.phases[1], seed + 1),
                ("phase3", "hfs", recipe.phases[2], seed + 2)]
    key = "hfs" if mode == "hfs-only" else "lfs"
    return [(mode, key, recipe.single, seed)]


def _enter_stage(model, mode, stage, seed):
    if mode != "multi-fidelity":
        if stage == 0:
            model.unfreeze_all()
        return model
    if stage == 0:
        return mp.build_m1(model, seed=seed + 1)
    if stage == 1:
        return mp.build_m2(model, seed=seed + 2)
    model.unfreeze_all()
    return model


def _save_progress(run, model, state, stage, mode, history):
    extra = {"stage": stage, "epoch": state.epoch, "mode": mode, "seed": run.cfg.seed,
             "sched": asdict(state.sched), "history": [asdict(h) for h in history],
             "stage_history": [asdict(h) for h in state.history]}
    nn_.save_checkpoint(run.path("progress.ckpt"), model, state.opt, extra)


def cmd_train(run: Run) -> int:
    t = run.cfg.training
    recipe = run.recipe
    mode = t.mode
    stages = _stages(run, mode)
    datasets = {}
    for _, key, _, _ in stages:
        if key not in datasets:
            datasets[key] = run.read_dataset(key)
    seed = run.cfg.seed

    start_stage, state, history = 0, None, []
    progress = run.out / "progress.ckpt"
    if t.resume and progress.exists():
        model, opt, extra = nn_.load_checkpoint(progress)
        if extra.get("mode") != mode or extra.get("seed") != seed:
            raise ConfigError("progress checkpoint belongs to a different mode or seed")
        start_stage = extra["stage"]
        history = [mp.EpochLog(**h) for h in extra["history"]]
        state = mp.TrainState(opt, nn_.SchedulerState(**extra["sched"]), extra["epoch"],
                              [mp.EpochLog(**h) for h in extra["stage_history"]])
        log.info("resuming %s at stage %d epoch %d", mode, start_stage, state.epoch)
    else:
        model = recipe.new_model(seed)

    budget = t.halt_after
    with open(run.path("loss.csv"), "a" if state is not None else "w", newline="") as fh:
        writer = csv.writer(fh)
        if state is None:
            writer.writerow(["phase", "epoch", "loss", "lr"])

        def record(entry):
            writer.writerow([entry.phase, entry.epoch, f"{entry.loss:.10g}", f"{entry.lr:.10g}"])
            fh.flush()

        for i in range(start_stage, len(stages)):
            name, key, pcfg, dseed = stages[i]
            data = datasets[key]
            targets = data.targets()
            if mode == "lfs-only":
                targets = mp.kron_upsample(targets, recipe.factor)
            if state is None:
                model = _enter_stage(model, mode, i, seed)
                state = mp.new_train_state(pcfg)
            if targets.shape[1:] != model.output_shape:
                raise ConfigError(f"{key} targets {targets.shape[1:]} do not match model output {model.output_shape}")
            while state.epoch < pcfg.epochs:
                if budget == 0:
                    _save_progress(run, model, state, i, mode, history)
                    log.info("halted after %d epochs; rerun with training.resume to continue", t.halt_after)
                    return EXIT_OK
                chunk = pcfg.epochs - state.epoch
                if t.checkpoint_every:
                    chunk = min(chunk, t.checkpoint_every)
                if budget is not None:
                    chunk = min(chunk, budget)
                    budget -= chunk
                mp.train(model, data.inputs(), targets, pcfg, dseed, phase=name, state=state, stop_after=chunk,
                         callback=record)
                if t.checkpoint_every:
                    _save_progress(run, model, state, i, mode, history)
            history += state.history
            state = None
    nn_.save_checkpoint(run.path("model.ckpt"), model, None,
                        {"mode": mode, "seed": seed, "epochs": len(history)})
    if progress.exists():
        progress.unlink()
    print(f"trained {mode}: {len(history)} epochs, final loss {history[-1].loss:.6g}" if history
          else f"trained {mode}: 0 epochs")
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    ckpt = Path(run.cfg.eval.checkpoint) if run.cfg.eval.checkpoint else run.out / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found")
    model, _, extra = nn_.load_checkpoint(ckpt)
    test = run.read_dataset("test")
    if test.targets().shape[1:] != model.output_shape:
        raise ConfigError(f"test targets {test.targets().shape[1:]} do not match model output {model.output_shape}")
    rmse = mp.evaluate_rmse(model, test)
    pred = nn_.predict(model, test.inputs())
    target = test.targets()
    per_ts = np.sqrt(np.mean((target - pred) ** 2, axis=(0, 2, 3)))
    k = run.cfg.eval.sample
    if k >= len(test):
        raise ConfigError(f"eval.sample {k} outside the {len(test)}-entry test set")
    diff = np.abs(target[k] - pred[k])
    ddir = run.path("diff")
    ddir.mkdir(exist_ok=True)
    for i, d in enumerate(diff):
        write_pgm(ddir / f"diff_t{i:02d}.pgm", d)
        np.savetxt(ddir / f"diff_t{i:02d}.csv", d, delimiter=",", fmt="%.8g")
    metrics = {
        "schema_version": METRICS_SCHEMA,
        "checkpoint": str(ckpt),
        "test_data": str(run.data_path("test")),
        "mode": extra.get("mode"),
        "n_test": len(test),
        "n_ts": int(target.shape[1]),
        "rmse": rmse,
        "rmse_per_snapshot": [float(v) for v in per_ts],
        "diff_sample": k,
        "diff_sample_index": int(test.entries[k].index),
        "diff_max": float(diff.max()),
    }
    with open(run.path("metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(f"test RMSE {rmse:.6g} over {len(test)} realizations")
    return EXIT_OK


def cmd_uq(run: Run) -> int:
    u = run.cfg.uq
    if u.reference is not None and not Path(u.reference).exists():
        raise ConfigError(f"reference distribution {u.reference} not found")
    if u.source == "model":
        ckpt = Path(u.checkpoint) if u.checkpoint else run.out / "model.ckpt"
        if not ckpt.exists():
            raise ConfigError(f"checkpoint {ckpt} not found")
        source, _, _ = nn_.load_checkpoint(ckpt)
    else:
        source = u.source
    label = u.label or u.source
    problem = run.problem
    run.breakthrough.validate(problem.fine.grid.lx)
    start = mp.TEST_INDEX_OFFSET if u.start is None else u.start
    times = mc_breakthrough_times(source, u.n, problem.kle(), problem.fine, run.cfg.seed, start=start,
                                  bcfg=run.breakthrough, factor=problem.factor, workers=run.workers)
    write_csv(run.path(f"uq_{label}_times.csv"), ["index", "t_break"],
              [[start + i, f"{v:.10g}"] for i, v in enumerate(times)])
    dist = empirical_cdf(times)
    curves = [(label, dist)]
    result = {"schema_version": METRICS_SCHEMA, "source": label, "n": u.n, "n_censored": dist.n_censored,
              "seed": run.cfg.seed, "start": start}
    if u.reference is not None:
        ref_times = _load_reference(u.reference)
        ref = empirical_cdf(ref_times)
        curves.append(("reference", ref))
        result["single"] = compare(dist, ref, u.n_grid)
        if len(ref_times) == len(times):
            result["repeated"] = {m: {"mean": a, "std": b}
                                  for m, (a, b) in bootstrap_compare(times, ref_times, u.repeats, run.cfg.seed,
                                                                     u.n_grid).items()}
            result["repeats"] = u.repeats
        rows = [[m, f"{result['single'][m]:.10g}"] + (
            [f"{result['repeated'][m]['mean']:.10g}", f"{result['repeated'][m]['std']:.10g}"]
            if "repeated" in result else ["", ""]) for m in METRICS]
        write_csv(run.path(f"uq_{label}_metrics.csv"), ["metric", "value", "mean", "std"], rows)
    grid = comparison_grid(*[d for _, d in curves], n=u.n_grid)
    export_distribution_csv(run.path(f"uq_{label}"), dist, grid)
    with open(run.path(f"uq_{label}_metrics.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    for kind, fn in (("cdf", lambda d: d.cdf(grid)), ("pdf", lambda d: kde_pdf(d, grid))):
        svg = svg_lineplot([(name, grid, fn(d)) for name, d in curves], f"breakthrough time {kind.upper()}",
                           "time (days)", kind.upper())
        with open(run.path(f"uq_{label}_{kind}.svg"), "w") as fh:
            fh.write(svg)
    print(f"{label}: {dist.n} breakthrough times, {dist.n_censored} censored")
    if "single" in result:
        for m in METRICS:
            line = f"  {m:<12} {result['single'][m]:.6g}"
            if "repeated" in result:
                line += f"   {result['repeated'][m]['mean']:.6g} +- {result['repeated'][m]['std']:.6g}"
            print(line)
    return EXIT_OK


def _load_reference(path) -> np.ndarray:
    """Breakthrough times from a ``uq_*_times.csv`` (paired) or ``*_samples.csv`` file."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header == ["index", "t_break"]:
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]
    return load_distribution_csv(path).samples


def cmd_sweep(run: Run) -> int:
    cfg = run.cfg
    s = cfg.sweep
    problem = run.problem
    kle = problem.kle()
    recipe = run.recipe
    c_hfs, c_lfs = run.unit_costs()
    budgets = s.budgets or [cfg.budget.budget]
    n_hfs_values = s.n_hfs or [cfg.budget.n_hfs]
    plans = []
    for b in budgets:
        for strategy in s.strategies:
            for n in (n_hfs_values if strategy == "multi-fidelity" else [0]):
                if n * c_hfs > b:
                    log.warning("skipping n_hfs=%d: over budget %.1f", n, b)
                    continue
                plans.append((strategy, mp.plan_budget(b, c_hfs, c_lfs, n)))
    def counts(strategy, plan):
        if strategy == "hfs-only":
            return math.floor(plan.budget / c_hfs + 1e-9), 0
        if strategy == "lfs-only":
            return 0, math.floor(plan.budget / c_lfs + 1e-9)
        return plan.n_hfs, plan.n_lfs

    need_h = max([counts(*p)[0] for p in plans] + [0])
    need_l = max([counts(*p)[1] for p in plans] + [0])
    pools = {}
    for key, fid, n, start in (("pool_hfs", "HFS", need_h, 0), ("pool_lfs", "LFS", need_l, mp.TEST_INDEX_OFFSET // 2)):
        path = run.path(f"{key}.mfds")
        pool = mp.read_mfds(path) if path.exists() else mp.Dataset(master_seed=cfg.seed)
        if pool.master_seed != cfg.seed or len(pool) < n:
            entries, _ = mp.generate_entries(problem, kle, cfg.seed, range(start, start + n), fid, run.workers)
            pool = mp.Dataset(entries, cfg.seed, key)
            if entries:
                mp.write_mfds(path, pool, fid, problem)
        pools[key] = pool
    test_path = run.data_path("test")
    test = mp.read_mfds(test_path) if test_path.exists() else mp.generate_test_set(
        cfg.budget.n_test, problem, cfg.seed, kle, run.workers)
    rows = []
    for strategy, plan in plans:
        scores = mp.budget_experiment(strategy, plan, recipe, pools["pool_hfs"], pools["pool_lfs"], test,
                                      s.repeats, cfg.seed)
        n_h, n_l = counts(strategy, plan)
        rows.append([strategy, f"{plan.budget:.6g}", n_h, n_l, f"{np.mean(scores):.8g}", f"{np.std(scores):.8g}",
                     s.repeats])
        print(f"{strategy:<15} B={plan.budget:<8.6g} n_hfs={n_h:<5} n_lfs={n_l:<6} "
              f"rmse={np.mean(scores):.5f} +- {np.std(scores):.5f}")
    write_csv(run.path("sweep.csv"), ["strategy", "budget", "n_hfs", "n_lfs", "rmse_mean", "rmse_std", "repeats"], rows)
    if s.learning_rates:
        hfs = pools["pool_hfs"].subset(range(min(len(pools["pool_hfs"]), max(cfg.budget.n_hfs, 1))))
        settings = [mp.reseeded(recipe.single, lr=lr) for lr in s.learning_rates]
        table = mp.hyperparameter_sweep(settings, max(s.repeats, 2), recipe.arch, hfs, test, cfg.seed,
                                        dtype=recipe.dtype)
        write_csv(run.path("hyper.csv"), ["lr", "epochs", "rmse_mean", "rmse_std", "repeats"],
                  [[f"{r['lr']:.6g}", r["epochs"], f"{r['rmse_mean']:.8g}", f"{r['rmse_std']:.8g}", r["repeats"]]
                   for r in table])
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "uq": cmd_uq, "sweep": cmd_sweep}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mflearn", description="Multi-fidelity surrogate training for two-phase flow.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--workers", type=int, help="worker processes for simulations")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        run = Run(load_config(args.config, args.seed, args.out, args.workers))
        run.echo_config()
        return COMMANDS[args.command](run)
    except (ConfigError, InvalidArgument) as exc:
        print(f"mflearn: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationFailure, mp.TrainingDivergence) as exc:
        print(f"mflearn: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"mflearn: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
