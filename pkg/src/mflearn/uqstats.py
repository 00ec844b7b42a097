"""Breakthrough-time statistics and distances between empirical distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgument, parallel_map

DENSITY_FLOOR = 1e-12


@dataclass(frozen=True)
class BreakthroughConfig:
    plane: float = 100.0
    threshold: float = 0.15
    censor_value: float = math.inf

    def validate(self, lx: float):
        if not 0 < self.plane < lx:
            raise InvalidArgument(f"plane {self.plane} outside (0, {lx})")
        if not 0 < self.threshold < 1:
            raise InvalidArgument("threshold must lie in (0, 1)")


def plane_column(grid, plane: float) -> int:
    return min(int(plane // grid.dx), grid.nx - 1)


def breakthrough_from_snapshots(times, snapshots, column: int, threshold: float, censor_value=math.inf) -> float:
    """First time the column maximum of S1 exceeds ``threshold``.

    Linear interpolation between the bracketing snapshots; ``times[0]`` when
    the first snapshot already exceeds it; ``censor_value`` if it never does.
    """
    m = np.max(np.asarray(snapshots)[:, :, column], axis=1)
    above = np.nonzero(m > threshold)[0]
    if len(above) == 0:
        return censor_value
    k = int(above[0])
    if k == 0:
        return float(times[0])
    t0, t1 = times[k - 1], times[k]
    m0, m1 = m[k - 1], m[k]
    return float(t0 + (threshold - m0) * (t1 - t0) / (m1 - m0))


def breakthrough_time(series, cfg: BreakthroughConfig = BreakthroughConfig()) -> float:
    cfg.validate(series.grid.lx)
    col = plane_column(series.grid, cfg.plane)
    return breakthrough_from_snapshots(series.times, series.snapshots, col, cfg.threshold, cfg.censor_value)


@dataclass
class EmpiricalDistribution:
    samples: np.ndarray  # sorted, uncensored
    n_censored: int = 0

    def __post_init__(self):
        self.samples = np.sort(np.asarray(self.samples, dtype=float))

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / max(1, self.n + self.n_censored)

    def cdf(self, x):
        return np.searchsorted(self.samples, np.asarray(x, dtype=float), side="right") / self.n

    @property
    def bandwidth(self) -> float:
        return silverman_bandwidth(self.samples)

    def pdf(self, grid):
        return kde_pdf(self, grid)


def empirical_cdf(samples) -> EmpiricalDistribution:
    samples = np.asarray(samples, dtype=float)
    ok = np.isfinite(samples)
    if not np.any(ok):
        raise InvalidArgument("all samples are censored")
    return EmpiricalDistribution(samples[ok], int(np.sum(~ok)))


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        raise InvalidArgument("bandwidth needs at least two samples")
    sigma = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sigma, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sigma
    h = 0.9 * spread * len(x) ** (-0.2)
    if not h > 0:
        raise InvalidArgument("degenerate sample: zero bandwidth")
    return float(h)


def kde_pdf(dist: EmpiricalDistribution, grid) -> np.ndarray:
    """Gaussian kernel density with Silverman's bandwidth."""
    h = silverman_bandwidth(dist.samples)
    z = (np.asarray(grid, dtype=float)[:, None] - dist.samples[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (dist.n * h * math.sqrt(2.0 * math.pi))


def comparison_grid(*dists: EmpiricalDistribution, n: int = 512) -> np.ndarray:
    """Uniform grid over the pooled sample range padded by three bandwidths."""
    pooled = np.concatenate([d.samples for d in dists])
    pad = 3.0 * max(silverman_bandwidth(d.samples) for d in dists)
    return np.linspace(pooled.min() - pad, pooled.max() + pad, n)


def wasserstein1(a: EmpiricalDistribution, b: EmpiricalDistribution) -> float:
    """Exact area between the two step CDFs."""
    if a.n == 0 or b.n == 0:
        raise InvalidArgument("both distributions need samples")
    if a.n == b.n:
        return float(np.mean(np.abs(a.samples - b.samples)))
    pts = np.union1d(a.samples, b.samples)
    widths = np.diff(pts)
    gap = np.abs(a.cdf(pts[:-1]) - b.cdf(pts[:-1]))
    return float(np.sum(gap * widths))


def _check_grid(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InvalidArgument(f"densities on different grids: {p.shape} vs {q.shape}")
    return p, q


def kl_divergence(p, q, grid) -> float:
    """KL(p || q) for densities sampled on a common uniform grid."""
    p, q = _check_grid(p, q)
    grid = np.asarray(grid, dtype=float)
    if grid.shape != p.shape:
        raise InvalidArgument("grid and densities differ in length")
    dt = grid[1] - grid[0]
    p = np.maximum(p, DENSITY_FLOOR)
    q = np.maximum(q, DENSITY_FLOOR)
    p = p / (p.sum() * dt)
    q = q / (q.sum() * dt)
    return float(np.sum(p * np.log(p / q)) * dt)


def pdf_rmse_mae(p, q) -> tuple[float, float]:
    p, q = _check_grid(p, q)
    d = p - q
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))


def compare(dist: EmpiricalDistribution, reference: EmpiricalDistribution, n_grid: int = 512) -> dict:
    """All four discrepancy metrics of ``dist`` against ``reference``."""
    grid = comparison_grid(dist, reference, n=n_grid)
    p = kde_pdf(reference, grid)
    q = kde_pdf(dist, grid)
    rmse, mae = pdf_rmse_mae(q, p)
    return {
        "rmse": rmse,
        "mae": mae,
        "kl": kl_divergence(p, q, grid),
        "wasserstein": wasserstein1(dist, reference),
    }


METRICS = ("rmse", "mae", "kl", "wasserstein")


def bootstrap_compare(samples, reference, repeats: int, seed: int = 0, n_grid: int = 512) -> dict:
    """Mean and std of each metric over paired bootstrap resamples.

    ``samples[i]`` and ``reference[i]`` belong to the same realization; each
    repeat resamples realization indices with replacement and keeps pairs
    together. Censored entries are dropped after resampling.
    """
    a = np.asarray(samples, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgument("paired samples must have equal length")
    if repeats < 1:
        raise InvalidArgument("repeats must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, len(a)])))
    rows = []
    for _ in range(repeats):
        idx = rng.integers(0, len(a), len(a))
        rows.append(compare(empirical_cdf(a[idx]), empirical_cdf(b[idx]), n_grid))
    return {m: (float(np.mean([r[m] for r in rows])), float(np.std([r[m] for r in rows]))) for m in METRICS}


# ----------------------------------------------------------------- Monte Carlo


def _simulate_breakthrough(args):
    from .flowsim import simulate
    from .randperm import realization_permeability
    from .upscale import upscale_perm

    kle, config, seed, index, fidelity, factor, bcfg = args
    k = realization_permeability(kle, seed, index)
    if fidelity == "coarse":
        k = upscale_perm(k, factor)
        config = config.with_grid(k.grid)
    return breakthrough_time(simulate(k, config), bcfg)


def mc_breakthrough_times(source, n: int, kle, config, seed: int, start: int = 0,
                          bcfg: BreakthroughConfig = BreakthroughConfig(), factor: int = 2,
                          workers: int = 1, batch_size: int = 64) -> np.ndarray:
    """Breakthrough time of realizations ``start .. start + n - 1``, in order.

    ``source`` is ``"fine"``, ``"coarse"`` or a trained surrogate model. The
    same ``(seed, index)`` gives the same permeability for every source, so
    results can be compared realization by realization. Censored values are
    ``bcfg.censor_value``.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    indices = range(start, start + n)
    if isinstance(source, str):
        if source not in ("fine", "coarse"):
            raise InvalidArgument(f"unknown simulator source {source!r}")
        jobs = [(kle, config, seed, i, source, factor, bcfg) for i in indices]
        return np.array(parallel_map(_simulate_breakthrough, jobs, workers))

    from .neuralnet import predict
    from .randperm import realization_permeability

    col = plane_column(kle.grid, bcfg.plane)
    times = config.horizon * np.arange(1, config.n_snapshots + 1) / config.n_snapshots
    out = []
    idx = list(indices)
    for b in range(0, n, batch_size):
        chunk = idx[b:b + batch_size]
        k = np.stack([realization_permeability(kle, seed, i).k for i in chunk])[:, None]
        pred = predict(source, k)
        out += [breakthrough_from_snapshots(times, s, col, bcfg.threshold, bcfg.censor_value) for s in pred]
    return np.array(out)


def mc_distribution(source, n: int, kle, config, seed: int, **kwargs) -> EmpiricalDistribution:
    return empirical_cdf(mc_breakthrough_times(source, n, kle, config, seed, **kwargs))


def export_distribution_csv(path_prefix, dist: EmpiricalDistribution, grid=None):
    """Write ``<prefix>_samples.csv`` and ``<prefix>_curves.csv``."""
    import csv

    with open(f"{path_prefix}_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_break"])
        w.writerows([[f"{v:.10g}"] for v in dist.samples])
    if grid is None:
        grid = comparison_grid(dist)
    with open(f"{path_prefix}_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "cdf", "pdf"])
        for t, c, p in zip(grid, dist.cdf(grid), kde_pdf(dist, grid)):
            w.writerow([f"{t:.10g}", f"{c:.10g}", f"{p:.10g}"])


def load_distribution_csv(path) -> EmpiricalDistribution:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=1)
    return empirical_cdf(data)
