"""Master-equation oracle and trajectory-ensemble statistics.

``master_evolve`` integrates the block master equation directly;
``run_ensemble`` averages projectors of simulated sample paths on the
same time grid, so the two can be compared point by point.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats as sps

from .engine import PureHybridState, TrajectoryConfig, sample_on_grid, simulate_trajectory
from .errors import DimensionError, PreconditionError, StiffnessError
from .linalg import trace_norm_hermitian
from .model import BlockDensityMatrix, HybridModel, lindblad_apply

WORKERS_ENV = "HYBRID_PDP_WORKERS"
CHUNK_SIZE = 256


@dataclass(frozen=True)
class TimeGrid:
    """Uniform output grid ``t0 + k dt`` for ``k = 0..steps``."""

    t0: float
    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise PreconditionError("grid step must be positive")
        if self.steps < 0 or self.t0 < 0:
            raise PreconditionError("grid needs t0 >= 0 and steps >= 0")

    @classmethod
    def span(cls, t_end: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        steps = int(round((t_end - t0) / dt))
        return cls(t0, dt, steps)

    @property
    def n_points(self) -> int:
        return self.steps + 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_points)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])


# -- master equation ---------------------------------------------------------------

def chain_truncation(model: HybridModel, t_end: float, start: int = 0, tail: float = 1e-8) -> int:
    """Highest sector to keep so that ``P[N_t > n_max - start] < tail``.

    The jump count is dominated by a Poisson variable of mean ``C t``.
    """
    mean = model.rate_bound * t_end
    k = 0
    while sps.poisson.sf(k, mean) >= tail:
        k += 1
    return start + k + 1


class _Layout:
    """Packing of block matrices into one real vector."""

    def __init__(self, model: HybridModel, sectors):
        self.sectors = tuple(sectors)
        self.dims = [model.dim(a) for a in self.sectors]
        self.offsets = np.cumsum([0] + [n * n for n in self.dims])
        self.size = int(self.offsets[-1])

    def pack(self, blocks) -> np.ndarray:
        z = np.zeros(self.size, dtype=np.complex128)
        for a, n, o in zip(self.sectors, self.dims, self.offsets):
            b = blocks.get(a)
            if b is not None:
                z[o:o + n * n] = np.asarray(b).ravel()
        return np.concatenate([z.real, z.imag])

    def unpack(self, y: np.ndarray) -> dict[int, np.ndarray]:
        z = y[: self.size] + 1j * y[self.size:]
        return {
            a: z[o:o + n * n].reshape(n, n)
            for a, n, o in zip(self.sectors, self.dims, self.offsets)
        }


def liouvillian_matrix(model: HybridModel, layout: _Layout) -> np.ndarray:
    """Real matrix of the master-equation generator in the packed basis."""
    d = 2 * layout.size
    L = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        out = lindblad_apply(model, layout.unpack(e))
        L[:, k] = layout.pack({a: b for a, b in out.items() if a in layout.sectors})
    return L


def master_evolve(
    model: HybridModel,
    rho0: BlockDensityMatrix,
    grid: TimeGrid,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    n_max: int | None = None,
) -> list[BlockDensityMatrix]:
    """Integrate the master equation from ``rho0`` (given at ``t = 0``).

    Adaptive embedded Runge-Kutta (Dormand-Prince 8(5,3)).  Chain models
    are truncated at ``n_max`` (default from :func:`chain_truncation`).
    """
    if model.is_chain:
        if n_max is None:
            n_max = chain_truncation(model, grid.t_end, start=max(rho0.blocks, default=0))
        model = model.truncated(n_max)
        blocks = {a: b for a, b in rho0.blocks.items() if a <= n_max}
    else:
        blocks = dict(rho0.blocks)
    layout = _Layout(model, model.sectors)
    for a, b in blocks.items():
        model.check_sector(a)
        if np.shape(b) != (model.dim(a),) * 2:
            raise DimensionError(f"initial block {a} has shape {np.shape(b)}")
    L = liouvillian_matrix(model, layout)
    y0 = layout.pack(blocks)
    times = grid.times
    if times[-1] == 0.0:
        ys = np.repeat(y0[:, None], len(times), axis=1)
    else:
        sol = integrate.solve_ivp(
            lambda t, y: L @ y, (0.0, times[-1]), y0, method="DOP853",
            t_eval=times, rtol=rtol, atol=atol,
        )
        if sol.status != 0:
            raise StiffnessError(f"master equation integration failed: {sol.message}")
        ys = sol.y
        ys[:, times == 0.0] = y0[:, None]
    out = []
    for k in range(len(times)):
        bl = layout.unpack(ys[:, k])
        out.append(BlockDensityMatrix({a: 0.5 * (b + b.conj().T) for a, b in bl.items()}))
    return out


def classical_marginals(rhos, sectors) -> np.ndarray:
    """Occupations ``Tr rho_a`` as an array of shape ``(len(rhos), len(sectors))``."""
    return np.array([[r.occupation(a) for a in sectors] for r in rhos])


# -- ensembles ----------------------------------------------------------------------

@dataclass
class EnsembleStats:
    """Grid-wise averages over ``N`` sample paths.

    ``empirical_blocks[a][j]`` is the average of ``1{sector=a} |psi><psi|``
    at grid point ``j``.  ``rhs_mean``/``rhs_var`` are the mean and sample
    variance of the per-path drift of each sector occupation, and
    ``residual_var`` the sample variance of the per-path difference
    between the finite-differenced sector indicator and that drift (both
    used by :func:`prop41_residual`).
    """

    grid: TimeGrid
    N: int
    empirical_blocks: dict[int, np.ndarray]
    occupation: dict[int, np.ndarray]
    jump_count_mean: np.ndarray
    jump_count_var: np.ndarray
    count_histogram: np.ndarray
    compensator_mean: np.ndarray
    martingale_mean: np.ndarray
    martingale_var: np.ndarray
    rhs_mean: dict[int, np.ndarray] = field(default_factory=dict)
    rhs_var: dict[int, np.ndarray] = field(default_factory=dict)
    residual_var: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def sectors(self) -> tuple[int, ...]:
        return tuple(sorted(self.occupation))

    def block_density(self, j: int) -> BlockDensityMatrix:
        return BlockDensityMatrix({a: b[j] for a, b in self.empirical_blocks.items()})

    def occupation_array(self, sectors=None) -> np.ndarray:
        sectors = self.sectors if sectors is None else sectors
        G = self.grid.n_points
        return np.stack([self.occupation.get(a, np.zeros(G)) for a in sectors], axis=1)


@dataclass
class _Partial:
    blocks: dict = field(default_factory=dict)
    occ: dict = field(default_factory=dict)
    count_sum: np.ndarray = None
    count_sq: np.ndarray = None
    hist: dict = field(default_factory=dict)
    comp_sum: np.ndarray = None
    mart_sum: np.ndarray = None
    mart_sq: np.ndarray = None
    rhs_sum: dict = field(default_factory=dict)
    rhs_sq: dict = field(default_factory=dict)
    resid_sum: dict = field(default_factory=dict)
    resid_sq: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, G: int) -> "_Partial":
        z = lambda: np.zeros(G)
        return cls(count_sum=z(), count_sq=z(), comp_sum=z(), mart_sum=z(), mart_sq=z())

    def merge(self, other: "_Partial") -> None:
        for name in ("count_sum", "count_sq", "comp_sum", "mart_sum", "mart_sq"):
            getattr(self, name).__iadd__(getattr(other, name))
        for name in ("blocks", "occ", "hist", "rhs_sum", "rhs_sq", "resid_sum", "resid_sq"):
            mine = getattr(self, name)
            for k in sorted(getattr(other, name)):
                v = getattr(other, name)[k]
                if k in mine:
                    mine[k] = mine[k] + v
                else:
                    mine[k] = v.copy()


def _accumulate(acc: dict, key, idx, values, shape, dtype=float):
    arr = acc.get(key)
    if arr is None:
        arr = acc[key] = np.zeros(shape, dtype=dtype)
    arr[idx] += values


def _simulate_chunk(model, x0, cfg, grid, start, stop) -> _Partial:
    G = grid.n_points
    part = _Partial.empty(G)
    for i in range(start, stop):
        log = simulate_trajectory(model, x0, cfg, i)
        path = sample_on_grid(log, model, grid.t0, grid.dt, G)
        counts = path.counts.astype(float)
        part.count_sum += counts
        part.count_sq += counts * counts
        part.comp_sum += path.compensator
        mart = counts - path.compensator
        part.mart_sum += mart
        part.mart_sq += mart * mart
        for n in np.unique(path.counts):
            _accumulate(part.hist, int(n), path.counts == n, 1.0, G)
        indicator = {}
        drift = {}
        for s in np.unique(path.sectors):
            s = int(s)
            idx = np.flatnonzero(path.sectors == s)
            V = np.array([path.psis[j] for j in idx])
            n = V.shape[1]
            P = V[:, :, None] * V.conj()[:, None, :]
            _accumulate(part.blocks, s, idx, P, (G, n, n), np.complex128)
            _accumulate(part.occ, s, idx, 1.0, G)
            _accumulate(indicator, s, idx, 1.0, G)
            lam = np.einsum("ki,ij,kj->k", V.conj(), model.jump_operator(s), V).real
            _accumulate(drift, s, idx, -lam, G)
            for b, g in model.outgoing(s):
                W = V @ g.T
                _accumulate(drift, b, idx, np.sum(np.abs(W) ** 2, axis=1), G)
        for a in sorted(drift):
            r = drift[a]
            _accumulate(part.rhs_sum, a, slice(None), r, G)
            _accumulate(part.rhs_sq, a, slice(None), r * r, G)
            if G >= 3:
                ind = indicator.get(a, np.zeros(G))
                d = np.gradient(ind, grid.dt, edge_order=2) - r
                _accumulate(part.resid_sum, a, slice(None), d, G)
                _accumulate(part.resid_sq, a, slice(None), d * d, G)
    return part


def _chunk_job(args):
    return _simulate_chunk(*args)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_ensemble(
    model: HybridModel,
    x0: PureHybridState,
    cfg: TrajectoryConfig,
    N: int,
    grid: TimeGrid,
    workers: int | None = None,
) -> EnsembleStats:
    """Simulate trajectories ``0..N-1`` and aggregate them on ``grid``.

    Trajectories are processed in fixed chunks that are reduced in index
    order, so the result is bit-identical for any worker count.
    """
    if N < 1:
        raise PreconditionError("N must be at least 1")
    if grid.t_end > cfg.t_max:
        raise PreconditionError("grid extends beyond the trajectory horizon")
    x0.check_against(model)
    G = grid.n_points
    jobs = [(model, x0, cfg, grid, s, min(s + CHUNK_SIZE, N)) for s in range(0, N, CHUNK_SIZE)]
    workers = resolve_workers(workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_job, jobs))
    else:
        parts = [_chunk_job(j) for j in jobs]
    total = _Partial.empty(G)
    for p in parts:
        total.merge(p)

    def var(s, sq):
        if N < 2:
            return np.zeros(G)
        return np.maximum((sq - s * s / N) / (N - 1), 0.0)

    n_hist = max(total.hist) + 1
    hist = np.zeros((G, n_hist))
    for n, c in total.hist.items():
        hist[:, n] = c / N
    rhs_keys = sorted(set(total.rhs_sum))
    return EnsembleStats(
        grid=grid,
        N=N,
        empirical_blocks={a: b / N for a, b in sorted(total.blocks.items())},
        occupation={a: c / N for a, c in sorted(total.occ.items())},
        jump_count_mean=total.count_sum / N,
        jump_count_var=var(total.count_sum, total.count_sq),
        count_histogram=hist,
        compensator_mean=total.comp_sum / N,
        martingale_mean=total.mart_sum / N,
        martingale_var=var(total.mart_sum, total.mart_sq),
        rhs_mean={a: total.rhs_sum[a] / N for a in rhs_keys},
        rhs_var={a: var(total.rhs_sum[a], total.rhs_sq[a]) for a in rhs_keys},
        residual_var={a: var(total.resid_sum[a], total.resid_sq[a]) for a in sorted(total.resid_sum)},
    )


def compare_to_master(stats: EnsembleStats, master) -> np.ndarray:
    """Trace distance between empirical and master block densities at each grid point."""
    master = list(master)
    if len(master) != stats.grid.n_points:
        raise DimensionError(
            f"master series has {len(master)} points, grid has {stats.grid.n_points}"
        )
    out = np.empty(len(master))
    for j, rho in enumerate(master):
        sectors = set(stats.empirical_blocks) | set(rho.blocks)
        dist = 0.0
        for a in sectors:
            emp = stats.empirical_blocks.get(a)
            e = emp[j] if emp is not None else None
            m = rho.blocks.get(a)
            if e is None:
                diff = m
            elif m is None:
                diff = e
            else:
                if e.shape != m.shape:
                    raise DimensionError(f"block {a} shapes differ: {e.shape} vs {m.shape}")
                diff = e - m
            dist += 0.5 * trace_norm_hermitian(diff)
        out[j] = dist
    return out


@dataclass
class DriftResidual:
    """Finite-difference check of the occupation drift law, per grid point and sector."""

    sectors: tuple[int, ...]
    derivative: np.ndarray
    rhs: np.ndarray
    rhs_stderr: np.ndarray
    residual: np.ndarray
    residual_stderr: np.ndarray


def prop41_residual(model: HybridModel, stats: EnsembleStats) -> DriftResidual:
    """Compare ``d/dt occupation_a`` with its predicted drift.

    The drift is the ensemble mean of ``-lambda_a`` on paths in sector
    ``a`` plus ``||g_ab psi||^2`` on paths in each sector ``b != a``.
    Derivatives are second-order finite differences (centered inside,
    one-sided at the ends).
    """
    G = stats.grid.n_points
    if G < 3:
        raise PreconditionError("need at least three grid points")
    sectors = tuple(sorted(set(stats.occupation) | set(stats.rhs_mean)))
    occ = stats.occupation_array(sectors)
    deriv = np.gradient(occ, stats.grid.dt, axis=0, edge_order=2)
    zeros = np.zeros(G)
    rhs = np.stack([stats.rhs_mean.get(a, zeros) for a in sectors], axis=1)
    se = np.sqrt(np.stack([stats.rhs_var.get(a, zeros) for a in sectors], axis=1) / stats.N)
    rse = np.sqrt(np.stack([stats.residual_var.get(a, zeros) for a in sectors], axis=1) / stats.N)
    return DriftResidual(sectors, deriv, rhs, se, np.abs(deriv - rhs), rse)
