"""Sample paths of the piecewise deterministic jump process.

Between jumps a sector-``a`` state follows the no-jump flow
``psi~_t = exp(t K_a) psi``; its squared norm is the survival function,
so the first jump time has CDF ``F(t) = 1 - ||psi~_t||^2``.  Jump times
are drawn by inverting this CDF with a root finder, jump targets by the
branching ratios ``||g_ba psi||^2 / <psi, Lambda_a psi>``.

Every exponential here is an exact matrix exponential of the
time-independent generator, so no ODE stepping error enters the flow.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import InvalidJumpError, PreconditionError, SurvivalUnderflowError, ZeroRateError
from .linalg import as_vector, expm_unchecked
from .model import HybridModel, PureHybridState, total_rate

RATE_EPS = 1e-14
SURVIVAL_FLOOR = 1e-150
LOG_SURVIVAL_FLOOR = math.log(SURVIVAL_FLOOR)
# a chunk of length CHUNK / C loses at most a factor e^-CHUNK in norm
CHUNK = 32.0


@dataclass(frozen=True)
class TrajectoryConfig:
    """Settings for one sample path.

    ``ode_rel_tol`` and ``ode_abs_tol`` are validated and recorded in run
    manifests; the flow itself is propagated by exact exponentials.
    """

    t_max: float
    max_events: int = 1_000_000
    ode_rel_tol: float = 1e-8
    ode_abs_tol: float = 1e-10
    root_tol: float = 1e-10
    seed: int = 0
    rate_eps: float = RATE_EPS

    def __post_init__(self):
        if not self.t_max > 0:
            raise PreconditionError("t_max must be positive")
        for name in ("ode_rel_tol", "ode_abs_tol", "root_tol", "rate_eps"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")
        if self.max_events < 0:
            raise PreconditionError("max_events must be nonnegative")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class EventRecord:
    n: int
    t: float
    sector: int
    psi: np.ndarray

    @property
    def state(self) -> PureHybridState:
        return PureHybridState(self.sector, self.psi)


@dataclass
class EventLog:
    """One sample path: the initial record followed by one record per jump."""

    model_id: str
    master_seed: int
    trajectory_index: int
    records: list[EventRecord] = field(default_factory=list)
    t_end: float = 0.0

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([r.t for r in self.records[1:]])

    @property
    def n_jumps(self) -> int:
        return len(self.records) - 1

    def check(self) -> None:
        """Raise ``ValueError`` unless the log invariants hold."""
        if not self.records:
            raise ValueError("event log has no records")
        if self.records[0].t != 0.0 or self.records[0].n != 0:
            raise ValueError("first record must be n=0 at t=0")
        for prev, cur in zip(self.records, self.records[1:]):
            if not cur.t > prev.t:
                raise ValueError(f"jump times not strictly increasing at n={cur.n}")
            if cur.n != prev.n + 1:
                raise ValueError(f"record ordinals not consecutive at n={cur.n}")
        if self.records[-1].t > self.t_end:
            raise ValueError("last record lies beyond t_end")


# -- propagation ------------------------------------------------------------

def propagator(model: HybridModel, sector: int, dt: float, cache: bool = False) -> np.ndarray:
    """exp(dt K_sector); cached on the model when ``cache`` is set."""
    if not cache:
        return expm_unchecked(model.generator(sector), dt)
    key = ("P", model._key(sector), float(dt))
    P = model._cache.get(key)
    if P is None:
        P = expm_unchecked(model.generator(sector), dt)
        P.setflags(write=False)
        P = model._cache.setdefault(key, P)
    return P


def evolve_unnormalized(model: HybridModel, sector: int, psi, t: float) -> np.ndarray:
    """psi~_t = exp(t K_sector) psi, the no-jump solution."""
    if t < 0:
        raise PreconditionError("evolution time must be nonnegative")
    v = as_vector(psi)
    if t == 0:
        return v.copy()
    return propagator(model, sector, t) @ v


def _chunk(model: HybridModel, sector: int) -> float:
    C = model.sector_rate_bound(sector)
    return CHUNK / C if C > 0 else math.inf


def _evolve_log(model: HybridModel, sector: int, psi: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Unit direction of psi~_t and ``log ||psi~_t||^2`` for unit ``psi``.

    Long times are split into chunks with renormalisation in between so
    the norm never underflows.
    """
    if t < 0:
        raise PreconditionError("evolution time must be nonnegative")
    v = psi
    log_s = 0.0
    h = _chunk(model, sector)
    remaining = t
    while remaining > 0:
        dt = h if remaining > h else remaining
        w = propagator(model, sector, dt, cache=(dt == h)) @ v
        s2 = float(np.vdot(w, w).real)
        if not s2 > 0:
            return v, -math.inf
        log_s += math.log(s2)
        v = w / math.sqrt(s2)
        remaining -= dt
    return v, log_s


def flow(model: HybridModel, x: PureHybridState, t: float) -> PureHybridState:
    """The normalised no-jump flow phi(t, x)."""
    if t == 0:
        return x
    v, log_s = _evolve_log(model, x.sector, x.psi, t)
    if log_s < LOG_SURVIVAL_FLOOR:
        raise SurvivalUnderflowError(
            f"survival probability below {SURVIVAL_FLOOR:g} after t={t!r}"
        )
    return PureHybridState(x.sector, v)


def cumulative_rate(model: HybridModel, x: PureHybridState, t: float) -> float:
    """Integrated intensity Lambda(t, x) = -log ||psi~_t||^2.

    Saturates at ``-log(SURVIVAL_FLOOR)``.
    """
    if t < 0:
        raise PreconditionError("t must be nonnegative")
    if t == 0:
        return 0.0
    _, log_s = _evolve_log(model, x.sector, x.psi, t)
    return min(max(-log_s, 0.0), -LOG_SURVIVAL_FLOOR)


# -- jump mechanism -----------------------------------------------------------

def _root_in_chunk(K, v, log_s, log_target, t0, width, root_tol):
    def excess(tau):
        w = expm_unchecked(K, tau) @ v
        s2 = float(np.vdot(w, w).real)
        return log_s + math.log(max(s2, 1e-300)) - log_target

    xtol = root_tol * t0 if t0 > 0 else root_tol * width * 1e-6
    return optimize.brentq(excess, 0.0, width, xtol=max(xtol, 1e-300),
                           rtol=max(root_tol, 4 * np.finfo(float).eps))


def _next_jump(model, sector, psi, log_target, horizon, root_tol):
    """Time and pre-jump direction where ``log ||psi~_t||^2`` first hits
    ``log_target``, or ``None`` if that does not happen within ``horizon``.

    Brackets by step doubling on the survival function, then refines with
    Brent's method inside the bracket.
    """
    if log_target >= 0:
        return 0.0, psi
    C = model.sector_rate_bound(sector)
    if C == 0 or log_target == -math.inf:
        return None
    K = model.generator(sector)
    t, v, log_s = 0.0, psi, 0.0
    step = 1.0 / C
    cap = CHUNK / C
    while t < horizon:
        dt = step if t + step <= horizon else horizon - t
        w = propagator(model, sector, dt, cache=(dt == step)) @ v
        s2 = float(np.vdot(w, w).real)
        log_next = log_s + math.log(s2) if s2 > 0 else -math.inf
        if log_next <= log_target:
            tau = _root_in_chunk(K, v, log_s, log_target, t, dt, root_tol)
            u = expm_unchecked(K, tau) @ v
            return t + tau, u / np.linalg.norm(u)
        v = w / math.sqrt(s2)
        log_s = log_next
        t += dt
        step = min(2.0 * step, cap)
    return None


def sample_jump_time(
    model: HybridModel,
    x: PureHybridState,
    p: float,
    t_max: float,
    root_tol: float = 1e-10,
) -> float | None:
    """Invert the first-jump CDF: the ``t`` with ``F_x(t) = p``.

    Returns ``None`` when no such ``t <= t_max`` exists (including
    ``p == 1`` and states that never jump).
    """
    if not 0.0 <= p <= 1.0:
        raise PreconditionError("p must lie in [0, 1]")
    log_target = math.log1p(-p) if p < 1 else -math.inf
    found = _next_jump(model, x.sector, x.psi, log_target, t_max, root_tol)
    return None if found is None else found[0]


def _branching(model: HybridModel, x: PureHybridState, rate_eps: float):
    rate = total_rate(model, x)
    if rate < rate_eps:
        raise ZeroRateError(f"jump rate {rate:.3g} below {rate_eps:g}")
    targets = []
    weights = []
    for b, g in model.outgoing(x.sector):
        w = g @ x.psi
        targets.append(b)
        weights.append(float(np.vdot(w, w).real))
    probs = np.array(weights) / rate
    return targets, probs


def jump_distribution(model: HybridModel, x: PureHybridState, rate_eps: float = RATE_EPS) -> np.ndarray:
    """Probabilities of the jump targets, indexed by sector."""
    targets, probs = _branching(model, x, rate_eps)
    size = model.n_sectors if model.n_sectors is not None else max(targets + [x.sector]) + 1
    out = np.zeros(size)
    out[targets] = probs
    out /= out.sum()
    return out


def _pick_target(targets: list[int], probs: np.ndarray, u: float) -> int:
    cum = np.cumsum(probs)
    i = int(np.searchsorted(cum, u * cum[-1], side="right"))
    if i >= len(targets):
        # residual rounding mass goes to the last positive channel
        i = int(np.flatnonzero(probs > 0)[-1])
    return targets[i]


def apply_jump(model: HybridModel, x: PureHybridState, target: int) -> PureHybridState:
    """Collapse ``x`` through ``g_{target, sector}`` and renormalise."""
    g = model.coupling(target, x.sector)
    if g is None:
        raise InvalidJumpError(f"no coupling from sector {x.sector} to sector {target}")
    w = g @ x.psi
    norm = float(np.linalg.norm(w))
    if not norm > 0:
        raise InvalidJumpError(f"coupling {target}<-{x.sector} annihilates the state")
    return PureHybridState(target, w / norm)


# -- trajectories ---------------------------------------------------------------

def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for trajectory ``index``, independent of scheduling."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def simulate_trajectory(
    model: HybridModel,
    x0: PureHybridState,
    cfg: TrajectoryConfig,
    trajectory_index: int = 0,
) -> EventLog:
    """Generate one sample path on ``[0, cfg.t_max]``.

    Randomness is consumed in event order: one uniform for the clock and
    one for the jump target per jump.
    """
    x0.check_against(model)
    rng = trajectory_rng(cfg.seed, trajectory_index)
    records = [EventRecord(0, 0.0, x0.sector, x0.psi)]
    x, T = x0, 0.0
    t_end = cfg.t_max
    while True:
        if len(records) - 1 >= cfg.max_events:
            t_end = T
            break
        r = rng.random()
        log_target = math.log(r) if r > 0 else -math.inf
        found = _next_jump(model, x.sector, x.psi, log_target, cfg.t_max - T, cfg.root_tol)
        if found is None:
            break
        tau, u = found
        t1 = T + tau
        if t1 <= T:
            t1 = float(np.nextafter(T, math.inf))
        if t1 > cfg.t_max:
            break
        pre = PureHybridState(x.sector, u)
        try:
            targets, probs = _branching(model, pre, cfg.rate_eps)
        except ZeroRateError:
            # measure-zero configuration: drop the event, keep flowing
            x, T = pre, t1
            continue
        b = _pick_target(targets, probs, rng.random())
        x = apply_jump(model, pre, b)
        T = t1
        records.append(EventRecord(len(records), T, x.sector, x.psi))
    return EventLog(model.digest, int(cfg.seed), int(trajectory_index), records, t_end)


def _record_index(log: EventLog, t: float) -> int:
    times = [r.t for r in log.records]
    return bisect.bisect_right(times, t) - 1


def state_at(log: EventLog, model: HybridModel, t: float) -> PureHybridState:
    """x_t: flow of the latest record at or before ``t`` (right-continuous)."""
    if not 0 <= t <= log.t_end:
        raise PreconditionError(f"t={t!r} outside [0, {log.t_end!r}]")
    rec = log.records[_record_index(log, t)]
    return flow(model, rec.state, t - rec.t)


def counting_process(log: EventLog, t: float) -> int:
    """Number of jumps with T_n <= t."""
    return max(_record_index(log, t), 0)


def _power_stack(model: HybridModel, sector: int, dt: float, length: int) -> np.ndarray:
    """``exp(k dt K)`` for ``k = 0..length-1``, built by repeated products and cached."""
    key = ("Pk", model._key(sector), float(dt))
    stack = model._cache.get(key)
    if stack is None or len(stack) < length:
        P = propagator(model, sector, dt, cache=True)
        n = P.shape[0]
        old = stack if stack is not None else np.eye(n, dtype=np.complex128)[None]
        grown = np.empty((max(length, 1), n, n), dtype=np.complex128)
        grown[: len(old)] = old
        for i in range(len(old), length):
            grown[i] = grown[i - 1] @ P
        grown.setflags(write=False)
        model._cache[key] = grown
        stack = grown
    return stack[:length]


def _sweep(model: HybridModel, sector: int, v: np.ndarray, dt: float, length: int):
    """Directions and log-survivals of ``exp(k dt K) v`` for ``k < length``."""
    if model.sector_rate_bound(sector) * dt * length < 600:
        W = _power_stack(model, sector, dt, length) @ v
        s2 = np.sum(W.real**2 + W.imag**2, axis=1)
        return W / np.sqrt(s2)[:, None], np.log(s2)
    # long stretches: step with renormalisation so the norm cannot underflow
    P = propagator(model, sector, dt, cache=True)
    V = np.empty((length, v.shape[0]), dtype=np.complex128)
    logs = np.empty(length)
    log_s = 0.0
    for i in range(length):
        if i:
            w = P @ v
            s2 = float(np.vdot(w, w).real)
            log_s += math.log(s2)
            v = w / math.sqrt(s2)
        V[i] = v
        logs[i] = log_s
    return V, logs


@dataclass
class GridPath:
    """A sample path read off on a uniform time grid."""

    sectors: np.ndarray
    psis: list
    counts: np.ndarray
    compensator: np.ndarray


def sample_on_grid(log: EventLog, model: HybridModel, t0: float, dt: float, n_points: int) -> GridPath:
    """Evaluate sector, state, jump count and integrated intensity on a grid.

    Inside one inter-jump interval the state advances by the cached
    ``exp(dt K)``; only the first point of each interval needs a fresh
    exponential.
    """
    times = t0 + dt * np.arange(n_points)
    if n_points and times[-1] > log.t_end * (1 + 1e-12):
        raise PreconditionError("grid extends beyond the end of the event log")
    sectors = np.empty(n_points, dtype=np.int64)
    counts = np.empty(n_points, dtype=np.int64)
    comp = np.empty(n_points)
    psis = [None] * n_points
    recs = log.records
    rec_times = [r.t for r in recs]
    done = 0.0  # integrated intensity over completed intervals
    j = 0
    for k, rec in enumerate(recs):
        t_next = rec_times[k + 1] if k + 1 < len(recs) else math.inf
        if j < n_points and times[j] < t_next:
            stop = int(np.searchsorted(times, t_next, side="left"))
            v, log_s = _evolve_log(model, rec.sector, rec.psi, max(times[j] - rec.t, 0.0))
            V, logs = _sweep(model, rec.sector, v, dt, stop - j)
            sectors[j:stop] = rec.sector
            counts[j:stop] = k
            comp[j:stop] = done - (log_s + logs)
            psis[j:stop] = list(V)
            j = stop
        if k + 1 < len(recs):
            _, log_end = _evolve_log(model, rec.sector, rec.psi, t_next - rec.t)
            done -= log_end
    return GridPath(sectors, psis, counts, comp)


# -- closed-form path probabilities -------------------------------------------------

def analytic_no_jump_prob(model: HybridModel, x: PureHybridState, t: float) -> float:
    """P_x[T_1 > t] = exp(-Lambda(t, x))."""
    return math.exp(-cumulative_rate(model, x, t))


def analytic_one_jump_prob(model: HybridModel, x: PureHybridState, t: float, epsabs: float = 1e-9) -> float:
    """P_x[T_1 <= t < T_2] by quadrature over the first jump time.

    The integrand at ``u`` is ``sum_b ||g_b psi~_u||^2 * S_b(t - u)`` where
    ``S_b`` is the survival function after jumping into ``b``.
    """
    if t < 0:
        raise PreconditionError("t must be nonnegative")
    if t == 0:
        return 0.0
    channels = model.outgoing(x.sector)

    def integrand(u):
        w = evolve_unnormalized(model, x.sector, x.psi, u)
        total = 0.0
        for b, g in channels:
            y = g @ w
            mass = float(np.vdot(y, y).real)
            if mass <= 0:
                continue
            y = y / math.sqrt(mass)
            z = evolve_unnormalized(model, b, y, t - u)
            total += mass * float(np.vdot(z, z).real)
        return total

    val, _ = integrate.quad(integrand, 0.0, t, epsabs=epsabs, epsrel=1e-10, limit=200)
    return float(val)
