"""Worked models with closed-form references, and inference from
observed classical histories.

Two models are provided:

* the telegraph process: two one-dimensional sectors that switch at a
  constant rate, whose occupations relax as ``(1 +- exp(-2 lam t)) / 2``;
* resonance fluorescence of a driven two-level atom observed by a
  perfect photon counter: sector ``n`` is the number of detected photons
  and every detection resets the atom to its ground state.

Two-level convention: component 0 is the excited state, component 1 the
ground state, and the jump operator ``A = [[0, 0], [1, 0]]`` lowers
excited to ground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, signal

from .engine import _evolve_log, apply_jump, flow
from .errors import InconsistentHistoryError, InvalidJumpError, PreconditionError, ValidationError
from .linalg import matrix_exponential
from .model import HybridModel, PureHybridState, build_chain_model, build_model

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
LOWERING = np.array([[0, 0], [1, 0]], dtype=np.complex128)
EXCITED = np.array([1, 0], dtype=np.complex128)
GROUND = np.array([0, 1], dtype=np.complex128)


# -- telegraph -----------------------------------------------------------------

def build_telegraph(lam: float) -> HybridModel:
    """Two scalar sectors coupled both ways by ``sqrt(lam)``."""
    if not lam > 0:
        raise ValidationError("telegraph rate must be positive")
    s = math.sqrt(lam)
    return build_model([[[0.0]], [[0.0]]], {(0, 1): [[s]], (1, 0): [[s]]})


def telegraph_occupation(lam: float, t):
    """Closed-form occupations ``(p1, p2)`` when starting in the first sector."""
    e = np.exp(-2.0 * lam * np.asarray(t, dtype=float))
    return (1.0 + e) / 2.0, (1.0 - e) / 2.0


# -- resonance fluorescence ------------------------------------------------------

@dataclass(frozen=True)
class FluorescenceParams:
    """Relaxation rate ``gamma`` and Rabi frequency ``omega`` of the atom.

    ``mu`` is the oscillation frequency of the no-jump propagator,
    ``sqrt(omega**2 - (gamma/2)**2) / 2``; it is real only on the
    underdamped branch ``omega > gamma / 2``.
    """

    gamma: float
    omega: float

    def __post_init__(self):
        if not self.gamma >= 0 or not math.isfinite(self.gamma):
            raise ValidationError("gamma must be finite and nonnegative")
        if not self.omega >= 0 or not math.isfinite(self.omega):
            raise ValidationError("omega must be finite and nonnegative")

    @property
    def underdamped(self) -> bool:
        return self.omega > self.gamma / 2

    @property
    def mu(self) -> float:
        if not self.underdamped:
            return math.nan
        return 0.5 * math.sqrt(self.omega**2 - (self.gamma / 2) ** 2)

    def hamiltonian(self) -> np.ndarray:
        return -(self.omega / 2) * SIGMA_X

    def effective_hamiltonian(self) -> np.ndarray:
        """H - (i/2) gamma A*A, generating the no-jump propagator."""
        return self.hamiltonian() - 0.5j * self.gamma * (LOWERING.conj().T @ LOWERING)


def build_fluorescence(params: FluorescenceParams, n_max: int | None = None) -> HybridModel:
    """Photon-counting chain: ``g_{n+1,n} = sqrt(gamma) A``.

    With ``n_max`` the chain is truncated to sectors ``0..n_max``.
    """
    if not params.gamma > 0:
        raise ValidationError("fluorescence model needs gamma > 0")
    model = build_chain_model(2, params.hamiltonian(), {1: math.sqrt(params.gamma) * LOWERING})
    return model if n_max is None else model.truncated(n_max)


def closed_form_propagator(params: FluorescenceParams, t):
    """No-jump propagator ``exp(-i t H_eff)`` in closed form.

    ``t`` may be a scalar (returns 2x2) or an array (returns ``(..., 2, 2)``).
    """
    if not params.underdamped:
        raise PreconditionError("closed form requires omega > gamma / 2")
    g, om, mu = params.gamma, params.omega, params.mu
    t = np.asarray(t, dtype=float)
    c, s = np.cos(mu * t), np.sin(mu * t)
    damp = np.exp(-g * t / 4)
    U = np.empty(t.shape + (2, 2), dtype=np.complex128)
    U[..., 0, 0] = damp * (c - g / (4 * mu) * s)
    U[..., 0, 1] = damp * 1j * om / (2 * mu) * s
    U[..., 1, 0] = U[..., 0, 1]
    U[..., 1, 1] = damp * (c + g / (4 * mu) * s)
    return U


def _propagators(params: FluorescenceParams, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if params.underdamped:
        return closed_form_propagator(params, t)
    M = -1j * params.effective_hamiltonian()
    flat = [matrix_exponential(M, s) for s in t.ravel()]
    return np.array(flat).reshape(t.shape + (2, 2))


def no_count_probability(params: FluorescenceParams, t):
    """p0(t) = ||U(t) psi_ground||^2, the probability of no detection by ``t``."""
    v = _propagators(params, t) @ GROUND
    return np.sum(np.abs(v) ** 2, axis=-1)


def waiting_time_density(params: FluorescenceParams, t):
    """f(t) = gamma ||A U(t) psi_ground||^2."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise PreconditionError("waiting time must be nonnegative")
    v = _propagators(params, t) @ GROUND
    w = v @ LOWERING.T
    out = params.gamma * np.sum(np.abs(w) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def default_mesh_step(params: FluorescenceParams) -> float:
    h = 0.01 / params.gamma
    if params.underdamped:
        h = min(h, math.pi / (20 * params.mu))
    return h


def _trapezoid_convolve(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    full = signal.fftconvolve(a, b)[: len(a)]
    return h * (full - 0.5 * (a[0] * b + b[0] * a))


def count_curves(params: FluorescenceParams, t_end: float, n_max: int, h: float):
    """Mesh and counting probabilities ``p_n`` on it, shape ``(n_max+1, M)``.

    ``p_n = p0 * f^{*n}`` with each convolution by the trapezoid rule; the
    mesh step is adjusted down so that it divides ``t_end``.
    """
    m = max(int(math.ceil(t_end / h - 1e-9)), 1)
    mesh = np.linspace(0.0, t_end, m + 1)
    step = t_end / m
    f = waiting_time_density(params, mesh)
    curves = np.empty((n_max + 1, m + 1))
    curves[0] = no_count_probability(params, mesh)
    for n in range(1, n_max + 1):
        curves[n] = _trapezoid_convolve(curves[n - 1], f, step)
    return mesh, np.clip(curves, 0.0, None)


def photon_count_probs(
    params: FluorescenceParams,
    t: float,
    n_max: int,
    tol: float = 1e-6,
    h: float | None = None,
) -> np.ndarray:
    """Probabilities of ``n = 0..n_max`` detections in ``[0, t]``.

    The mesh starts at :func:`default_mesh_step` and is halved until two
    successive results differ by less than ``tol``.
    """
    if t < 0:
        raise PreconditionError("t must be nonnegative")
    if t == 0:
        out = np.zeros(n_max + 1)
        out[0] = 1.0
        return out
    if h is not None:
        return count_curves(params, t, n_max, h)[1][:, -1]
    h = default_mesh_step(params)
    prev = count_curves(params, t, n_max, h)[1][:, -1]
    for _ in range(12):
        h /= 2
        cur = count_curves(params, t, n_max, h)[1][:, -1]
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    raise PreconditionError("convolution mesh did not converge")


def laplace_transform(g, lam: float, upper: float = math.inf) -> float:
    val, _ = integrate.quad(lambda s: math.exp(-lam * s) * g(s), 0.0, upper,
                            epsabs=1e-13, epsrel=1e-12, limit=500)
    return val


def laplace_identity_check(
    params: FluorescenceParams,
    lambda_values,
    n_values=(1, 2, 3),
    h: float | None = None,
) -> float:
    """max |p^_n(lam) - p^_0(lam) f^(lam)^n| over the given ``lam`` and ``n``.

    ``p^_0`` and ``f^`` come from adaptive quadrature of the closed forms;
    ``p^_n`` from the trapezoid rule applied to the convolution curves.
    """
    lams = np.atleast_1d(np.asarray(lambda_values, dtype=float))
    if np.any(lams <= 0):
        raise PreconditionError("Laplace variables must be positive")
    n_values = tuple(int(n) for n in n_values)
    if not n_values or max(n_values) == 0:
        return 0.0
    n_top = max(n_values)
    h = default_mesh_step(params) / 4 if h is None else h
    # p_n <= 1, so the tail beyond the horizon is below exp(-lam T) / lam
    lam_min = float(lams.min())
    horizon = (math.log(1.0 / lam_min) + 40.0) / lam_min if lam_min < 1 else 40.0 / lam_min
    mesh, curves = count_curves(params, horizon, n_top, h)
    worst = 0.0
    p0 = lambda s: float(no_count_probability(params, s))
    f = lambda s: waiting_time_density(params, s)
    for lam in lams:
        p0_hat = laplace_transform(p0, lam)
        f_hat = laplace_transform(f, lam)
        weights = np.exp(-lam * mesh)
        for n in n_values:
            if n == 0:
                continue
            pn_hat = integrate.trapezoid(weights * curves[n], mesh)
            worst = max(worst, abs(pn_hat - p0_hat * f_hat**n))
    return worst


# -- inference from a classical record -------------------------------------------------

@dataclass(frozen=True)
class ClassicalHistory:
    """Observed sectors ``(t_k, alpha_k)`` starting at ``t_0 = 0``."""

    times: tuple[float, ...]
    sectors: tuple[int, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        sectors = tuple(int(a) for a in self.sectors)
        if not times or len(times) != len(sectors):
            raise ValidationError("history needs matching, nonempty times and sectors")
        if times[0] != 0.0:
            raise ValidationError("history must start at t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("history times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sectors", sectors)

    @classmethod
    def from_pairs(cls, pairs) -> "ClassicalHistory":
        pairs = list(pairs)
        return cls(tuple(t for t, _ in pairs), tuple(a for _, a in pairs))


def reconstruct_chain(model: HybridModel, x0: PureHybridState, history: ClassicalHistory) -> PureHybridState:
    """Post-jump state x_k after replaying the recorded jumps from ``x0``."""
    if x0.sector != history.sectors[0]:
        raise InconsistentHistoryError("initial state sector differs from the history")
    x = x0
    for k in range(1, len(history.times)):
        pre = flow(model, x, history.times[k] - history.times[k - 1])
        try:
            x = apply_jump(model, pre, history.sectors[k])
        except InvalidJumpError as exc:
            raise InconsistentHistoryError(f"jump {k} is impossible: {exc}") from exc
    return x


def next_jump_distribution(
    model: HybridModel,
    x0: PureHybridState,
    history: ClassicalHistory,
    t: float | None = None,
    tail: float = 1e-8,
    max_chunks: int = 10_000,
) -> np.ndarray:
    """Probability that the next jump goes to each sector.

    Without ``t`` this integrates ``||g_{b, alpha_k} psi~_s||^2`` over the
    flow from the last recorded jump; with ``t >= t_k`` the flow starts at
    ``t`` instead, which conditions on no jump in ``(t_k, t]``.  The
    entries sum to the probability that a next jump occurs at all.
    """
    x = reconstruct_chain(model, x0, history)
    t_k = history.times[-1]
    if t is not None:
        if t < t_k:
            raise PreconditionError("t precedes the last recorded jump")
        x = flow(model, x, t - t_k)
    a = x.sector
    channels = model.outgoing(a)
    size = model.n_sectors if model.n_sectors is not None else max([b for b, _ in channels] + [a]) + 1
    out = np.zeros(size)
    C = model.sector_rate_bound(a)
    if C == 0 or not channels:
        return out
    K = model.generator(a)
    ops = [g for _, g in channels]
    length = 1.0 / C
    v, log_s = x.psi, 0.0
    acc = np.zeros(len(ops))
    stalled = 0
    for _ in range(max_chunks):
        s0 = math.exp(log_s)

        def weights(u, v=v):
            w = matrix_exponential(K, u) @ v
            return np.array([float(np.vdot(g @ w, g @ w).real) for g in ops])

        part, _ = integrate.quad_vec(weights, 0.0, length, epsabs=1e-13, epsrel=1e-11)
        acc += s0 * part
        v, dlog = _evolve_log(model, a, v, length)
        log_s += dlog
        if math.exp(log_s) < tail:
            break
        stalled = stalled + 1 if -dlog < 1e-14 else 0
        if stalled >= 50:
            break
    out[[b for b, _ in channels]] = acc
    return out


def discriminate_initial_state(
    model: HybridModel,
    candidates,
    history: ClassicalHistory,
) -> np.ndarray:
    """Normalised likelihoods of candidate initial states given a record.

    Each recorded jump contributes the waiting-time density at the
    recorded time times the branching ratio into the recorded sector,
    which together equal ``||g psi~_dt||^2`` along the candidate's chain.
    """
    candidates = list(candidates)
    if not candidates:
        raise PreconditionError("need at least one candidate")
    a0 = history.sectors[0]
    for c in candidates:
        if c.sector != a0:
            raise InconsistentHistoryError("candidates must start in the recorded sector")
    logs = []
    for c in candidates:
        ll, x = 0.0, c
        for k in range(1, len(history.times)):
            v, log_s = _evolve_log(model, x.sector, x.psi, history.times[k] - history.times[k - 1])
            g = model.coupling(history.sectors[k], x.sector)
            w = None if g is None else g @ v
            mass = 0.0 if w is None else float(np.vdot(w, w).real)
            if not mass > 0 or log_s == -math.inf:
                ll = -math.inf
                break
            ll += log_s + math.log(mass)
            x = PureHybridState(history.sectors[k], w / math.sqrt(mass))
        logs.append(ll)
    logs = np.array(logs)
    if not np.any(np.isfinite(logs)):
        raise InconsistentHistoryError("the history is impossible for every candidate")
    w = np.exp(logs - logs[np.isfinite(logs)].max())
    return w / w.sum()
