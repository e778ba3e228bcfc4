"""Coupled classical-quantum models and their Lindblad generator.

A model has classical sectors ``0, 1, ...``; sector ``a`` carries a
Hilbert space of dimension ``dim(a)``, a Hamiltonian ``H_a`` and outgoing
couplings ``g_ba`` (an operator from sector ``a`` to sector ``b``).
Derived per sector are the jump-rate operator
``Lambda_a = sum_b g_ba^dagger g_ba`` and the non-Hermitian generator
``K_a = -i H_a - Lambda_a / 2`` of the no-jump flow.

Models are either finite (all sectors listed) or translation-invariant
chains over ``n = 0, 1, 2, ...`` whose sectors are materialised on demand.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionError, PreconditionError, ValidationError
from .linalg import (
    HERMITIAN_TOL,
    as_matrix,
    as_vector,
    hermitian_deviation,
    operator_norm,
)

NORM_TOL = 1e-10


def _matrix_to_json(M: np.ndarray) -> list:
    return [[[float(z.real), float(z.imag)] for z in row] for row in M]


@dataclass(frozen=True)
class ChainRule:
    """Translation-invariant sector rule: identical physics in every sector.

    ``couplings`` holds ``(offset, G)`` pairs meaning ``g_{n+offset, n} = G``
    for every ``n`` with ``n + offset >= 0``.
    """

    dim: int
    hamiltonian: np.ndarray
    couplings: tuple[tuple[int, np.ndarray], ...]


class HybridModel:
    """Immutable hybrid model; build instances with :func:`build_model`
    or :func:`build_chain_model`."""

    def __init__(
        self,
        hamiltonians: Mapping[int, np.ndarray] | None = None,
        couplings: Mapping[tuple[int, int], np.ndarray] | None = None,
        chain: ChainRule | None = None,
        names: Iterable[str] | None = None,
    ):
        self._chain = chain
        self._H = dict(hamiltonians or {})
        self._g = dict(couplings or {})
        self._names = tuple(names) if names is not None else None
        # memoised derived operators; entries are only ever inserted via
        # setdefault so concurrent materialisation is idempotent
        self._cache: dict = {}
        self._out = {}
        self._in = {}
        if chain is None:
            for a in self._H:
                self._out[a] = tuple(sorted((b, g) for (b, s), g in self._g.items() if s == a))
                self._in[a] = tuple(sorted((s, g) for (b, s), g in self._g.items() if b == a))

    # -- structure -----------------------------------------------------
    @property
    def is_chain(self) -> bool:
        return self._chain is not None

    @property
    def chain(self) -> ChainRule | None:
        return self._chain

    @property
    def n_sectors(self) -> int | None:
        """Number of sectors, or ``None`` for an unbounded chain."""
        return None if self._chain is not None else len(self._H)

    @property
    def sectors(self) -> range:
        if self._chain is not None:
            raise ValidationError("a chain model has unboundedly many sectors")
        return range(len(self._H))

    def sector_name(self, a: int) -> str:
        if self._names is not None and a < len(self._names):
            return self._names[a]
        return str(a)

    def check_sector(self, a: int) -> int:
        a = int(a)
        if a < 0 or (self._chain is None and a >= len(self._H)):
            raise ValidationError(f"sector index {a} out of range")
        return a

    def dim(self, a: int) -> int:
        a = self.check_sector(a)
        if self._chain is not None:
            return self._chain.dim
        return self._H[a].shape[0]

    def hamiltonian(self, a: int) -> np.ndarray:
        a = self.check_sector(a)
        if self._chain is not None:
            return self._chain.hamiltonian
        return self._H[a]

    def outgoing(self, a: int) -> tuple[tuple[int, np.ndarray], ...]:
        """Pairs ``(b, g_ba)`` of possible jump targets from sector ``a``."""
        a = self.check_sector(a)
        if self._chain is not None:
            return tuple(
                sorted(((a + off, G) for off, G in self._chain.couplings if a + off >= 0),
                       key=lambda p: p[0])
            )
        return self._out[a]

    def incoming(self, a: int) -> tuple[tuple[int, np.ndarray], ...]:
        """Pairs ``(b, g_ab)`` of sectors that can jump into ``a``."""
        a = self.check_sector(a)
        if self._chain is not None:
            return tuple(
                sorted(((a - off, G) for off, G in self._chain.couplings if a - off >= 0),
                       key=lambda p: p[0])
            )
        return self._in[a]

    def coupling(self, b: int, a: int) -> np.ndarray | None:
        """``g_ba`` or ``None`` when there is no channel ``a -> b``."""
        for target, g in self.outgoing(a):
            if target == b:
                return g
        return None

    # -- derived operators ----------------------------------------------
    def _key(self, a: int) -> int:
        # every interior chain sector shares the same operators
        if self._chain is not None:
            lowest = min((off for off, _ in self._chain.couplings), default=0)
            return min(a, max(0, -lowest))
        return a

    def jump_operator(self, a: int) -> np.ndarray:
        """Lambda_a, the Hermitian jump-rate operator of sector ``a``."""
        a = self.check_sector(a)
        key = ("Lambda", self._key(a))
        cached = self._cache.get(key)
        if cached is None:
            n = self.dim(a)
            L = np.zeros((n, n), dtype=np.complex128)
            for _, g in self.outgoing(a):
                L += g.conj().T @ g
            L.setflags(write=False)
            cached = self._cache.setdefault(key, L)
        return cached

    def generator(self, a: int) -> np.ndarray:
        """K_a = -i H_a - Lambda_a / 2."""
        a = self.check_sector(a)
        key = ("K", self._key(a))
        cached = self._cache.get(key)
        if cached is None:
            K = -1j * self.hamiltonian(a) - 0.5 * self.jump_operator(a)
            K.setflags(write=False)
            cached = self._cache.setdefault(key, K)
        return cached

    def sector_rate_bound(self, a: int) -> float:
        key = ("C", self._key(a))
        cached = self._cache.get(key)
        if cached is None:
            cached = self._cache.setdefault(key, operator_norm(self.jump_operator(a)))
        return cached

    @property
    def rate_bound(self) -> float:
        """C = max_a ||Lambda_a||, the supremum of the jump rate."""
        if self._chain is not None:
            full = sum((G.conj().T @ G for _, G in self._chain.couplings),
                       np.zeros((self._chain.dim,) * 2, dtype=np.complex128))
            return operator_norm(full)
        return max((self.sector_rate_bound(a) for a in self.sectors), default=0.0)

    # -- identity ---------------------------------------------------------
    def to_config(self) -> dict:
        """JSON-ready description of the model (the model-config schema)."""
        if self._chain is not None:
            c = self._chain
            return {
                "chain": {
                    "dim": c.dim,
                    "hamiltonian": _matrix_to_json(c.hamiltonian),
                    "couplings": [
                        {"offset": off, "matrix": _matrix_to_json(G)} for off, G in c.couplings
                    ],
                }
            }
        return {
            "sectors": [
                {"name": self.sector_name(a), "dim": self.dim(a)} for a in self.sectors
            ],
            "hamiltonians": [_matrix_to_json(self._H[a]) for a in self.sectors],
            "couplings": [
                {"to": b, "from": a, "matrix": _matrix_to_json(g)}
                for (b, a), g in sorted(self._g.items())
            ],
        }

    @property
    def digest(self) -> str:
        cached = self._cache.get("digest")
        if cached is None:
            blob = json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))
            cached = self._cache.setdefault("digest", hashlib.sha256(blob.encode()).hexdigest())
        return cached

    def truncated(self, n_max: int) -> "HybridModel":
        """Finite model on sectors ``0..n_max``; couplings leaving the range are dropped."""
        if self._chain is None:
            raise ValidationError("only chain models can be truncated")
        H = [self._chain.hamiltonian] * (n_max + 1)
        g = {}
        for a in range(n_max + 1):
            for b, G in self.outgoing(a):
                if b <= n_max:
                    g[(b, a)] = G
        return build_model(H, g)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __repr__(self) -> str:
        if self._chain is not None:
            return f"HybridModel(chain, dim={self._chain.dim}, digest={self.digest[:12]})"
        return f"HybridModel(m={self.n_sectors}, dims={[self.dim(a) for a in self.sectors]})"


def _check_hermitian(H: np.ndarray, where: str) -> None:
    if H.shape[0] != H.shape[1]:
        raise ValidationError(f"Hamiltonian of {where} is not square: shape {H.shape}")
    dev = hermitian_deviation(H)
    if dev > HERMITIAN_TOL:
        raise ValidationError(f"Hamiltonian of {where} is not Hermitian (deviation {dev:.3g})")


def build_model(
    H: Iterable,
    g: Mapping[tuple[int, int], object] | None = None,
    names: Iterable[str] | None = None,
) -> HybridModel:
    """Validate Hamiltonians and couplings and return a finite model.

    ``g`` maps ``(to, from)`` sector pairs to coupling matrices of shape
    ``(dim(to), dim(from))``.  Diagonal couplings must be absent or zero.
    """
    hams = {}
    for a, h in enumerate(H):
        try:
            M = as_matrix(h)
        except (DimensionError, PreconditionError) as exc:
            raise ValidationError(f"Hamiltonian of sector {a}: {exc}") from exc
        _check_hermitian(M, f"sector {a}")
        M.setflags(write=False)
        hams[a] = M
    m = len(hams)
    if m == 0:
        raise ValidationError("a model needs at least one sector")
    if names is not None:
        names = tuple(str(n) for n in names)
        if len(names) != m:
            raise ValidationError(f"{len(names)} sector names given for {m} sectors")
    couplings = {}
    for (b, a), G in (g or {}).items():
        b, a = int(b), int(a)
        for idx in (a, b):
            if not 0 <= idx < m:
                raise ValidationError(f"coupling ({b}, {a}) refers to unknown sector {idx}")
        try:
            M = as_matrix(G)
        except (DimensionError, PreconditionError) as exc:
            raise ValidationError(f"coupling ({b}, {a}): {exc}") from exc
        want = (hams[b].shape[0], hams[a].shape[0])
        if M.shape != want:
            raise ValidationError(f"coupling ({b}, {a}) has shape {M.shape}, expected {want}")
        if a == b:
            if np.any(M != 0):
                raise ValidationError(f"diagonal coupling ({b}, {a}) must be zero")
            continue
        if not np.any(M != 0):
            continue
        M.setflags(write=False)
        couplings[(b, a)] = M
    return HybridModel(hams, couplings, names=names)


def build_chain_model(dim: int, hamiltonian, couplings: Mapping[int, object]) -> HybridModel:
    """Chain model over sectors ``n >= 0`` with ``g_{n+offset, n} = couplings[offset]``."""
    dim = int(dim)
    if dim < 1:
        raise ValidationError("chain sector dimension must be positive")
    try:
        Hm = as_matrix(hamiltonian)
    except (DimensionError, PreconditionError) as exc:
        raise ValidationError(f"chain Hamiltonian: {exc}") from exc
    if Hm.shape != (dim, dim):
        raise ValidationError(f"chain Hamiltonian has shape {Hm.shape}, expected {(dim, dim)}")
    _check_hermitian(Hm, "the chain template")
    Hm.setflags(write=False)
    rule = []
    for off, G in sorted(couplings.items()):
        off = int(off)
        M = as_matrix(G)
        if M.shape != (dim, dim):
            raise ValidationError(f"chain coupling at offset {off} has shape {M.shape}")
        if off == 0:
            if np.any(M != 0):
                raise ValidationError("chain coupling at offset 0 (diagonal) must be zero")
            continue
        M.setflags(write=False)
        rule.append((off, M))
    return HybridModel(chain=ChainRule(dim, Hm, tuple(rule)))


@dataclass(frozen=True)
class PureHybridState:
    """A point of the hybrid pure-state space: sector plus unit vector.

    Global phase is not quotiented; compare states through
    :meth:`projector`.
    """

    sector: int
    psi: np.ndarray

    def __post_init__(self):
        v = as_vector(self.psi)
        if abs(np.linalg.norm(v) - 1.0) > NORM_TOL:
            raise ValidationError(f"state vector norm {np.linalg.norm(v)!r} is not 1")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "psi", v)
        object.__setattr__(self, "sector", int(self.sector))

    @classmethod
    def normalized(cls, sector: int, v) -> "PureHybridState":
        v = as_vector(v)
        n = np.linalg.norm(v)
        if n == 0:
            raise ValidationError("cannot normalise the zero vector")
        return cls(sector, v / n)

    def projector(self) -> np.ndarray:
        return np.outer(self.psi, self.psi.conj())

    def check_against(self, model: HybridModel) -> None:
        model.check_sector(self.sector)
        if self.psi.shape[0] != model.dim(self.sector):
            raise DimensionError(
                f"state has dimension {self.psi.shape[0]}, sector {self.sector} "
                f"has dimension {model.dim(self.sector)}"
            )


@dataclass
class BlockDensityMatrix:
    """Block-diagonal statistical state ``diag(rho_0, rho_1, ...)``.

    Absent sectors are zero blocks.
    """

    blocks: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_pure(cls, x: PureHybridState) -> "BlockDensityMatrix":
        return cls({x.sector: x.projector()})

    def trace(self) -> float:
        return float(sum(np.trace(b).real for b in self.blocks.values()))

    def occupation(self, a: int) -> float:
        b = self.blocks.get(a)
        return 0.0 if b is None else float(np.trace(b).real)

    def min_eigenvalue(self) -> float:
        vals = [np.linalg.eigvalsh(0.5 * (b + b.conj().T))[0] for b in self.blocks.values() if b.size]
        return float(min(vals)) if vals else 0.0

    def validate(self, tol: float = 1e-8) -> None:
        if abs(self.trace() - 1.0) > tol:
            raise ValidationError(f"total trace {self.trace()!r} differs from 1")
        for a, b in self.blocks.items():
            if hermitian_deviation(b) > HERMITIAN_TOL:
                raise ValidationError(f"block {a} is not Hermitian")
            if b.size and np.linalg.eigvalsh(0.5 * (b + b.conj().T))[0] < -tol:
                raise ValidationError(f"block {a} is not positive")


def _check_blocks(model: HybridModel, blocks: Mapping[int, np.ndarray]) -> None:
    for a, b in blocks.items():
        n = model.dim(a)
        if b.shape != (n, n):
            raise DimensionError(f"block {a} has shape {b.shape}, expected {(n, n)}")


def total_rate(model: HybridModel, x: PureHybridState) -> float:
    """Jump intensity <psi, Lambda_a psi> at the state ``x``."""
    L = model.jump_operator(x.sector)
    return max(float(np.vdot(x.psi, L @ x.psi).real), 0.0)


def lindblad_apply(model: HybridModel, rho: BlockDensityMatrix | Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Right-hand side of the master equation, block by block.

    ``rho_dot_a = -i[H_a, rho_a] + sum_b g_ab rho_b g_ab^dagger - {Lambda_a, rho_a}/2``
    """
    blocks = rho.blocks if isinstance(rho, BlockDensityMatrix) else dict(rho)
    blocks = {int(a): np.asarray(b, dtype=np.complex128) for a, b in blocks.items()}
    _check_blocks(model, blocks)
    touched = set(blocks)
    for a in blocks:
        touched.update(b for b, _ in model.outgoing(a))
    out = {}
    for a in sorted(touched):
        n = model.dim(a)
        r = blocks.get(a)
        d = np.zeros((n, n), dtype=np.complex128)
        if r is not None:
            H = model.hamiltonian(a)
            L = model.jump_operator(a)
            d += -1j * (H @ r - r @ H) - 0.5 * (L @ r + r @ L)
        for b, g in model.incoming(a):
            rb = blocks.get(b)
            if rb is not None:
                d += g @ rb @ g.conj().T
        out[a] = d
    return out


def heisenberg_apply(model: HybridModel, A: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Dual generator on a blockwise observable.

    ``A_dot_a = i[H_a, A_a] + sum_b g_ba^dagger A_b g_ba - {Lambda_a, A_a}/2``;
    blocks missing from ``A`` count as zero.
    """
    blocks = {int(a): np.asarray(b, dtype=np.complex128) for a, b in dict(A).items()}
    _check_blocks(model, blocks)
    out = {}
    for a in sorted(blocks):
        Aa = blocks[a]
        H = model.hamiltonian(a)
        L = model.jump_operator(a)
        d = 1j * (H @ Aa - Aa @ H) - 0.5 * (L @ Aa + Aa @ L)
        for b, g in model.outgoing(a):
            Ab = blocks.get(b)
            if Ab is not None:
                d += g.conj().T @ Ab @ g
        out[a] = d
    return out


def pairing(A: Mapping[int, np.ndarray], rho: Mapping[int, np.ndarray]) -> complex:
    """Expectation ``sum_a Tr(A_a rho_a)`` over the common sectors."""
    return complex(sum(np.trace(A[a] @ rho[a]) for a in A if a in rho))


def random_model(
    rng: np.random.Generator,
    n_sectors: int = 3,
    max_dim: int = 3,
    coupling_norm: float = 1.0,
    density: float = 1.0,
) -> HybridModel:
    """Random finite model for property tests.

    Dimensions are drawn from ``1..max_dim``, Hamiltonians are Hermitian
    with complex Gaussian entries, and each off-diagonal coupling is kept
    with probability ``density`` and rescaled to operator norm
    ``coupling_norm``.
    """
    dims = rng.integers(1, max_dim + 1, size=n_sectors)

    def gauss(shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

    H = []
    for d in dims:
        X = gauss((d, d))
        H.append(0.5 * (X + X.conj().T))
    g = {}
    for b in range(n_sectors):
        for a in range(n_sectors):
            if a == b or rng.random() >= density:
                continue
            G = gauss((dims[b], dims[a]))
            g[(b, a)] = coupling_norm * G / operator_norm(G)
    return build_model(H, g)
