"""Phase-type service-time distributions.

A distribution ``PH(p, nu, P)`` is the absorption time of a continuous-time
Markov chain on phases ``0..K-1`` plus an absorbing exit state.  ``p`` is the
initial-phase law, ``nu`` the per-phase exponential rates and ``P`` the
sub-stochastic routing matrix between phases (zero diagonal).

Derived quantities follow the usual many-server conventions::

    F = diag(nu) (P - I)          sub-generator
    R = (I - P') diag(nu)         service-rate matrix
    m = p' (diag(nu)(I - P))^-1 e mean service time, mu = 1/m
    gamma = mu R^-1 p             stationary load carried by each phase
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

MAX_PHASES = 32
MAX_PATH_LENGTH = 10**9
_PROB_TOL = 1e-12
_COND_LIMIT = 1e12
_RESIDUAL_TOL = 1e-10
_TAIL_TOL = 1e-12


class PhaseTypeError(ValueError):
    """Base class for invalid phase-type parameters."""


class NonStochasticInit(PhaseTypeError):
    pass


class NonzeroDiagonal(PhaseTypeError):
    pass


class NotTransient(PhaseTypeError):
    pass


class NonpositiveRate(PhaseTypeError):
    pass


class UnreachablePhase(PhaseTypeError):
    """A phase carries no load (gamma_k == 0); drop it from the model."""


class NegativeArgument(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class SamplerDiverged(RuntimeError):
    """Phase walk exceeded MAX_PATH_LENGTH steps; indicates a broken P."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PhaseType:
    """Validated phase-type law plus its static linear algebra.

    Build instances with :func:`validate`; the constructor does not check
    anything.
    """

    p: np.ndarray
    nu: np.ndarray
    P: np.ndarray
    F: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    m: float
    mu: float
    gamma: np.ndarray
    second_moment: float = field(repr=False)

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def variance(self) -> float:
        return self.second_moment - self.m**2

    @property
    def scv(self) -> float:
        return self.variance / self.m**2

    @property
    def exit_prob(self) -> np.ndarray:
        """Probability of leaving service after each phase."""
        return 1.0 - self.P.sum(axis=1)

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "nu": self.nu.tolist(), "P": self.P.tolist()}


def validate(p, nu, P) -> PhaseType:
    """Check ``(p, nu, P)`` and return a :class:`PhaseType` with derived fields.

    Raises one of :class:`NonStochasticInit`, :class:`NonzeroDiagonal`,
    :class:`NotTransient`, :class:`NonpositiveRate` (all ``PhaseTypeError``).
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    K = p.shape[0]
    if p.ndim != 1 or nu.shape != (K,) or P.shape != (K, K):
        raise PhaseTypeError(
            f"dimension mismatch: p{p.shape}, nu{nu.shape}, P{P.shape}"
        )
    if K > MAX_PHASES:
        raise PhaseTypeError(f"K={K} exceeds the supported maximum {MAX_PHASES}")
    if not (np.isfinite(p).all() and np.isfinite(nu).all() and np.isfinite(P).all()):
        raise PhaseTypeError("parameters must be finite")
    if (p < 0).any() or abs(p.sum() - 1.0) > _PROB_TOL:
        raise NonStochasticInit(f"p must be a probability vector, got {p.tolist()}")
    if (nu <= 0).any():
        raise NonpositiveRate(f"phase rates must be positive, got {nu.tolist()}")
    if (np.diag(P) != 0).any():
        raise NonzeroDiagonal(f"P must have zero diagonal, got {np.diag(P).tolist()}")
    if (P < 0).any() or (P.sum(axis=1) > 1.0 + _PROB_TOL).any():
        raise PhaseTypeError("P must be entrywise nonnegative with row sums <= 1")

    eye = np.eye(K)
    cond = np.linalg.cond(eye - P)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise NotTransient(f"I - P is singular to tolerance (cond={cond:.3g})")

    B = np.diag(nu) @ (eye - P)
    tau = np.linalg.solve(B, np.ones(K))
    m = float(p @ tau)
    second = float(2.0 * p @ np.linalg.solve(B, tau))
    mu = 1.0 / m
    R = (eye - P.T) @ np.diag(nu)
    gamma = np.linalg.solve(R, mu * p)
    resid = np.max(np.abs(R @ gamma - mu * p))
    if resid > _RESIDUAL_TOL or abs(gamma.sum() - 1.0) > 1e-9:
        raise NotTransient(f"load vector solve is inaccurate (residual {resid:.3g})")
    if (gamma <= 0).any():
        raise UnreachablePhase(f"phases with zero load: {np.flatnonzero(gamma <= 0).tolist()}")

    return PhaseType(
        p=_frozen(p),
        nu=_frozen(nu),
        P=_frozen(P),
        F=_frozen(np.diag(nu) @ (P - eye)),
        R=_frozen(R),
        m=m,
        mu=mu,
        gamma=_frozen(gamma),
        second_moment=second,
    )


def exponential(rate: float) -> PhaseType:
    return validate([1.0], [rate], [[0.0]])


def sample(ph: PhaseType, rng: np.random.Generator) -> tuple[float, tuple[int, ...]]:
    """Draw one service time and the phases it visits (0-based)."""
    K = ph.K
    k = int(rng.choice(K, p=ph.p))
    phases = [k]
    v = 0.0
    rows = np.hstack([ph.P, ph.exit_prob[:, None]])
    while True:
        v += rng.exponential(1.0 / ph.nu[k])
        nxt = int(rng.choice(K + 1, p=rows[k]))
        if nxt == K:
            return v, tuple(phases)
        if len(phases) >= MAX_PATH_LENGTH:
            raise SamplerDiverged("phase walk did not terminate")
        phases.append(nxt)
        k = nxt


def sample_many(
    ph: PhaseType, rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sample`: returns service times and phase counts ``L``.

    Every draw walks the same chain as :func:`sample`; walks advance in
    lockstep so the cost is ``O(size * max L)``.
    """
    K = ph.K
    cum = np.cumsum(np.hstack([ph.P, ph.exit_prob[:, None]]), axis=1)
    cum[:, -1] = 1.0
    phase = np.searchsorted(np.cumsum(ph.p), rng.random(size), side="right")
    phase = np.minimum(phase, K - 1)
    v = np.zeros(size)
    L = np.zeros(size, dtype=np.int64)
    active = np.arange(size)
    steps = 0
    while active.size:
        k = phase[active]
        v[active] += rng.standard_exponential(active.size) / ph.nu[k]
        L[active] += 1
        u = rng.random(active.size)
        nxt = (u[:, None] >= cum[k]).sum(axis=1)
        phase[active] = nxt
        active = active[nxt < K]
        steps += 1
        if steps >= MAX_PATH_LENGTH:
            raise SamplerDiverged("phase walk did not terminate")
    return v, L


def _uniformized_terms(ph: PhaseType, jmax: int) -> np.ndarray:
    """s_j = p' Q^j e for j = 0..jmax with Q = I + F / max(nu)."""
    lam = float(ph.nu.max())
    Q = np.eye(ph.K) + ph.F / lam
    s = np.empty(jmax + 1)
    row = ph.p.copy()
    for j in range(jmax + 1):
        s[j] = row.sum()
        row = row @ Q
    return s


def _poisson_weights(a: float) -> np.ndarray:
    """Poisson(a) pmf truncated once the upper tail is below _TAIL_TOL."""
    if a == 0.0:
        return np.ones(1)
    jmax = int(math.ceil(a + 12.0 * math.sqrt(a) + 40.0))
    while True:
        j = np.arange(jmax + 1)
        logw = -a + j * math.log(a) - gammaln(j + 1.0)
        w = np.exp(logw)
        if 1.0 - w.sum() <= _TAIL_TOL:
            return w
        jmax *= 2


def cdf(ph: PhaseType, x):
    """``P[v <= x] = 1 - p' exp(F x) e`` by uniformization.

    Accepts a scalar or an array of nonnegative durations.
    """
    xs = np.asarray(x, dtype=float)
    if (xs < 0).any() or not np.isfinite(xs).all():
        raise NegativeArgument("cdf argument must be finite and >= 0")
    lam = float(ph.nu.max())
    flat = xs.ravel()
    weights = [_poisson_weights(lam * xi) for xi in flat]
    jmax = max((w.size for w in weights), default=1) - 1
    s = _uniformized_terms(ph, jmax)
    out = np.array([1.0 - w @ s[: w.size] for w in weights])
    out[flat == 0.0] = 0.0  # exp(0) = I exactly; avoid rounding in the sum
    out = np.clip(out, 0.0, 1.0).reshape(xs.shape)
    return float(out) if out.ndim == 0 else out


def routing_cov(ph: PhaseType, k: int) -> np.ndarray:
    """Covariance of one routing draw: ``H^k = diag(p^k) - p^k p^k'``.

    ``k = 0`` uses the initial law ``p``; ``k >= 1`` uses row ``k`` of ``P``
    (column ``k`` of ``P'``), i.e. where a phase-``k`` completion goes next.
    """
    if not 0 <= k <= ph.K:
        raise IndexOutOfRange(f"k must lie in 0..{ph.K}, got {k}")
    pk = ph.p if k == 0 else ph.P[k - 1]
    return np.diag(pk) - np.outer(pk, pk)
