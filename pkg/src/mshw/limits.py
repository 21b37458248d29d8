"""Fluid and diffusion limits of the many-server queue with abandonment.

The diffusion limit is driven by independent Brownian motions:

* ``E``      arrival fluctuation, variance ``lambda c_a^2`` per unit time
* ``Phi^0``  first-phase routing, covariance ``mu H^0``
* ``Phi^k``  routing after phase k, covariance ``nu_k gamma_k H^k``
* ``S``      phase-clock fluctuation, variance ``nu_k gamma_k`` in coordinate k
* ``G``      abandonment fluctuation (overloaded only), variance ``alpha q``

assembled into

    M = sum_k Phi^k - (I - P') S
    U = X(0) + E - mu beta t + e'M  [- G]
    V = (I - p e') Z(0) + Phi^0 + (I - p e') M

and mapped to ``(X, Z)`` by Phi (critical) or Psi (overloaded).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ode_maps
from .ode_maps import GridPath, MapCoefficients, grid_size
from .phase_type import routing_cov
from .scenario import CRITICAL, OVERLOADED, Scenario

LIMIT_KEY = 0x4C494D  # spawn-key prefix keeping limit streams apart from simulation streams
_PSD_TOL = 1e-10
_ZERO_EIG = 1e-12


class NonPSDCovariance(ValueError):
    pass


class WrongRegime(ValueError):
    pass


@dataclass(frozen=True)
class FluidLimit:
    """Rates of the fluid-scaled counting processes and levels of the state."""

    B_rate: float
    D_rate: float
    E_rate: float
    T_rate: np.ndarray
    X_level: float
    Z_level: np.ndarray


def fluid(sc: Scenario) -> FluidLimit:
    return FluidLimit(
        B_rate=sc.mu,
        D_rate=sc.mu,
        E_rate=sc.lam,
        T_rate=sc.ph.gamma.copy(),
        X_level=sc.q,
        Z_level=sc.ph.gamma.copy(),
    )


def psd_factor(cov: np.ndarray, null: Optional[np.ndarray] = None) -> np.ndarray:
    """``L`` with ``L L' = cov`` by eigendecomposition.

    Eigenvalues in ``[-1e-10, 1e-12 * scale]`` are treated as exact zeros.
    If ``null`` is given, the columns of ``L`` are projected onto its
    orthogonal complement so that ``null' L`` vanishes to rounding.
    """
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.size and w.min() < -_PSD_TOL:
        raise NonPSDCovariance(f"covariance has eigenvalue {w.min():.3g}")
    scale = max(float(np.abs(w).max()) if w.size else 0.0, 1.0)
    keep = w > _ZERO_EIG * scale
    L = V[:, keep] * np.sqrt(w[keep])
    if null is not None:
        u = null / np.linalg.norm(null)
        L = L - np.outer(u, u @ L)
    return L


def _initial_cov(sc: Scenario) -> np.ndarray:
    g = sc.ph.gamma
    return np.diag(g) - np.outer(g, g)


@dataclass(frozen=True, eq=False)
class DriverSet:
    """Sampled driver paths on the grid ``0, dt, ..., horizon``.

    Arrays carry a leading replication axis.  ``Phi[..., k, :]`` is the
    routing noise after phase ``k`` (``Phi^{k+1}`` in one-based labels).
    """

    dt: float
    E: np.ndarray
    Phi0: np.ndarray
    Phi: np.ndarray
    S: np.ndarray
    G: np.ndarray
    M: np.ndarray
    U: np.ndarray
    V: np.ndarray
    X0: np.ndarray
    Z0: np.ndarray
    regime: str

    @property
    def reps(self) -> int:
        return self.U.shape[0]

    @property
    def N(self) -> int:
        return self.U.shape[1]

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.N) * self.dt

    def inputs(self) -> GridPath:
        return GridPath.from_parts(self.U, self.V, self.dt)


def limit_rng(seed: int, chunk: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(LIMIT_KEY, int(chunk))))


def sample_drivers(
    sc: Scenario,
    dt: float,
    horizon: float,
    seed: int,
    reps: int = 1,
    chunk: int = 0,
    noise: float = 1.0,
    initial: str = "stationary",
) -> DriverSet:
    """Draw ``reps`` independent driver sets.

    ``noise`` scales every Brownian driver (0 gives the deterministic
    skeleton).  ``initial`` is ``"stationary"`` for ``X(0) = 0`` and
    ``Z(0) ~ N(0, diag(gamma) - gamma gamma')`` or ``"zero"`` for
    ``X(0) = Z(0) = 0``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if initial not in ("stationary", "zero"):
        raise ValueError(f"unknown initial condition {initial!r}")
    ph = sc.ph
    K = ph.K
    N = grid_size(dt, horizon)
    t = np.arange(N) * dt
    rng = limit_rng(seed, chunk)
    e = np.ones(K)

    def brownian(L, rate, shape):
        # cumulative sums of N(0, rate dt L L') increments, starting at 0
        out = np.zeros(shape + (N, L.shape[0]))
        if L.shape[1] and rate > 0 and noise:
            inc = rng.standard_normal(shape + (N - 1, L.shape[1])) @ L.T
            np.cumsum(inc * (noise * math.sqrt(rate * dt)), axis=-2, out=out[..., 1:, :])
        return out

    E = brownian(np.ones((1, 1)), sc.lam * sc.scv, (reps,))[..., 0]
    Phi0 = brownian(psd_factor(routing_cov(ph, 0), null=e), sc.mu, (reps,))
    Phi = np.zeros((reps, N, K, K))
    for k in range(K):
        Hk = routing_cov(ph, k + 1)
        Phi[:, :, k, :] = brownian(psd_factor(Hk), ph.nu[k] * ph.gamma[k], (reps,))
    S = brownian(np.diag(np.sqrt(ph.nu * ph.gamma)), 1.0, (reps,))
    if sc.regime == OVERLOADED:
        G = brownian(np.ones((1, 1)), sc.alpha * sc.q, (reps,))[..., 0]
    else:
        G = np.zeros((reps, N))

    M = Phi.sum(axis=2) - S @ (np.eye(K) - ph.P)
    if initial == "stationary":
        L0 = psd_factor(_initial_cov(sc), null=e)
        Z0 = rng.standard_normal((reps, L0.shape[1])) @ L0.T if L0.shape[1] else np.zeros((reps, K))
    else:
        Z0 = np.zeros((reps, K))
    X0 = np.zeros(reps)

    U = X0[:, None] + E - sc.mu * sc.beta * t + M.sum(axis=2) - G
    Gp = np.eye(K) - np.outer(ph.p, e)
    V = (Z0 @ Gp.T)[:, None, :] + Phi0 + M @ Gp.T
    return DriverSet(dt, E, Phi0, Phi, S, G, M, U, V, X0, Z0, sc.regime)


@dataclass(frozen=True, eq=False)
class LimitPath:
    """Limit-process sample paths with a leading replication axis.

    ``X`` is centred at the fluid level (``X - n q`` scaled), ``Z`` at
    ``n gamma``.  ``A`` is the abandonment limit ``alpha int X^+``.
    """

    dt: float
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    A: np.ndarray
    mu: float
    p: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.X.shape[-1]) * self.dt

    @property
    def W(self) -> np.ndarray:
        """Virtual-wait limit ``X^+ / mu``."""
        return np.maximum(self.X, 0.0) / self.mu

    def to_csv(self, path, rep: int = 0) -> None:
        """Write one replication with the simulator's column layout.

        Queue columns hold ``p X^+``; counting-process columns without a
        limit counterpart are left as NaN.
        """
        K = self.Z.shape[-1]
        X, Z, A, W = self.X[rep], self.Z[rep], self.A[rep], self.W[rep]
        Q = np.maximum(X, 0.0)[:, None] * self.p
        head = (
            ["t", "X"]
            + [f"Z{k + 1}" for k in range(K)]
            + [f"Q{k + 1}" for k in range(K)]
            + ["A", "B", "D", "W", "AQ"]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for i, t in enumerate(self.grid):
                w.writerow(
                    [repr(float(t)), repr(float(X[i]))]
                    + [repr(float(v)) for v in Z[i]]
                    + [repr(float(v)) for v in Q[i]]
                    + [repr(float(A[i])), "nan", "nan", repr(float(W[i])), "0"]
                )


def _cumtrapz(f: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(f)
    np.cumsum(0.5 * dt * (f[..., 1:] + f[..., :-1]), axis=-1, out=out[..., 1:])
    return out


def map_coefficients(sc: Scenario) -> MapCoefficients:
    variant = ode_maps.PHI if sc.regime == CRITICAL else ode_maps.PSI
    return MapCoefficients.for_phase_type(variant, sc.alpha, sc.ph)


def diffusion_path(
    sc: Scenario,
    seed: int,
    dt: float = 1e-3,
    horizon: float = 10.0,
    reps: int = 1,
    chunk: int = 0,
    drivers: Optional[DriverSet] = None,
    **solver,
) -> LimitPath:
    """Sample drivers (unless given) and map them to the limit ``(X, Z)``.

    Critical scenarios use Phi, overloaded ones Psi.  Extra keywords go to
    :func:`ode_maps.picard_solve`.
    """
    if drivers is None:
        drivers = sample_drivers(sc, dt, horizon, seed, reps=reps, chunk=chunk)
    coeff = map_coefficients(sc)
    sol = ode_maps.picard_solve(coeff, drivers.inputs(), **solver)
    X, Z = sol.x, sol.z
    p = sc.ph.p
    Y = Z + np.maximum(X, 0.0)[..., None] * p
    A = sc.alpha * _cumtrapz(np.maximum(X, 0.0), drivers.dt)
    return LimitPath(drivers.dt, X, Z, Y, A, sc.mu, p.copy())


def y_sde_path(sc: Scenario, drivers: DriverSet) -> LimitPath:
    """Euler scheme for ``Y`` on the grid of ``drivers``.

        Y(t) = w(t) - R int Y + (R - alpha I) p int (e'Y)^+

    with ``w = V + p U`` (equivalently ``Y(0) - beta mu p t + Phi^0 + p E + M``).
    ``(X, Z)`` are recovered as ``X = e'Y`` and ``Z = Y - p X^+``.
    """
    if sc.regime != CRITICAL:
        raise WrongRegime("the Y equation describes the critical regime only")
    ph = sc.ph
    R, p = ph.R, ph.p
    Rp = (R - sc.alpha * np.eye(ph.K)) @ p
    dt = drivers.dt
    w = drivers.V + drivers.U[..., None] * p
    dw = np.diff(w, axis=1)
    Y = np.empty_like(w)
    y = w[:, 0].copy()
    Y[:, 0] = y
    RT = R.T
    for i in range(dw.shape[1]):
        xp = np.maximum(y.sum(axis=1), 0.0)
        y = y + dw[:, i] + dt * (np.outer(xp, Rp) - y @ RT)
        Y[:, i + 1] = y
    X = Y.sum(axis=2)
    Z = Y - np.maximum(X, 0.0)[..., None] * p
    A = sc.alpha * _cumtrapz(np.maximum(X, 0.0), dt)
    return LimitPath(dt, X, Z, Y, A, sc.mu, p.copy())


def driver_covariance(sc: Scenario) -> tuple[float, np.ndarray]:
    """Per-unit-time variance of ``U`` and covariance of ``M`` implied by the drivers."""
    ph = sc.ph
    K = ph.K
    vg = ph.nu * ph.gamma
    covM = sum(vg[k] * routing_cov(ph, k + 1) for k in range(K))
    IP = np.eye(K) - ph.P.T
    covM = covM + IP @ np.diag(vg) @ IP.T
    e = np.ones(K)
    varU = sc.lam * sc.scv + e @ covM @ e
    if sc.regime == OVERLOADED:
        varU += sc.alpha * sc.q
    return float(varU), covM
