"""Integral-equation maps on grid paths.

Given an input path ``y = (y1, y2)`` with ``y1`` scalar and ``y2`` a
K-vector, the general map returns the unique ``x = (x1, x2)`` with

    x1(t) = y1(t) + int_0^t h1(x(s)) ds
    x2(t) = y2(t) + int_0^t h2(x(s)) ds + g(x1(t))

Two specializations matter for many-server queues with abandonment:

* ``phi``: h1 = -alpha x1^+ - e'R x2, h2 = -(I - p e')R x2, g = -p x1^-
* ``psi``: h1 = -alpha x1 - e'R x2,   h2 = -(I - p e')R x2, g = 0

Solutions are built by Picard iteration.  Over long horizons a single global
iteration converges slowly (the contraction only kicks in after roughly
``(c + c^2) T`` sweeps), so the horizon is cut into windows short enough that
each window contracts quickly, and windows are solved left to right.  Leading
axes of the input are treated as a batch of independent paths.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

PHI = "phi"
PSI = "psi"
UPSILON = "upsilon"
VARIANTS = (PHI, PSI, UPSILON)

TRAPEZOID = "trapezoid"
LEFT = "left"

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
# target (c + c^2) * window length; keeps per-window Picard error ~ 2^k / k!
_WINDOW_BUDGET = 2.0


class NoConvergence(RuntimeError):
    pass


class GridPathError(ValueError):
    pass


def grid_size(dt: float, horizon: float) -> int:
    """Number of grid points ``floor(T/dt) + 1`` with a little slack for rounding."""
    if not (dt > 0 and horizon > 0 and math.isfinite(dt) and math.isfinite(horizon)):
        raise GridPathError(f"need dt > 0 and horizon > 0, got dt={dt}, horizon={horizon}")
    return int(math.floor(horizon / dt + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class GridPath:
    """A (K+1)-dimensional path sampled at ``0, dt, 2dt, ...``.

    ``values`` has shape ``(..., N, K+1)``; column 0 is the scalar ``x``/``u``
    component and columns ``1..K`` the vector ``z``/``v`` component.  Leading
    axes, if any, index independent paths.
    """

    values: np.ndarray
    dt: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim < 2 or vals.shape[-2] < 2 or vals.shape[-1] < 2:
            raise GridPathError(f"values must have shape (..., N>=2, K+1>=2), got {vals.shape}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise GridPathError(f"dt must be positive, got {self.dt}")
        if not np.isfinite(vals).all():
            raise GridPathError("path values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_parts(cls, x, z, dt: float) -> "GridPath":
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if z.ndim == x.ndim:
            z = z[..., None]
        return cls(np.concatenate([x[..., None], z], axis=-1), dt)

    @classmethod
    def zeros(cls, dt: float, horizon: float, K: int, batch: tuple = ()) -> "GridPath":
        return cls(np.zeros(batch + (grid_size(dt, horizon), K + 1)), dt)

    @property
    def N(self) -> int:
        return self.values.shape[-2]

    @property
    def K(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def horizon(self) -> float:
        return (self.N - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N) * self.dt

    @property
    def x(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def z(self) -> np.ndarray:
        return self.values[..., 1:]

    def __mul__(self, a: float) -> "GridPath":
        return GridPath(self.values * a, self.dt)

    __rmul__ = __mul__

    def sup_distance(self, other: "GridPath") -> np.ndarray:
        """``sup_t max_i |self - other|`` per path in the batch."""
        return np.abs(self.values - other.values).max(axis=(-2, -1))

    def to_csv(self, path) -> None:
        if self.values.ndim != 2:
            raise GridPathError("only a single path can be written to CSV")
        header = ["t", "x"] + [f"z{k + 1}" for k in range(self.K)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "GridPath":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:2] != ["t", "x"] or any(h != f"z{k + 1}" for k, h in enumerate(header[2:])):
            raise GridPathError(f"unexpected CSV header {header}")
        data = np.array(body, dtype=float)
        if data.shape[0] < 2:
            raise GridPathError("a grid path needs at least two rows")
        t = data[:, 0]
        dt = float(t[1] - t[0])
        if not np.allclose(np.diff(t), dt, rtol=1e-6, atol=1e-12) or abs(t[0]) > 1e-12:
            raise GridPathError("time column must be a uniform grid starting at 0")
        return cls(data[:, 1:], dt)


# ---------------------------------------------------------------------------
# coefficients


Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MapCoefficients:
    """Right-hand side of the integral equations.

    Use :meth:`phi`, :meth:`psi` or :meth:`upsilon` to build instances.  For
    the general variant ``h1(x1, z)`` returns shape ``x1.shape``,
    ``h2(x1, z)`` and ``g(x1)`` return ``z.shape``; all must be vectorised
    over leading axes and Lipschitz with the declared constant ``c``.
    """

    variant: str
    K: int
    alpha: float = 0.0
    p: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    h1: Optional[Field] = field(default=None, repr=False)
    h2: Optional[Field] = field(default=None, repr=False)
    g: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    c: float = 0.0

    @classmethod
    def _linear(cls, variant, alpha, p, R) -> "MapCoefficients":
        p = np.asarray(p, dtype=float)
        R = np.atleast_2d(np.asarray(R, dtype=float))
        K = p.shape[0]
        if R.shape != (K, K):
            raise ValueError(f"R must be {K}x{K}, got {R.shape}")
        if not alpha >= 0 or not math.isfinite(alpha):
            raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("p must be a probability vector")
        eR = R.sum(axis=0)
        GR = R - np.outer(p, eR)
        c = max(alpha + np.abs(eR).sum(), np.abs(GR).sum(axis=1).max())
        if variant == PHI:
            c = max(c, p.max())
        return cls(variant, K, float(alpha), p, R, c=float(c))

    @classmethod
    def phi(cls, alpha: float, p, R) -> "MapCoefficients":
        return cls._linear(PHI, alpha, p, R)

    @classmethod
    def psi(cls, alpha: float, p, R) -> "MapCoefficients":
        return cls._linear(PSI, alpha, p, R)

    @classmethod
    def for_phase_type(cls, variant: str, alpha: float, ph) -> "MapCoefficients":
        return cls._linear(variant, alpha, ph.p, ph.R)

    @classmethod
    def upsilon(cls, K: int, h1: Field, h2: Field, g, c: float) -> "MapCoefficients":
        if not (c > 0 and math.isfinite(c)):
            raise ValueError("declared Lipschitz constant must be positive and finite")
        return cls(UPSILON, K, h1=h1, h2=h2, g=g, c=float(c))

    @property
    def lipschitz_bound(self) -> Callable[[float], float]:
        """``T -> (1 + c) exp((c + c^2) T)``, the sup-norm Lipschitz constant of the map."""
        c = self.c
        return lambda T: (1.0 + c) * math.exp((c + c * c) * T)

    # -- vector field ------------------------------------------------------

    def field(self, x: np.ndarray) -> np.ndarray:
        """Stacked ``(h1, h2)`` evaluated at ``x`` of shape ``(..., K+1)``."""
        x1, z = x[..., 0], x[..., 1:]
        if self.variant == UPSILON:
            return np.concatenate([np.asarray(self.h1(x1, z))[..., None], self.h2(x1, z)], axis=-1)
        Rz = z @ self.R.T
        eRz = Rz.sum(axis=-1)
        lin = x1 if self.variant == PSI else np.maximum(x1, 0.0)
        h1 = -self.alpha * lin - eRz
        h2 = -(Rz - self.p * eRz[..., None])
        return np.concatenate([h1[..., None], h2], axis=-1)

    def jump(self, x1: np.ndarray) -> Optional[np.ndarray]:
        """``g(x1)`` or ``None`` when ``g`` vanishes identically."""
        if self.variant == PSI:
            return None
        if self.variant == PHI:
            return -np.maximum(-x1, 0.0)[..., None] * self.p
        return np.asarray(self.g(x1))


# ---------------------------------------------------------------------------
# Picard iteration


def _cumint(h: np.ndarray, dt: float, quadrature: str) -> np.ndarray:
    """Running integral along axis -2, starting at 0."""
    out = np.zeros_like(h)
    if quadrature == TRAPEZOID:
        np.cumsum(0.5 * dt * (h[..., 1:, :] + h[..., :-1, :]), axis=-2, out=out[..., 1:, :])
    else:
        np.cumsum(dt * h[..., :-1, :], axis=-2, out=out[..., 1:, :])
    return out


def _apply(coeff: MapCoefficients, y: np.ndarray, integral: np.ndarray) -> np.ndarray:
    x = y + integral
    g = coeff.jump(x[..., 0])
    if g is not None:
        x[..., 1:] += g
    return x


def window_length(coeff: MapCoefficients, dt: float) -> int:
    """Steps per Picard window, chosen so that ``(c + c^2) * m * dt`` is about 2."""
    lc = coeff.c + coeff.c**2
    if lc == 0:
        return 1 << 30
    return max(1, int(_WINDOW_BUDGET / (lc * dt)))


def picard_solve(
    coeff: MapCoefficients,
    y: GridPath,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    quadrature: str = TRAPEZOID,
    window: Optional[int] = None,
) -> GridPath:
    """Solve ``x = y + int h(x) + g(x1)`` on the grid of ``y``.

    Iteration starts from ``x0 = y`` (continued from the solved prefix on
    later windows) and stops once the sup-norm change on the window is at
    most ``tol * scale``, where ``scale = max(|y|_T, |x|_T)`` for that path.
    The relative stopping rule keeps the solver exactly positively
    homogeneous whenever the map is.  ``quadrature`` is ``"trapezoid"`` for
    continuous inputs or ``"left"`` for piecewise-constant (jumpy) inputs.

    Raises :class:`NoConvergence` if a window fails to settle within
    ``max_iter`` sweeps or the final global residual exceeds ``2 * tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if quadrature not in (TRAPEZOID, LEFT):
        raise ValueError(f"unknown quadrature {quadrature!r}")
    if y.K != coeff.K:
        raise GridPathError(f"path has K={y.K} but coefficients have K={coeff.K}")

    batch_shape = y.values.shape[:-2]
    N, d = y.N, y.K + 1
    yv = y.values.reshape((-1, N, d))
    B = yv.shape[0]
    dt = y.dt
    m = window or window_length(coeff, dt)

    ysup = np.abs(yv).max(axis=(1, 2))
    x = np.empty_like(yv)
    x[:, 0] = _apply(coeff, yv[:, 0].copy(), np.zeros((B, d)))
    xsup = np.maximum(ysup, np.abs(x[:, 0]).max(axis=-1))
    acc = np.zeros((B, d))  # int_0^{t_a} h(x)

    a = 0
    while a < N - 1:
        b = min(a + m, N - 1)
        yw = yv[:, a : b + 1]
        # continue the prefix: shift y so that the window starts at x(t_a)
        xw = yw + (x[:, a] - yw[:, 0])[:, None, :]
        for it in range(max_iter):
            integral = acc[:, None, :] + _cumint(coeff.field(xw), dt, quadrature)
            new = _apply(coeff, yw.copy(), integral)
            change = np.abs(new - xw).max(axis=(1, 2))
            xw = new
            scale = np.maximum(xsup, np.abs(new).max(axis=(1, 2)))
            if (change <= tol * np.maximum(scale, np.finfo(float).tiny)).all():
                break
        else:
            raise NoConvergence(
                f"window [{a * dt:.6g}, {b * dt:.6g}] did not settle in {max_iter} sweeps "
                f"(change {change.max():.3g}); refine the grid or check the Lipschitz constant"
            )
        x[:, a : b + 1] = xw
        xsup = scale
        acc = integral[:, -1]
        a = b

    out = GridPath(x.reshape(batch_shape + (N, d)), dt)
    resid = fixed_point_residual(coeff, y, out, quadrature)
    limit = 2.0 * tol * np.maximum(np.maximum(ysup, xsup), np.finfo(float).tiny)
    if (resid.reshape(-1) > limit).any():
        raise NoConvergence(f"fixed-point residual {resid.max():.3g} exceeds 2*tol")
    return out


def picard_sweep(coeff: MapCoefficients, y: GridPath, x: GridPath, quadrature: str = TRAPEZOID) -> GridPath:
    """One global Picard step ``x -> y + int h(x) + g(x1)``."""
    integral = _cumint(coeff.field(x.values), y.dt, quadrature)
    return GridPath(_apply(coeff, y.values.copy(), integral), y.dt)


def fixed_point_residual(coeff: MapCoefficients, y: GridPath, x: GridPath, quadrature: str = TRAPEZOID) -> np.ndarray:
    """``|x - T(x)|_T`` per path, with ``T`` one global Picard sweep."""
    return picard_sweep(coeff, y, x, quadrature).sup_distance(x)


def _solve_parts(coeff, u, v, dt, **kw):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != u.shape + (coeff.K,):
        raise GridPathError(f"v must have shape {u.shape + (coeff.K,)}, got {v.shape}")
    sol = picard_solve(coeff, GridPath.from_parts(u, v, dt), **kw)
    return sol.x, sol.z


def phi_map(u, v, coeff: MapCoefficients, dt: float, **kw):
    """``(x, z) = Phi(u, v)``.

    ``u`` has shape ``(..., N)`` and ``v`` shape ``(..., N, K)``.  Extra
    keywords go to :func:`picard_solve`.
    """
    if coeff.variant != PHI:
        raise ValueError("phi_map needs phi coefficients")
    return _solve_parts(coeff, u, v, dt, **kw)


def psi_map(u, v, coeff: MapCoefficients, dt: float, **kw):
    """``(x, z) = Psi(u, v)``; same conventions as :func:`phi_map`."""
    if coeff.variant != PSI:
        raise ValueError("psi_map needs psi coefficients")
    return _solve_parts(coeff, u, v, dt, **kw)
