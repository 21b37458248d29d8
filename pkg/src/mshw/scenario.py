"""Scenario description for a sequence of G/Ph/n+GI systems.

The n-th system receives renewal arrivals at rate

    lambda_n = lambda * n - beta * mu * sqrt(n)

so that ``sqrt(n) (lambda - lambda_n / n) = beta * mu``.  Interarrival times
are ``1 / lambda_n`` times a unit-mean draw from the declared family.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable

from .phase_type import PhaseType

CRITICAL = "critical"
OVERLOADED = "overloaded"
REGIMES = (CRITICAL, OVERLOADED)
_RATE_TOL = 1e-9


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# interarrival laws (unit mean)


@dataclass(frozen=True)
class ArrivalLaw:
    """Unit-mean interarrival family with squared coefficient of variation ``scv``.

    ``family`` is one of ``exponential``, ``deterministic``, ``erlang``,
    ``hyperexponential`` (balanced means) or ``lognormal``.  ``k`` is the
    Erlang shape.
    """

    family: str
    scv: float = 1.0
    k: int = 1

    FAMILIES = ("exponential", "deterministic", "erlang", "hyperexponential", "lognormal")

    def __post_init__(self):
        fam = self.family
        if fam not in self.FAMILIES:
            raise ScenarioError(f"unknown arrival law {fam!r}")
        if fam == "exponential" and self.scv != 1.0:
            raise ScenarioError("exponential interarrivals have scv = 1")
        if fam == "deterministic" and self.scv != 0.0:
            raise ScenarioError("deterministic interarrivals have scv = 0")
        if fam == "erlang":
            if self.k < 1:
                raise ScenarioError("Erlang shape must be >= 1")
            if not math.isclose(self.scv, 1.0 / self.k):
                raise ScenarioError(f"Erlang({self.k}) has scv = 1/{self.k}")
        if fam == "hyperexponential" and not self.scv > 1.0:
            raise ScenarioError("hyperexponential interarrivals need scv > 1")
        if fam == "lognormal" and not self.scv > 0.0:
            raise ScenarioError("lognormal interarrivals need scv > 0")

    @classmethod
    def of(cls, family: str, **kw) -> "ArrivalLaw":
        if family == "exponential":
            return cls(family, 1.0)
        if family == "deterministic":
            return cls(family, 0.0)
        if family == "erlang":
            k = int(kw["k"])
            return cls(family, 1.0 / k, k)
        return cls(family, float(kw["scv"]))

    def _h2(self) -> tuple[float, float, float]:
        # balanced-means two-branch fit: probability and rates of each branch
        p1 = 0.5 * (1.0 + math.sqrt((self.scv - 1.0) / (self.scv + 1.0)))
        return p1, 2.0 * p1, 2.0 * (1.0 - p1)

    def _lognormal(self) -> tuple[float, float]:
        s2 = math.log1p(self.scv)
        return -0.5 * s2, math.sqrt(s2)

    def sampler(self, rate: float, rnd: random.Random) -> tuple[Callable[[], float], float]:
        """Return ``(draw, first)``: an interarrival sampler at ``rate`` and the
        delay until the first arrival.

        The first delay comes from the equilibrium excess law (a uniform
        fraction of a length-biased interarrival), which makes the counting
        process stationary from time 0.
        """
        scale = 1.0 / rate
        fam = self.family
        u = rnd.random()
        if fam == "exponential":
            def draw():
                return rnd.expovariate(rate)
            first = rnd.expovariate(rate)
        elif fam == "deterministic":
            def draw():
                return scale
            first = u * scale
        elif fam == "erlang":
            k = self.k
            stage = rate * k
            def draw():
                return rnd.gammavariate(k, 1.0 / stage)
            first = u * rnd.gammavariate(k + 1, 1.0 / stage)
        elif fam == "hyperexponential":
            p1, r1, r2 = self._h2()
            r1, r2 = r1 * rate, r2 * rate
            def draw():
                return rnd.expovariate(r1 if rnd.random() < p1 else r2)
            # length-biased branch choice has weights p_i / r_i
            w1 = (p1 / r1) / (p1 / r1 + (1.0 - p1) / r2)
            r = r1 if rnd.random() < w1 else r2
            first = u * rnd.gammavariate(2, 1.0 / r)
        else:
            mu_l, sigma = self._lognormal()
            mu_l += math.log(scale)
            def draw():
                return rnd.lognormvariate(mu_l, sigma)
            first = u * rnd.lognormvariate(mu_l + sigma * sigma, sigma)
        return draw, first

    def to_dict(self) -> dict:
        d = {"law": self.family}
        if self.family == "erlang":
            d["k"] = self.k
        elif self.family in ("hyperexponential", "lognormal"):
            d["scv"] = self.scv
        return d


# ---------------------------------------------------------------------------
# patience laws


@dataclass(frozen=True)
class PatienceLaw:
    """Patience-time law with ``F(0) = 0``.

    ``alpha`` is the hazard at zero, ``lim F(x)/x`` as ``x -> 0``.
    """

    family: str
    params: tuple = ()
    alpha: float = field(init=False)

    FAMILIES = ("exponential", "deterministic", "uniform", "weibull", "hyperexponential", "infinite")

    def __post_init__(self):
        fam, prm = self.family, self.params
        if fam not in self.FAMILIES:
            raise ScenarioError(f"unknown patience law {fam!r}")
        if fam == "exponential":
            (rate,) = prm
            if rate <= 0:
                raise ScenarioError("patience rate must be positive")
            alpha = rate
        elif fam == "deterministic":
            (value,) = prm
            if value <= 0:
                raise ScenarioError("deterministic patience must be positive (F(0) = 0)")
            alpha = 0.0
        elif fam == "uniform":
            (b,) = prm
            if b <= 0:
                raise ScenarioError("uniform patience needs b > 0")
            alpha = 1.0 / b
        elif fam == "weibull":
            shape, scale = prm
            if shape < 1.0 or scale <= 0:
                raise ScenarioError("Weibull patience needs shape >= 1 (finite hazard at 0)")
            alpha = 1.0 / scale if shape == 1.0 else 0.0
        elif fam == "hyperexponential":
            probs, rates = prm
            if len(probs) != 2 or len(rates) != 2:
                raise ScenarioError("hyperexponential patience has two branches")
            if min(rates) <= 0 or min(probs) < 0 or not math.isclose(sum(probs), 1.0):
                raise ScenarioError("invalid hyperexponential patience parameters")
            alpha = sum(p * r for p, r in zip(probs, rates))
        else:
            alpha = 0.0
        object.__setattr__(self, "alpha", float(alpha))

    @classmethod
    def of(cls, family: str, **kw) -> "PatienceLaw":
        if family == "exponential":
            return cls(family, (float(kw["rate"]),))
        if family == "deterministic":
            return cls(family, (float(kw["value"]),))
        if family == "uniform":
            return cls(family, (float(kw["b"]),))
        if family == "weibull":
            return cls(family, (float(kw["shape"]), float(kw["scale"])))
        if family == "hyperexponential":
            return cls(family, (tuple(map(float, kw["probs"])), tuple(map(float, kw["rates"]))))
        if family == "infinite":
            return cls(family, ())
        raise ScenarioError(f"unknown patience law {family!r}")

    @property
    def is_exponential(self) -> bool:
        return self.family == "exponential"

    def sampler(self, rnd: random.Random) -> Callable[[], float]:
        fam, prm = self.family, self.params
        if fam == "exponential":
            rate = prm[0]
            return lambda: rnd.expovariate(rate)
        if fam == "deterministic":
            value = prm[0]
            return lambda: value
        if fam == "uniform":
            b = prm[0]
            return lambda: b * rnd.random()
        if fam == "weibull":
            shape, scale = prm
            return lambda: rnd.weibullvariate(scale, shape)
        if fam == "hyperexponential":
            (p1, _), (r1, r2) = prm
            return lambda: rnd.expovariate(r1 if rnd.random() < p1 else r2)
        return lambda: math.inf

    def to_dict(self) -> dict:
        fam, prm = self.family, self.params
        keys = {
            "exponential": ("rate",),
            "deterministic": ("value",),
            "uniform": ("b",),
            "weibull": ("shape", "scale"),
            "hyperexponential": ("probs", "rates"),
            "infinite": (),
        }[fam]
        d = {"law": fam}
        for key, val in zip(keys, prm):
            d[key] = list(val) if isinstance(val, tuple) else val
        return d


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    ph: PhaseType
    arrival: ArrivalLaw
    patience: PatienceLaw
    lam: float
    beta: float = 0.0
    regime: str = CRITICAL
    name: str = ""

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ScenarioError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ScenarioError("lambda must be positive and finite")
        if not math.isfinite(self.beta):
            raise ScenarioError("beta must be finite")
        mu = self.ph.mu
        if self.regime == CRITICAL and abs(self.lam - mu) > _RATE_TOL * max(1.0, mu):
            raise ScenarioError(f"critical regime needs lambda = mu = {mu:.12g}, got {self.lam}")
        if self.regime == OVERLOADED:
            if not self.lam > mu * (1.0 + _RATE_TOL):
                raise ScenarioError(f"overloaded regime needs lambda > mu = {mu:.12g}")
            if not self.patience.is_exponential:
                raise ScenarioError("overloaded regime requires exponential patience")

    @property
    def mu(self) -> float:
        return self.ph.mu

    @property
    def alpha(self) -> float:
        return self.patience.alpha

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    @property
    def scv(self) -> float:
        return self.arrival.scv

    @property
    def q(self) -> float:
        """Fluid queue level per server; zero when critically loaded."""
        if self.regime == CRITICAL:
            return 0.0
        return (self.lam - self.mu) / self.alpha

    @property
    def K(self) -> int:
        return self.ph.K

    def arrival_rate(self, n: int) -> float:
        rate = self.lam * n - self.beta * self.mu * math.sqrt(n)
        if not rate > 0:
            raise ScenarioError(f"arrival rate for n={n} is not positive ({rate})")
        return rate

    @staticmethod
    def beta_for_rate(ph: PhaseType, lam: float, n: int, rate: float) -> float:
        """The beta that makes ``arrival_rate(n) == rate``."""
        return (lam * n - rate) / (ph.mu * math.sqrt(n))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "ph": self.ph.to_dict(),
            "arrival": self.arrival.to_dict(),
            "patience": self.patience.to_dict(),
            "lambda": self.lam,
            "beta": self.beta,
            "regime": self.regime,
        }
