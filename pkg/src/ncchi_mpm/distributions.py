"""Chi, noncentral-chi and Gaussian intensity models.

All densities are parameterised by the common per-channel variance
``sigma2`` and, for the chi families, the degrees of freedom ``nu``.  The
noncentral-chi noncentrality ``mu`` is the norm of the channel means, so
``nu = 2`` gives the Rice distribution and ``mu = 0`` gives the chi
distribution.
"""

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .special import DomainError, laguerre_half, log_bessel_i

__all__ = [
    "Family",
    "NoiseModel",
    "chi_logpdf",
    "ncchi_logpdf",
    "gaussian_logpdf",
    "ncchi_mean",
    "SMALL_Z",
]

LN2 = np.log(2.0)

# Below this Bessel argument the nc-chi density uses its chi limit.
SMALL_Z = 1e-6


class Family(str, enum.Enum):
    GAUSSIAN = "gauss"
    CHI = "chi"
    NCCHI = "ncchi"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"gaussian": "gauss", "nc-chi": "ncchi", "noncentral-chi": "ncchi"}
        value = str(value).lower()
        return cls(aliases.get(value, value))


@dataclass(frozen=True)
class NoiseModel:
    """Stationary noise description: family, degrees of freedom, variance."""

    family: Family = Family.NCCHI
    nu: float = 2.0
    sigma2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.family is not Family.GAUSSIAN and not (self.nu > 0 and np.isfinite(self.nu)):
            raise ValueError(f"nu must be positive, got {self.nu}")

    @property
    def sigma(self):
        return float(np.sqrt(self.sigma2))

    def with_family(self, family):
        return NoiseModel(Family.parse(family), self.nu, self.sigma2)

    def logpdf(self, x, mu=0.0):
        if self.family is Family.GAUSSIAN:
            return gaussian_logpdf(x, mu, self.sigma2)
        if self.family is Family.CHI:
            return chi_logpdf(x, self.nu, self.sigma2)
        return ncchi_logpdf(x, mu, self.nu, self.sigma2)

    def mean(self, mu):
        """Expected magnitude for noise-free signal ``mu``."""
        if self.family is Family.GAUSSIAN:
            return np.asarray(mu, dtype=float)
        return ncchi_mean(mu, self.nu, self.sigma2)

    def to_dict(self):
        return {"family": self.family.value, "nu": float(self.nu), "sigma2": float(self.sigma2)}

    @classmethod
    def from_dict(cls, d):
        return cls(Family.parse(d.get("family", "ncchi")), float(d.get("nu", 2.0)), float(d["sigma2"]))


def chi_logpdf(x, nu, sigma2):
    """Log-density of the scaled chi distribution.

    ``(1 - nu/2) ln 2 + (nu - 1) ln x - x^2 / (2 sigma2) - nu ln sigma - lgamma(nu/2)``
    """
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(x < 0):
        raise DomainError("chi_logpdf requires x >= 0")
    x, nu, sigma2 = np.broadcast_arrays(x, nu, sigma2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
        out = ((1.0 - 0.5 * nu) * LN2 + (nu - 1.0) * lx - 0.5 * x * x / sigma2
               - 0.5 * nu * np.log(sigma2) - gammaln(0.5 * nu))
    zero = x == 0
    if np.any(zero):
        # density vanishes at 0 for nu > 1, is finite for nu == 1, unbounded below
        if np.any(nu[zero] < 1):
            raise DomainError("log-density at x = 0 is unbounded for nu < 1")
        out = np.where(zero & (nu > 1), -np.inf, out)
    return out[()] if out.ndim == 0 else out


def ncchi_logpdf(x, mu, nu, sigma2):
    """Log-density of the scaled noncentral-chi distribution.

    ``-(x^2 + mu^2)/(2 sigma2) + (nu/2) ln x + (1 - nu/2) ln mu - ln sigma2
    + ln I_{nu/2-1}(mu x / sigma2)``.  When ``mu x / sigma2 < SMALL_Z`` the
    Bessel term is replaced by its two-term small-argument expansion, which
    removes the ``ln mu`` singularity and joins the chi density continuously.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(x < 0):
        raise DomainError("ncchi_logpdf requires x >= 0")
    if np.any(mu < 0):
        raise DomainError("ncchi_logpdf requires mu >= 0")
    x, mu, nu, sigma2 = np.broadcast_arrays(x, mu, nu, sigma2)
    z = mu * x / sigma2
    small = z < SMALL_Z
    out = np.empty(x.shape)

    if np.any(small):
        xs, ms, ns, ss = x[small], mu[small], nu[small], sigma2[small]
        zs = z[small]
        base = chi_logpdf(xs, ns, ss)
        # I_v(z) ~ (z/2)^v / Gamma(v+1) * (1 + z^2 / (4 (v + 1)))
        out[small] = base - 0.5 * ms * ms / ss + np.log1p(zs * zs / (2.0 * ns))

    big = ~small
    if np.any(big):
        xb, mb, nb, sb, zb = x[big], mu[big], nu[big], sigma2[big], z[big]
        half = 0.5 * nb
        # exp(-(x^2 + mu^2) / 2 sigma2) I(z) = exp(-(x - mu)^2 / 2 sigma2) I(z) e^-z
        d = xb - mb
        out[big] = (-0.5 * d * d / sb + half * np.log(xb)
                    + (1.0 - half) * np.log(mb) - np.log(sb)
                    + log_bessel_i(half - 1.0, zb, scaled=True))
    return out[()] if out.ndim == 0 else out


def gaussian_logpdf(x, mu, sigma2):
    x = np.asarray(x, dtype=float)
    r = x - np.asarray(mu, dtype=float)
    out = -0.5 * r * r / sigma2 - 0.5 * np.log(2.0 * np.pi * np.asarray(sigma2, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def ncchi_mean(mu, nu, sigma2):
    """Expected magnitude ``sigma sqrt(pi/2) L_{1/2}^{(nu/2-1)}(-mu^2 / (2 sigma2))``.

    At least ``mu`` for ``nu >= 1``; tends to ``mu`` at high SNR and to the chi mean at
    ``mu = 0``.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise DomainError("ncchi_mean requires mu >= 0")
    nu = np.asarray(nu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    lag = laguerre_half(0.5 * nu - 1.0, -0.5 * mu * mu / sigma2)
    return np.sqrt(sigma2) * np.sqrt(0.5 * np.pi) * lag
