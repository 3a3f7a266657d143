"""Background noise estimation with a two-component chi mixture.

The intensity histogram of a magnitude volume is modelled as a mixture of
two scaled chi distributions: one for air (pure noise, zero signal) and a
catch-all component for tissue.  EM alternates responsibilities with an
M-step in which the mixing proportions are closed form and each component's
``(sigma, nu)`` pair is updated by alternating the closed-form sigma update
with Newton steps on nu.  The air component's ``(nu, sigma^2)`` is the noise
model used for map fitting.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .distributions import Family, NoiseModel
from .special import digamma, trigamma

__all__ = [
    "EMConfig",
    "MixtureState",
    "NoiseFit",
    "DegenerateMixtureError",
    "e_step",
    "m_step",
    "expected_loglik",
    "fit_noise",
    "otsu_threshold",
    "prepare_samples",
]

log = logging.getLogger(__name__)

LN2 = np.log(2.0)


class DegenerateMixtureError(RuntimeError):
    """A mixture component has lost (numerically) all of its mass."""


@dataclass
class EMConfig:
    max_iters: int = 2000
    tol: float = 1e-9           # stop when |d loglik| < tol * N
    select_k: bool = True       # fall back to one component when BIC prefers it
    inner_iters: int = 50
    nu_tol: float = 1e-6
    sigma_rtol: float = 1e-8
    nu_min: float = 0.5
    nu_max: float = 4096.0
    channels: float | None = None   # initial nu = 2 * channels (2 if unknown)
    max_samples: int = 2_000_000
    min_pi: float = 1e-10

    @property
    def nu0(self):
        return 2.0 * self.channels if self.channels else 2.0


@dataclass
class MixtureState:
    nu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float).copy()
        self.sigma = np.asarray(self.sigma, dtype=float).copy()
        self.pi = np.asarray(self.pi, dtype=float).copy()

    @property
    def K(self):
        return self.nu.size

    @property
    def sigma2(self):
        return self.sigma**2

    def second_moments(self):
        return self.nu * self.sigma**2

    def copy(self):
        return MixtureState(self.nu, self.sigma, self.pi)

    def scaled(self, c):
        return MixtureState(self.nu, self.sigma * c, self.pi)


@dataclass
class NoiseFit:
    state: MixtureState
    background_index: int
    history: list = field(default_factory=list)
    converged: bool = True
    n_samples: int = 0
    bic: dict = field(default_factory=dict)

    @property
    def background(self):
        k = self.background_index
        return NoiseModel(Family.NCCHI, float(self.state.nu[k]), float(self.state.sigma2[k]))

    def to_report(self):
        s = self.state
        return {
            "components": [
                {"nu": float(s.nu[k]), "sigma2": float(s.sigma2[k]), "pi": float(s.pi[k])}
                for k in range(s.K)
            ],
            "background_index": int(self.background_index),
            "background": self.background.to_dict(),
            "loglik_history": [float(v) for v in self.history],
            "converged": bool(self.converged),
            "n_samples": int(self.n_samples),
            "bic": {str(k): float(v) for k, v in self.bic.items()},
        }


def _component_logpdf(stats, state):
    # (K, N) matrix of ln pi_k + ln chi(x_n | nu_k, sigma_k), from x^2 and ln x
    x2, lx = stats
    nu, s2 = state.nu[:, None], state.sigma2[:, None]
    const = (np.log(state.pi)[:, None] + (1.0 - 0.5 * nu) * LN2 - 0.5 * nu * np.log(s2)
             - gammaln(0.5 * nu))
    return const + (nu - 1.0) * lx[None, :] - 0.5 * x2[None, :] / s2


def e_step(x, state, min_pi=0.0, stats=None):
    """Responsibilities and observed-data log-likelihood.

    Returns
    -------
    r : ndarray (K, N)
        Posterior component probabilities; columns sum to one.
    loglik : float
        Mixture log-likelihood of ``x`` under ``state``.
    """
    if stats is None:
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("e_step expects strictly positive samples")
        stats = _suff_stats(x)
    pi = np.asarray(state.pi)
    if np.any(~np.isfinite(pi)) or np.any(pi <= min_pi):
        raise DegenerateMixtureError(f"mixing proportions degenerate: {pi}")
    lp = _component_logpdf(stats, state)
    top = lp.max(axis=0)
    r = np.exp(lp - top[None, :])
    tot = r.sum(axis=0)
    r /= tot[None, :]
    return r, float(np.sum(top + np.log(tot)))


def expected_loglik(nu, sigma, nk, sx2, slx):
    """Expected complete-data log-likelihood of one chi component.

    ``nk``, ``sx2`` and ``slx`` are the responsibility-weighted count, sum of
    squares and sum of logs.
    """
    return (nk * ((1.0 - 0.5 * nu) * LN2 - nu * np.log(sigma) - gammaln(0.5 * nu))
            + (nu - 1.0) * slx - 0.5 * sx2 / sigma**2)


def _nu_newton(nu, sigma, nk, sx2, slx, lo, hi):
    # minimise -Q over nu with sigma fixed; g and h are of -Q
    g = nk * (0.5 * LN2 + np.log(sigma) + 0.5 * digamma(0.5 * nu)) - slx
    h = 0.25 * nk * trigamma(0.5 * nu)
    if not h > 0:
        raise RuntimeError(f"non-positive nu curvature {h}")
    step = g / h
    q0 = expected_loglik(nu, sigma, nk, sx2, slx)
    for _ in range(60):
        new = nu - step
        if new > 0:
            new = min(max(new, lo), hi)
            if expected_loglik(new, sigma, nk, sx2, slx) >= q0:
                return new
        step *= 0.5
    return nu


def m_step(x, r, state, inner_iters=50, nu_tol=1e-6, sigma_rtol=1e-8, nu_bounds=(0.5, 4096.0),
           stats=None):
    """One M-step for a chi mixture with responsibilities ``r`` held fixed."""
    x = np.asarray(x, dtype=float)
    if stats is None:
        stats = _suff_stats(x)
    x2, lx = stats
    nks = r.sum(axis=1)
    pi = nks / nks.sum()
    sx2s = r @ x2
    slxs = r @ lx
    nu = state.nu.copy()
    sigma = state.sigma.copy()
    lo, hi = nu_bounds
    for k in range(state.K):
        nk, sx2, slx = nks[k], sx2s[k], slxs[k]
        if nk <= 0:
            continue
        n_k, s_k = nu[k], sigma[k]
        for _ in range(inner_iters):
            s_new = np.sqrt(sx2 / (n_k * nk))
            n_new = _nu_newton(n_k, s_new, nk, sx2, slx, lo, hi)
            done = abs(n_new - n_k) < nu_tol and abs(s_new - s_k) < sigma_rtol * s_k
            n_k, s_k = n_new, s_new
            if done:
                break
        # leave sigma at its optimum for the final nu
        s_k = np.sqrt(sx2 / (n_k * nk))
        nu[k], sigma[k] = n_k, s_k
    return MixtureState(nu, sigma, pi)


def _suff_stats(x):
    return x * x, np.log(x)


def otsu_threshold(x, bins=256):
    """Intensity threshold maximising between-class variance."""
    hist, edges = np.histogram(x, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(float)
    w1 = w0[-1] - w0
    m = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m / w0
        mu1 = (m[-1] - m) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.nan_to_num(between[:-1], nan=-1.0)
    return float(edges[1:][np.argmax(between)])


def initial_state(x, nu0=2.0):
    """Otsu split, per-class second moment for sigma at fixed ``nu0``."""
    t = otsu_threshold(x)
    lo = x[x <= t]
    hi = x[x > t]
    if lo.size == 0 or hi.size == 0:
        lo, hi = np.array_split(np.sort(x), 2)
    nu = np.full(2, float(nu0))
    sigma = np.sqrt(np.array([np.mean(lo**2), np.mean(hi**2)]) / nu)
    pi = np.array([lo.size, hi.size], dtype=float) / x.size
    return MixtureState(nu, sigma, pi)


def prepare_samples(x, max_samples=2_000_000):
    """Flatten, drop zeros / non-finite values, subsample with a fixed stride."""
    x = np.asarray(x, dtype=float).ravel()
    x = x[np.isfinite(x) & (x > 0)]
    if x.size == 0:
        raise ValueError("no positive intensities to fit")
    if x.size > max_samples:
        stride = int(np.ceil(x.size / max_samples))
        x = x[::stride]
    return x


def _fit_single(x, stats, nu0, config):
    state = MixtureState([nu0], [np.sqrt(np.mean(x * x) / nu0)], [1.0])
    r = np.ones((1, x.size))
    for _ in range(config.max_iters):
        new = m_step(x, r, state, config.inner_iters, config.nu_tol, config.sigma_rtol,
                     (config.nu_min, config.nu_max), stats=stats)
        done = (abs(new.nu[0] - state.nu[0]) < config.nu_tol
                and abs(new.sigma[0] - state.sigma[0]) < config.sigma_rtol * state.sigma[0])
        state = new
        if done:
            break
    return state, e_step(x, state, stats=stats)[1]


def _bic(loglik, k, n):
    return (3 * k - 1) * np.log(n) - 2.0 * loglik


def fit_noise(x, config=None, init=None):
    """Fit the two-component chi mixture and return the background noise.

    Parameters
    ----------
    x : array_like
        Magnitude intensities (any shape).  Zeros and non-finite values are
        excluded; more than ``config.max_samples`` values are subsampled.
    config : EMConfig, optional
    init : MixtureState, optional
        Starting point; defaults to the Otsu-based initialisation.

    Returns
    -------
    NoiseFit
        ``background`` is the component with the smallest second moment
        ``nu * sigma^2``.  With ``config.select_k`` a single chi fit replaces
        the mixture when it has the lower BIC (intensities that hold only
        one population, e.g. a pure-noise volume).
    """
    config = config or EMConfig()
    x = prepare_samples(x, config.max_samples)
    n = x.size
    stats = _suff_stats(x)
    state = init.copy() if init is not None else initial_state(x, config.nu0)
    history = []
    converged = False
    best = state
    for it in range(config.max_iters):
        try:
            r, ll = e_step(x, state, config.min_pi, stats)
        except DegenerateMixtureError as err:
            warnings.warn(f"EM stopped at iteration {it}: {err}")
            break
        history.append(ll)
        best = state
        if len(history) > 1 and abs(history[-1] - history[-2]) < config.tol * n:
            converged = True
            break
        state = m_step(x, r, state, config.inner_iters, config.nu_tol, config.sigma_rtol,
                       (config.nu_min, config.nu_max), stats=stats)

    bic = {2: _bic(history[-1], 2, n)} if history else {}
    if config.select_k:
        single, ll1 = _fit_single(x, stats, config.nu0, config)
        bic[1] = _bic(ll1, 1, n)
        if not history or bic[1] <= bic[2]:
            log.info("single chi component preferred (BIC %s)", bic)
            return NoiseFit(single, 0, history or [ll1], True, n, bic)
    if not converged:
        warnings.warn("chi-mixture EM did not converge")
    bg = int(np.argmin(best.second_moments()))
    log.debug("noise fit: nu=%s sigma=%s pi=%s", best.nu, best.sigma, best.pi)
    return NoiseFit(best, bg, history, converged, n, bic)
