"""Special functions used by the chi / noncentral-chi likelihoods.

Everything here is vectorised over numpy arrays and works in float64.
Bessel functions are evaluated through their exponentially scaled form so
that arguments of order 1e5 (high-SNR voxels) do not overflow.
"""

import numpy as np
from scipy import special as sc

__all__ = [
    "DomainError",
    "log_bessel_i",
    "bessel_ratio",
    "digamma",
    "trigamma",
    "laguerre_half",
]


class DomainError(ValueError):
    """Argument outside the domain a function supports."""


def _check(cond, msg):
    if not np.all(cond):
        raise DomainError(msg)


def _log_bessel_series(v, z, nterms=500):
    # log I_v(z) = v log(z/2) - lgamma(v+1) + log sum_k (z^2/4)^k / (k! (v+1)_k)
    q = 0.25 * z * z
    term = np.ones_like(z)
    acc = np.ones_like(z)
    for k in range(1, nterms):
        term = term * q / (k * (v + k))
        acc = acc + term
        if np.all(term <= 1e-17 * acc):
            break
    with np.errstate(divide="ignore"):
        return v * np.log(0.5 * z) - sc.gammaln(v + 1.0) + np.log(acc)


_HANKEL_MIN = 1e8     # ive returns nan beyond ~2**31


def _log_bessel_hankel(v, z, nterms=8):
    # large-argument expansion: I_v(z) ~ e^z / sqrt(2 pi z) * sum_k (-1)^k a_k(v) / z^k;
    # returns log(I_v(z) e^-z)
    m = 4.0 * v * v
    term = np.ones_like(z)
    acc = np.ones_like(z)
    for k in range(1, nterms):
        term = -term * (m - (2 * k - 1) ** 2) / (k * 8.0 * z)
        acc = acc + term
    return -0.5 * np.log(2.0 * np.pi * z) + np.log(acc)


def log_bessel_i(order, z, scaled=False):
    """Logarithm of the modified Bessel function of the first kind.

    Parameters
    ----------
    order : float or array_like
        Order, must be > -1.
    z : float or array_like
        Argument, must be >= 0.
    scaled : bool
        Return ``log I_order(z) - z`` instead, without forming the large
        terms that cancel when the caller subtracts ``z`` itself.

    Returns
    -------
    ndarray or float
        ``log I_order(z)``.  Uses ``ive`` (Amos); where that fails it falls
        back to a log-space power series (large order, small z) or to the
        large-argument expansion (z beyond ``ive``'s range).
    """
    v = np.asarray(order, dtype=float)
    z = np.asarray(z, dtype=float)
    _check(v > -1, "Bessel order must be > -1")
    _check(z >= 0, "Bessel argument must be >= 0")
    v, z = np.broadcast_arrays(v, z)
    out = np.empty(v.shape)
    zero = z == 0
    # I_v(0) = 1 for v == 0, 0 for v > 0, +inf for -1 < v < 0
    out[zero] = np.where(v[zero] == 0, 0.0, np.where(v[zero] > 0, -np.inf, np.inf))
    nz = ~zero
    if np.any(nz):
        vz, zz = v[nz], z[nz]
        with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
            res = np.log(sc.ive(vz, zz))
        bad = ~np.isfinite(res)
        big = bad & (zz > _HANKEL_MIN)
        small = bad & ~big
        if np.any(big):
            res[big] = _log_bessel_hankel(vz[big], zz[big])
        if np.any(small):
            res[small] = _log_bessel_series(vz[small], zz[small]) - zz[small]
        out[nz] = res if scaled else res + zz
    return out[()] if out.ndim == 0 else out


def _ratio_cf(v, z, maxiter=10000, tol=1e-16):
    # I_v/I_{v-1} = z / (2v + z^2 / (2(v+1) + z^2 / (2(v+2) + ...)))
    # modified Lentz evaluation of b0 + a1/(b1 + a2/(b2 + ...)) with b0 = 0
    tiny = 1e-300
    f = np.full_like(z, tiny)
    c = f.copy()
    d = np.zeros_like(z)
    z2 = z * z
    for k in range(maxiter):
        a = z if k == 0 else z2
        b = 2.0 * (v + k)
        d = b + a * d
        d = np.where(d == 0, tiny, d)
        c = b + a / c
        c = np.where(c == 0, tiny, c)
        d = 1.0 / d
        delta = c * d
        f = f * delta
        if np.all(np.abs(delta - 1.0) < tol):
            break
    return f


def bessel_ratio(order, z):
    """Ratio ``I_order(z) / I_{order-1}(z)``.

    This is the shrinkage factor of the noncentral-chi score.  It lies in
    [0, 1), increases with z and tends to 1 as z grows.  Scaled Bessel values
    are divided where both are representable; otherwise a Gauss continued
    fraction is used.  ``z == 0`` returns 0.
    """
    v = np.asarray(order, dtype=float)
    z = np.asarray(z, dtype=float)
    _check(v > 0, "ratio order must be > 0")
    _check(z >= 0, "ratio argument must be >= 0")
    v, z = np.broadcast_arrays(v, z)
    out = np.zeros(v.shape)
    nz = z > 0
    if np.any(nz):
        vz, zz = v[nz], z[nz]
        with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
            num = sc.ive(vz, zz)
            den = sc.ive(vz - 1.0, zz)
            r = num / den
        bad = ~(np.isfinite(r) & (den > 1e-290) & (num > 1e-290))
        big = bad & (zz > _HANKEL_MIN)
        small = bad & ~big
        if np.any(big):
            # error O(z^-3) relative; below 1e-17 in this range for the orders used
            vb, zb = vz[big], zz[big]
            w = (vb + 0.5) / zb
            r[big] = 1.0 / ((vb - 0.5) / zb + np.sqrt(1.0 + w * w))
        if np.any(small):
            r[small] = _ratio_cf(vz[small], zz[small])
        out[nz] = np.minimum(r, np.nextafter(1.0, 0.0))
    return out[()] if out.ndim == 0 else out


def digamma(x):
    """Digamma function psi(x) for x > 0."""
    x = np.asarray(x, dtype=float)
    _check(x > 0, "digamma requires x > 0")
    return sc.psi(x)


def trigamma(x):
    """First polygamma function psi'(x) for x > 0."""
    x = np.asarray(x, dtype=float)
    _check(x > 0, "trigamma requires x > 0")
    return sc.polygamma(1, x)


# Above this argument (and well above order^2) the large-|x| expansion is used.
_LAG_ASYM_MIN = 50.0


# Stirling coefficients of ln Gamma(x + 1/2) - ln Gamma(x) - ln(x)/2 in odd powers of 1/x
_HALF_RATIO_COEF = [(2.0 ** (1 - 2 * k) - 2.0) * sc.bernoulli(2 * k)[-1] / (2 * k * (2 * k - 1))
                    for k in range(1, 9)]


def _gamma_ratio_half(x):
    # Gamma(x + 1/2) / Gamma(x); poch loses ~1e-12 relative at large x
    x = np.asarray(x, dtype=float)
    big = x >= 30.0
    xb = np.where(big, x, 30.0)
    inv2 = 1.0 / (xb * xb)
    acc = np.zeros_like(xb)
    for c in reversed(_HALF_RATIO_COEF):
        acc = acc * inv2 + c
    return np.where(big, np.sqrt(xb) * np.exp(acc / xb), sc.poch(np.where(big, 1.0, x), 0.5))


def _laguerre_poisson(b, y):
    # L = (1/Gamma(3/2)) sum_J Pois(J; y) Gamma(b+J+1/2)/Gamma(b+J), window on the mode
    out = np.empty_like(y)
    chunk = 2048
    for start in range(0, y.size, chunk):
        yy = y[start:start + chunk]
        bb = b[start:start + chunk]
        half = int(np.ceil(12.0 * np.sqrt(yy.max()) + 30))
        lo = np.maximum(np.floor(yy) - half, 0.0)
        J = lo[:, None] + np.arange(2 * half + 1)[None, :]
        logw = sc.xlogy(J, yy[:, None]) - yy[:, None] - sc.gammaln(J + 1.0)
        w = np.exp(logw)
        ratio = _gamma_ratio_half(bb[:, None] + J)
        # the window holds all the mass; dividing by it cancels rounding in logw
        out[start:start + chunk] = np.sum(w * ratio, axis=1) / np.sum(w, axis=1)
    return out / sc.gamma(1.5)


def _laguerre_asym(b, y, nterms=12):
    # L ~ y^(1/2)/Gamma(3/2) * sum_s (-1/2)_s (1/2-b)_s / s! * y^(-s)
    term = np.ones_like(y)
    acc = np.ones_like(y)
    for s in range(nterms):
        term = term * (-0.5 + s) * (0.5 - b + s) / ((s + 1) * y)
        acc = acc + term
    return np.sqrt(y) * acc / sc.gamma(1.5)


def laguerre_half(alpha, x):
    """Generalised Laguerre function of degree 1/2, ``L_{1/2}^{(alpha)}(x)``.

    Defined for ``x <= 0`` (the only region the nc-chi mean needs).  Written
    as a Poisson-weighted sum of Gamma ratios, which has no cancellation; very
    large ``|x|`` switches to the asymptotic series.
    """
    a = np.asarray(alpha, dtype=float)
    x = np.asarray(x, dtype=float)
    _check(a > -1, "Laguerre order must be > -1")
    _check(x <= 0, "laguerre_half is only defined here for x <= 0")
    a, x = np.broadcast_arrays(a, x)
    b = (a + 1.0).ravel()
    y = (-x).ravel().astype(float)
    out = np.empty_like(y)
    asym = (y > _LAG_ASYM_MIN) & (y > b * b)
    if np.any(asym):
        out[asym] = _laguerre_asym(b[asym], y[asym])
    rest = ~asym
    if np.any(rest):
        # group by magnitude so the summation window stays tight
        idx = np.flatnonzero(rest)
        idx = idx[np.argsort(y[idx], kind="stable")]
        out[idx] = _laguerre_poisson(b[idx], y[idx])
    out = out.reshape(a.shape)
    return out[()] if out.ndim == 0 else out
