"""Multi-echo spoiled gradient-echo (FLASH) signal model and its derivatives.

Parameters are ordered ``(R1, R2*, PD, MTsat)``; acquisition settings are
``(TR, TE, flip, mt_pulse, TR2)``, times in seconds and flip in radians.

Without an MT pulse the steady state is the Ernst expression

    PD sin(a) (1 - E1) / (1 - cos(a) E1) exp(-TE R2*),   E1 = exp(-TR R1)

and with an MT pulse the two-interval expression

    PD sin(a) (1 + (MT - 1) A - MT B) / (1 + (MT - 1) cos(a) A) exp(-TE R2*)

with ``A = exp(-(TR + TR2) R1)`` and ``B = exp(-TR2 R1)``.  Setting MT = 0 in
the second form recovers the first at repetition time TR + TR2.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AcquisitionSettings",
    "VoxelParams",
    "PARAM_NAMES",
    "signal",
    "signal_grad",
    "signal_hess",
    "signal_derivatives",
]

PARAM_NAMES = ("R1", "R2s", "PD", "MTsat")


@dataclass(frozen=True)
class AcquisitionSettings:
    tr: float
    te: float
    flip: float
    mt: int = 0
    tr2: float = 0.0

    def __post_init__(self):
        if not self.tr > 0:
            raise ValueError(f"TR must be positive, got {self.tr}")
        if not self.te >= 0:
            raise ValueError(f"TE must be non-negative, got {self.te}")
        if not 0 < self.flip < np.pi / 2:
            raise ValueError(f"flip angle must lie in (0, pi/2) rad, got {self.flip}")
        if self.mt not in (0, 1):
            raise ValueError(f"mt flag must be 0 or 1, got {self.mt}")
        if not self.tr2 >= 0:
            raise ValueError(f"TR2 must be non-negative, got {self.tr2}")

    @classmethod
    def from_degrees(cls, tr, te, flip_deg, mt=0, tr2=0.0):
        return cls(float(tr), float(te), float(np.deg2rad(flip_deg)), int(mt), float(tr2))

    @property
    def flip_deg(self):
        return float(np.rad2deg(self.flip))

    def as_array(self):
        return np.array([self.tr, self.te, self.flip, float(self.mt), self.tr2 if self.mt else 0.0])

    def replace(self, **kw):
        d = dict(tr=self.tr, te=self.te, flip=self.flip, mt=self.mt, tr2=self.tr2)
        d.update(kw)
        return AcquisitionSettings(**d)


@dataclass(frozen=True)
class VoxelParams:
    r1: float
    r2s: float
    pd: float
    mtsat: float = 0.0

    def __post_init__(self):
        if not (self.r1 > 0 and self.r2s > 0 and self.pd > 0):
            raise ValueError("R1, R2* and PD must be positive")
        if not 0 <= self.mtsat < 1:
            raise ValueError("MTsat must lie in [0, 1)")

    def as_array(self):
        return np.array([self.r1, self.r2s, self.pd, self.mtsat])


def _settings_array(s):
    if isinstance(s, AcquisitionSettings):
        return s.as_array()
    if isinstance(s, (list, tuple)) and s and isinstance(s[0], AcquisitionSettings):
        return np.stack([x.as_array() for x in s])
    s = np.asarray(s, dtype=float)
    return s


def _theta_array(theta):
    if isinstance(theta, VoxelParams):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def signal_derivatives(theta, s, order=2):
    """Signal and its derivatives with respect to the four parameters.

    Parameters
    ----------
    theta : array_like, shape (..., 4)
    s : AcquisitionSettings or array_like, shape (..., 5)
        Broadcast against ``theta`` on the leading axes.
    order : {0, 1, 2}

    Returns
    -------
    mu : ndarray (...)
    grad : ndarray (..., 4), if order >= 1
    hess : ndarray (..., 4, 4), if order == 2
    """
    theta = _theta_array(theta)
    s = _settings_array(s)
    r1, r2, pd, mt = (theta[..., i] for i in range(4))
    tr, te, fa, mtflag, tr2 = (s[..., i] for i in range(5))
    tr2 = tr2 * mtflag
    m = mt * mtflag

    c, sn = np.cos(fa), np.sin(fa)
    T = tr + tr2
    A = np.exp(-T * r1)
    B = np.exp(-tr2 * r1)
    num = 1.0 + (m - 1.0) * A - m * B
    den = 1.0 + (m - 1.0) * c * A
    f = num / den
    decay = np.exp(-te * r2)
    P = pd * sn
    mu = P * f * decay
    if order == 0:
        return mu

    n1 = -(m - 1.0) * T * A + m * tr2 * B
    n4 = mtflag * (A - B)
    d1 = -(m - 1.0) * c * T * A
    d4 = mtflag * c * A
    f1 = (n1 * den - num * d1) / den**2
    f4 = (n4 * den - num * d4) / den**2

    shape = np.broadcast(mu, theta[..., 0]).shape
    grad = np.empty(shape + (4,))
    grad[..., 0] = P * decay * f1
    grad[..., 1] = -te * mu
    grad[..., 2] = sn * f * decay
    grad[..., 3] = P * decay * f4
    if order == 1:
        return mu, grad

    n11 = (m - 1.0) * T * T * A - m * tr2 * tr2 * B
    n14 = mtflag * (-T * A + tr2 * B)
    d11 = (m - 1.0) * c * T * T * A
    d14 = -mtflag * c * T * A

    def f2(nij, ni, nj, di, dj, dij):
        return (nij / den - (ni * dj + nj * di) / den**2
                - num * dij / den**2 + 2.0 * num * di * dj / den**3)

    f11 = f2(n11, n1, n1, d1, d1, d11)
    f14 = f2(n14, n1, n4, d1, d4, d14)
    f44 = f2(0.0, n4, n4, d4, d4, 0.0)

    hess = np.zeros(shape + (4, 4))
    hess[..., 0, 0] = P * decay * f11
    hess[..., 0, 1] = -te * grad[..., 0]
    hess[..., 0, 2] = sn * decay * f1
    hess[..., 0, 3] = P * decay * f14
    hess[..., 1, 1] = te * te * mu
    hess[..., 1, 2] = -te * grad[..., 2]
    hess[..., 1, 3] = -te * grad[..., 3]
    hess[..., 2, 3] = sn * decay * f4
    hess[..., 3, 3] = P * decay * f44
    for i, j in ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)):
        hess[..., j, i] = hess[..., i, j]
    return mu, grad, hess


def signal(theta, s):
    """Noise-free FLASH magnitude for parameters ``theta`` under settings ``s``."""
    return signal_derivatives(theta, s, order=0)


def signal_grad(theta, s):
    return signal_derivatives(theta, s, order=1)[1]


def signal_hess(theta, s):
    return signal_derivatives(theta, s, order=2)[2]
