"""Voxel-wise Newton estimation of (R1, R2*, PD, MTsat) maps.

For each voxel the negative log-likelihood of its N intensities is
minimised under either a Gaussian or a noncentral-chi noise model.  The
noncentral-chi score replaces the residual ``mu - x`` with ``mu - xi x``
where ``xi = I_{nu/2}(x mu / s2) / I_{nu/2-1}(x mu / s2)``.

Newton steps are taken in ``(ln R1, ln R2*, ln PD, MTsat)`` with a damped,
positive-definite Hessian and a backtracking line search, so accepted steps
never increase the objective.  The Hessian drops the derivative of ``xi``,
which can only make it more positive definite; voxels where it is still
indefinite use the Gauss-Newton term alone.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .distributions import Family, NoiseModel, gaussian_logpdf, ncchi_logpdf
from .forward_model import AcquisitionSettings, signal_derivatives
from .special import bessel_ratio
from .volume_io import EchoVolume

__all__ = [
    "SolverSettings",
    "FitProblem",
    "ParameterMaps",
    "Status",
    "voxel_objective",
    "voxel_grad_hess",
    "initial_estimate",
    "fit_maps",
    "DEFAULTS",
]

log = logging.getLogger(__name__)

# R1 [1/s], R2* [1/s], MTsat used where the closed-form initialisation is degenerate
DEFAULTS = (0.7, 20.0, 0.02)
MTSAT_MAX = 0.999
CHUNK = 2048
# box constraints on (R1 [1/s], R2* [1/s], PD, MTsat); keeps voxels whose
# likelihood keeps improving along an unphysical ridge from running away
BOUNDS = ((1e-3, 10.0), (1e-6, 500.0), (1e-12, 1e12), (0.0, MTSAT_MAX))


class Status:
    OUTSIDE = 0
    CONVERGED = 1
    MAX_ITERS = 2
    FAILED = 3
    SKIPPED = 4


@dataclass
class SolverSettings:
    likelihood: str = "ncchi"
    max_iters: int = 50
    tol: float = 1e-7              # stop when |d objective| < tol * N
    max_halvings: int = 10
    max_failures: int = 3
    damping: float = 1e-3          # Levenberg factor relative to trace(H)/4
    reg_weights: tuple = (0.0, 0.0, 0.0, 0.0)
    bounds: tuple = BOUNDS
    threads: int | None = None
    mask_path: str | None = None

    def __post_init__(self):
        self.likelihood = Family.parse(self.likelihood).value
        self.reg_weights = tuple(float(w) for w in self.reg_weights)
        if len(self.reg_weights) != 4:
            raise ValueError("reg_weights needs one weight per map")
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(self.bounds) != 4 or any(not lo < hi for lo, hi in self.bounds):
            raise ValueError("bounds needs one (lo, hi) pair with lo < hi per map")
        if any(lo <= 0 for lo, _ in self.bounds[:3]) or not (0 <= self.bounds[3][0]
                                                            and self.bounds[3][1] < 1):
            raise ValueError("R1, R2* and PD bounds must be positive; MTsat bounds in [0, 1)")

    def phi_bounds(self):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        lo[:3], hi[:3] = np.log(lo[:3]), np.log(hi[:3])
        return lo, hi

    @property
    def family(self):
        return Family.parse(self.likelihood)

    def to_dict(self):
        d = asdict(self)
        d["reg_weights"] = list(self.reg_weights)
        d["bounds"] = [list(b) for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class FitProblem:
    """Co-registered volumes, their settings and per-volume noise models.

    ``runs`` labels the contrast each volume belongs to (volumes of one
    multi-echo run share TR / flip / MT) and ``echoes`` its echo index.
    """

    volumes: list
    settings: list
    noise: list
    runs: list | None = None
    echoes: list | None = None
    mask: np.ndarray | None = None
    affine: np.ndarray | None = None

    def __post_init__(self):
        vols = []
        for v in self.volumes:
            if isinstance(v, EchoVolume):
                if self.affine is None:
                    self.affine = v.affine
                v = v.data
            vols.append(np.asarray(v))
        self.volumes = vols
        n = len(vols)
        if isinstance(self.noise, NoiseModel):
            self.noise = [self.noise] * n
        if self.runs is None:
            self.runs = _group_labels(self.settings)
        if self.echoes is None:
            self.echoes = _echo_indices(self.runs, self.settings)
        if self.affine is None:
            self.affine = np.eye(4)
        self.validate()
        if self.mask is None:
            self.mask = np.ones(self.shape, bool)
        self.mask = np.asarray(self.mask, bool)

    @property
    def shape(self):
        return self.volumes[0].shape

    @property
    def n_volumes(self):
        return len(self.volumes)

    def validate(self):
        n = len(self.volumes)
        if n == 0:
            raise ValueError("no volumes")
        for name in ("settings", "noise", "runs", "echoes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} volumes")
        for i, v in enumerate(self.volumes):
            if v.shape != self.volumes[0].shape:
                raise ValueError(f"volume {i} has shape {v.shape}, expected {self.volumes[0].shape}")
        if self.mask is not None and np.shape(self.mask) != self.shape:
            raise ValueError("mask shape does not match the volumes")
        if n < 4:
            raise ValueError("at least four volumes are needed")
        flips = {round(s.flip, 9) for s in self.settings}
        tes = {round(s.te, 9) for s in self.settings}
        if len(flips) < 2 or len(tes) < 2:
            raise ValueError("need at least two flip angles and two echo times")

    def subset(self, keep):
        keep = list(keep)
        return FitProblem([self.volumes[i] for i in keep], [self.settings[i] for i in keep],
                          [self.noise[i] for i in keep], [self.runs[i] for i in keep],
                          [self.echoes[i] for i in keep], self.mask, self.affine)

    def arrays(self):
        """Masked data ``(V, N)``, settings ``(N, 5)``, ``nu (N,)``, ``sigma2 (N,)``."""
        x = np.stack([v[self.mask] for v in self.volumes], axis=-1).astype(np.float64)
        s = np.stack([st.as_array() for st in self.settings])
        nu = np.array([m.nu for m in self.noise], dtype=float)
        s2 = np.array([m.sigma2 for m in self.noise], dtype=float)
        return x, s, nu, s2


def _run_key(s):
    return (round(s.tr, 9), round(s.flip, 9), s.mt, round(s.tr2, 9))


def _group_labels(settings):
    keys = {}
    return [keys.setdefault(_run_key(s), f"run{len(keys)}") for s in settings]


def _echo_indices(runs, settings):
    out = []
    for i, r in enumerate(runs):
        tes = sorted(settings[j].te for j in range(len(runs)) if runs[j] == r)
        out.append(tes.index(settings[i].te))
    return out


@dataclass
class ParameterMaps:
    r1: np.ndarray
    r2s: np.ndarray
    pd: np.ndarray
    mtsat: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    status: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    NAMES = ("R1", "R2s", "PD", "MTsat")

    @property
    def shape(self):
        return self.r1.shape

    def theta(self):
        return np.stack([self.r1, self.r2s, self.pd, self.mtsat], axis=-1)

    def maps(self):
        return dict(zip(self.NAMES, (self.r1, self.r2s, self.pd, self.mtsat)))

    @classmethod
    def from_theta(cls, theta, objective=None, iterations=None, status=None, affine=None):
        shape = theta.shape[:-1]
        z = np.zeros(shape)
        return cls(theta[..., 0], theta[..., 1], theta[..., 2], theta[..., 3],
                   z.copy() if objective is None else objective,
                   z.astype(np.int32) if iterations is None else iterations,
                   np.full(shape, Status.CONVERGED, np.uint8) if status is None else status,
                   np.eye(4) if affine is None else affine)


# ---------------------------------------------------------------------------
# per-voxel likelihood, gradient and Hessian


def _xi(family, x, mu, nu, s2):
    if family is Family.GAUSSIAN:
        return np.ones(np.broadcast(x, mu).shape)
    return bessel_ratio(0.5 * nu, x * mu / s2)


def _nll(family, x, mu, nu, s2):
    if family is Family.GAUSSIAN:
        return -np.sum(gaussian_logpdf(x, mu, s2), axis=-1)
    return -np.sum(ncchi_logpdf(x, np.maximum(mu, 0.0), nu, s2), axis=-1)


def _as_family(noise, family):
    if family is not None:
        return Family.parse(family)
    if isinstance(noise, NoiseModel):
        return noise.family
    return Family.NCCHI


def _noise_arrays(noise, n):
    if isinstance(noise, NoiseModel):
        return np.full(n, float(noise.nu)), np.full(n, float(noise.sigma2))
    return (np.array([m.nu for m in noise], dtype=float),
            np.array([m.sigma2 for m in noise], dtype=float))


def _settings_matrix(settings):
    if isinstance(settings, np.ndarray):
        return settings
    return np.stack([s.as_array() for s in settings])


def voxel_objective(theta, x, settings, noise, family=None):
    """Negative log-likelihood of intensities ``x`` given parameters ``theta``.

    Parameters
    ----------
    theta : array_like, (..., 4)
    x : array_like, (..., N)
    settings : sequence of AcquisitionSettings or array (N, 5)
    noise : NoiseModel or sequence of N NoiseModel
    family : Family, optional
        Overrides ``noise.family``.
    """
    fam = _as_family(noise, family)
    s = _settings_matrix(settings)
    x = np.asarray(x, dtype=float)
    nu, s2 = _noise_arrays(noise, s.shape[0])
    mu = signal_derivatives(np.asarray(theta, float)[..., None, :], s, order=0)
    return _nll(fam, x, mu, nu, s2)


def voxel_grad_hess(theta, x, settings, noise, family=None, psd=True, damping=0.0):
    """Gradient and Hessian approximation of :func:`voxel_objective`.

    ``g_i = sum_n (mu_n - xi_n x_n) / s2_n * dmu_n/dtheta_i`` and
    ``H = sum_n (J J^T + (mu_n - xi_n x_n) d2mu_n) / s2_n``.  With ``psd=True``
    any voxel whose ``H`` is not positive definite falls back to the
    Gauss-Newton term ``sum_n J J^T / s2_n``.  ``damping`` adds
    ``damping * trace(H) / 4`` to the diagonal.
    """
    fam = _as_family(noise, family)
    s = _settings_matrix(settings)
    nu, s2 = _noise_arrays(noise, s.shape[0])
    mu, J, Hm = signal_derivatives(np.asarray(theta, float)[..., None, :], s)
    x = np.asarray(x, dtype=float)
    return _grad_hess(fam, x, mu, J, Hm, nu, s2, psd, damping)


def _grad_hess(fam, x, mu, J, Hm, nu, s2, psd, damping):
    xi = _xi(fam, x, mu, nu, s2)
    res = (mu - xi * x) / s2
    g = np.einsum("...n,...ni->...i", res, J)
    gn = np.einsum("...ni,...nj,n->...ij", J, J, 1.0 / s2)
    H = gn + np.einsum("...n,...nij->...ij", res, Hm)
    if psd:
        with np.errstate(invalid="ignore"):
            scale = np.trace(gn, axis1=-2, axis2=-1)
            ok = np.linalg.eigvalsh(H)[..., 0] > 1e-10 * scale
        H = np.where(ok[..., None, None], H, gn)
    if damping:
        tr = np.trace(H, axis1=-2, axis2=-1)
        H = H + _diag(damping * tr[..., None] * np.ones(4) / 4.0)
    return g, H


def _diag(v):
    out = np.zeros(v.shape + (4,))
    idx = np.arange(4)
    out[..., idx, idx] = v
    return out


# ---------------------------------------------------------------------------
# parameter encoding: phi = (ln R1, ln R2*, ln PD, MTsat)


def to_phi(theta):
    phi = np.array(theta, dtype=float, copy=True)
    phi[..., :3] = np.log(phi[..., :3])
    return phi


def from_phi(phi):
    theta = np.array(phi, dtype=float, copy=True)
    theta[..., :3] = np.exp(theta[..., :3])
    return theta


def _project(phi, bounds=None):
    lo, hi = bounds if bounds is not None else SolverSettings().phi_bounds()
    return np.clip(phi, lo, hi)


class _Objective:
    """Objective, gradient and Hessian in phi-space for a block of voxels."""

    def __init__(self, family, x, s, nu, s2):
        self.family = family
        self.x = x
        self.s = s
        self.nu = nu
        self.s2 = s2

    def value(self, phi, idx):
        theta = from_phi(phi)
        mu = signal_derivatives(theta[:, None, :], self.s, order=0)
        return _nll(self.family, self.x[idx], mu, self.nu, self.s2)

    def grad_hess(self, phi, idx, damping):
        theta = from_phi(phi)
        mu, J, Hm = signal_derivatives(theta[:, None, :], self.s)
        dth = np.ones_like(theta)
        dth[:, :3] = theta[:, :3]
        # chain rule to phi; d2theta/dphi2 = dtheta/dphi on the log-encoded entries
        Jp = J * dth[:, None, :]
        Hp = Hm * dth[:, None, :, None] * dth[:, None, None, :]
        d2 = dth.copy()
        d2[:, 3] = 0.0
        idx4 = np.arange(4)
        Hp[..., idx4, idx4] += J * d2[:, None, :]
        g, H = _grad_hess(self.family, self.x[idx], mu, Jp, Hp, self.nu, self.s2, True, 0.0)
        tr = np.trace(H, axis1=-2, axis2=-1)
        H = H + _diag((damping * tr / 4.0)[:, None] * np.ones(4))
        return g, H


def _newton_block(obj, phi, settings, n_obs, max_iters=None):
    """Damped Newton with backtracking on every voxel of a block."""
    max_iters = settings.max_iters if max_iters is None else max_iters
    V = phi.shape[0]
    phi = phi.copy()
    idx_all = np.arange(V)
    f = obj.value(phi, idx_all)
    lam = np.full(V, settings.damping)
    fails = np.zeros(V, int)
    iters = np.zeros(V, np.int32)
    status = np.full(V, Status.MAX_ITERS, np.uint8)
    bad = ~np.isfinite(f) | ~np.all(np.isfinite(phi), axis=-1)
    status[bad] = Status.SKIPPED
    active = ~bad
    tol = settings.tol * n_obs
    lo, hi = settings.phi_bounds()
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g, H = obj.grad_hess(phi[idx], idx, lam[idx])
        finite = np.all(np.isfinite(g), axis=-1) & np.all(np.isfinite(H), axis=(-2, -1))
        if not np.all(finite):
            status[idx[~finite]] = Status.SKIPPED
            active[idx[~finite]] = False
            idx, g, H = idx[finite], g[finite], H[finite]
            if idx.size == 0:
                break
        # coordinates held at a bound while the descent direction points outside it
        p = phi[idx]
        pinned = ((p <= lo) & (g > 0)) | ((p >= hi) & (g < 0))
        if np.any(pinned):
            g = np.where(pinned, 0.0, g)
            keep = ~pinned
            H = H * keep[:, :, None] * keep[:, None, :] + _diag(pinned.astype(float))
        step = np.linalg.solve(H, g[..., None])[..., 0]
        iters[idx] += 1
        t = np.ones(idx.size)
        accepted = np.zeros(idx.size, bool)
        f_new = f[idx].copy()
        phi_new = phi[idx].copy()
        pending = np.arange(idx.size)
        for _h in range(settings.max_halvings + 1):
            cand = _project(phi[idx[pending]] - t[pending, None] * step[pending], (lo, hi))
            fc = obj.value(cand, idx[pending])
            ok = np.isfinite(fc) & (fc <= f[idx[pending]])
            acc = pending[ok]
            accepted[acc] = True
            f_new[acc] = fc[ok]
            phi_new[acc] = cand[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= 0.5
        # accepted voxels
        a = idx[accepted]
        delta = f[a] - f_new[accepted]
        phi[a] = phi_new[accepted]
        f[a] = f_new[accepted]
        lam[a] = np.maximum(lam[a] / 10.0, 1e-12)
        fails[a] = 0
        done = a[delta < tol]
        status[done] = Status.CONVERGED
        active[done] = False
        # rejected voxels
        r = idx[~accepted]
        lam[r] *= 10.0
        fails[r] += 1
        dead = r[fails[r] >= settings.max_failures]
        status[dead] = Status.FAILED
        active[dead] = False
    return phi, f, iters, status


# ---------------------------------------------------------------------------
# initialisation


def _ernst_factor(r1, mtsat, s):
    theta = np.stack([r1, np.ones_like(r1), np.ones_like(r1), mtsat], axis=-1)
    s0 = s.copy()
    s0[1] = 0.0
    return signal_derivatives(theta, s0, order=0)


def initial_estimate(x, settings, runs):
    """Closed-form starting point for every voxel.

    R2* and per-run log amplitudes come from a joint log-linear fit over the
    echoes (common slope, one intercept per run).  R1, PD and MTsat come from
    the small-flip-angle rational approximations applied to the TE = 0
    amplitudes of the PD-, T1- and MT-weighted runs.  Degenerate voxels get
    the defaults in ``DEFAULTS``.
    """
    x = np.asarray(x, dtype=float)
    s = _settings_matrix(settings)
    V, N = x.shape
    labels = sorted(set(runs), key=list(runs).index)
    lx = np.log(np.maximum(x, 1e-12 * max(float(np.max(x)), 1e-300)))
    te = s[:, 1]
    num = np.zeros(V)
    den = 0.0
    means = {}
    for lab in labels:
        cols = [i for i, r in enumerate(runs) if r == lab]
        tc = te[cols] - te[cols].mean()
        lc = lx[:, cols] - lx[:, cols].mean(axis=1, keepdims=True)
        num += lc @ tc
        den += float(tc @ tc)
        means[lab] = (cols, te[cols].mean(), lx[:, cols].mean(axis=1))
    r2s = -num / den if den > 0 else np.full(V, DEFAULTS[1])
    r2s = np.where(np.isfinite(r2s) & (r2s > 0.5) & (r2s < 500.0), r2s, DEFAULTS[1])
    amp = {lab: np.exp(m + r2s * t) for lab, (cols, t, m) in means.items()}
    first = {lab: s[cols[0]] for lab, (cols, _, _) in means.items()}

    pdw = [l for l in labels if first[l][3] == 0]
    mtw = [l for l in labels if first[l][3] == 1]
    r1 = np.full(V, DEFAULTS[0])
    mts = np.full(V, DEFAULTS[2])
    ref = pdw[0] if pdw else labels[0]
    if len(pdw) >= 2:
        pdw = sorted(pdw, key=lambda l: first[l][2])
        lp, lt = pdw[0], pdw[-1]
        if first[lp][2] != first[lt][2]:
            Sp, St = amp[lp], amp[lt]
            ap, at = first[lp][2], first[lt][2]
            tp, tt = first[lp][0], first[lt][0]
            with np.errstate(divide="ignore", invalid="ignore"):
                est = 0.5 * (St * at / tt - Sp * ap / tp) / (Sp / ap - St / at)
            r1 = np.where(np.isfinite(est) & (est > 0.05) & (est < 10.0), est, DEFAULTS[0])
            ref = lp
    pd = amp[ref] / _ernst_factor(r1, np.zeros(V), first[ref])
    if mtw:
        m = mtw[0]
        sm = first[m]
        am = sm[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            est = (pd * am / amp[m] - 1.0) * r1 * (sm[0] + sm[4]) - 0.5 * am * am
        mts = np.where(np.isfinite(est) & (est >= 0.0) & (est < 0.5), est, DEFAULTS[2])
    else:
        mts = np.zeros(V)
    pd = np.where(np.isfinite(pd) & (pd > 0), pd, np.maximum(np.max(x, axis=1), 1e-6))
    return np.stack([r1, r2s, pd, mts], axis=-1)


# ---------------------------------------------------------------------------
# driver


def _default_threads():
    env = os.environ.get("NCCHI_MPM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def membrane_edges(mask):
    """Pairs of 6-connected voxel indices (into ``mask``'s true voxels)."""
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    pairs = []
    for ax in range(3):
        a = np.moveaxis(index, ax, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        keep = (lo >= 0) & (hi >= 0)
        pairs.append(np.stack([lo[keep], hi[keep]], axis=1))
    return np.concatenate(pairs) if pairs else np.zeros((0, 2), np.int64)


def _membrane(phi, edges, w):
    """Penalty sum_edges sum_k w_k (phi_a,k - phi_b,k)^2 and its gradient."""
    d = phi[edges[:, 0]] - phi[edges[:, 1]]
    val = float(np.sum(w * d * d))
    g = np.zeros_like(phi)
    np.add.at(g, edges[:, 0], 2.0 * w * d)
    np.add.at(g, edges[:, 1], -2.0 * w * d)
    return val, g


def _fit_coupled(obj_for_block, blocks, phi, edges, w, settings, n_obs, pool):
    """Damped Newton on the membrane-regularised objective of all voxels jointly.

    The Hessian is the block-diagonal data term plus the (constant) graph
    Laplacian of the penalty; each step is solved with preconditioned CG.
    """
    V = phi.shape[0]
    lo, hi = settings.phi_bounds()
    objs = [obj_for_block(b) for b in blocks]
    local = [np.arange(b.size) for b in blocks]

    def data_value(p):
        parts = pool(lambda k: objs[k].value(p[blocks[k]], local[k]), range(len(blocks)))
        return np.concatenate(parts)

    def total(p):
        fv = data_value(p)
        return float(np.sum(fv)) + _membrane(p, edges, w)[0], fv

    # penalty Hessian: 2 * (Laplacian kron diag(w)), assembled once
    n = V * 4
    rows, cols, vals = [], [], []
    for k in range(4):
        a, b = edges[:, 0] * 4 + k, edges[:, 1] * 4 + k
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        c = 2.0 * w[k] * np.ones(len(edges))
        vals += [c, c, -c, -c]
    L = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)) if len(edges) else sparse.csr_matrix((n, n))

    f, fv = total(phi)
    lam = settings.damping
    fails = 0
    status = Status.MAX_ITERS
    it = 0
    for it in range(1, settings.max_iters + 1):
        parts = pool(lambda k: objs[k].grad_hess(phi[blocks[k]], local[k],
                                                 np.full(blocks[k].size, lam)),
                     range(len(blocks)))
        g = np.concatenate([p[0] for p in parts]) + _membrane(phi, edges, w)[1]
        Hd = np.concatenate([p[1] for p in parts])
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(Hd))):
            status = Status.SKIPPED
            break
        pinned = ((phi <= lo) & (g > 0)) | ((phi >= hi) & (g < 0))
        free = (~pinned).ravel().astype(float)
        g = np.where(pinned, 0.0, g)
        Hd = Hd * (~pinned)[:, :, None] * (~pinned)[:, None, :] + _diag(pinned.astype(float))
        Hb = sparse.block_diag(list(Hd), format="csr")
        F = sparse.diags(free)
        H = Hb + F @ L @ F + lam * sparse.diags(L.diagonal() * free)
        Minv = np.linalg.inv(Hd + _diag((L.diagonal() * free).reshape(V, 4)))
        M = LinearOperator((n, n), matvec=lambda v: (Minv @ v.reshape(V, 4, 1)).ravel())
        step, _ = cg(H, g.ravel(), M=M, rtol=1e-10, atol=0.0, maxiter=10 * n)
        step = step.reshape(V, 4)
        t = 1.0
        accepted = False
        for _ in range(settings.max_halvings + 1):
            cand = _project(phi - t * step, (lo, hi))
            fc, fvc = total(cand)
            if np.isfinite(fc) and fc <= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            lam *= 10.0
            fails += 1
            if fails >= settings.max_failures:
                status = Status.FAILED
                break
            continue
        delta = f - fc
        phi, f, fv = cand, fc, fvc
        lam = max(lam / 10.0, 1e-12)
        fails = 0
        if delta < settings.tol * n_obs * V:
            status = Status.CONVERGED
            break
    return phi, fv, np.full(V, it, np.int32), np.full(V, status, np.uint8)


def fit_maps(problem, opts=None, init=None):
    """Fit parameter maps for every voxel in ``problem.mask``.

    Parameters
    ----------
    problem : FitProblem
    opts : SolverSettings, optional
    init : ndarray ``shape + (4,)``, optional
        Starting parameters; the closed-form initialisation otherwise.

    Returns
    -------
    ParameterMaps
        Maps are zero outside the mask.  ``status`` holds :class:`Status`
        codes and ``iterations`` the number of Newton iterations.
    """
    opts = opts or SolverSettings()
    fam = opts.family
    x, s, nu, s2 = problem.arrays()
    V, N = x.shape
    if fam is not Family.GAUSSIAN:
        # the nc-chi density needs strictly positive magnitudes
        x = np.maximum(x, 1e-6 * np.sqrt(s2)[None, :])
    theta0 = initial_estimate(x, s, problem.runs) if init is None else np.asarray(init)[problem.mask]
    with np.errstate(divide="ignore"):
        phi = _project(to_phi(theta0), opts.phi_bounds())

    threads = opts.threads or _default_threads()
    blocks = [np.arange(i, min(i + CHUNK, V)) for i in range(0, V, CHUNK)]
    reg = np.asarray(opts.reg_weights, dtype=float)

    def pool(fn, items):
        items = list(items)
        if threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                return list(ex.map(fn, items))
        return [fn(i) for i in items]

    def obj_for_block(b):
        return _Objective(fam, x[b], s, nu, s2)

    if not np.any(reg > 0):
        results = pool(lambda b: _newton_block(obj_for_block(b), phi[b], opts, N), blocks)
        f = np.empty(V)
        iters = np.empty(V, np.int32)
        status = np.empty(V, np.uint8)
        for b, (p, fb, it, st) in zip(blocks, results):
            phi[b], f[b], iters[b], status[b] = p, fb, it, st
    else:
        edges = membrane_edges(problem.mask)
        phi, f, iters, status = _fit_coupled(obj_for_block, blocks, phi, edges, reg, opts, N,
                                             pool)

    theta = from_phi(phi)
    full = np.zeros(problem.shape + (4,))
    full[problem.mask] = theta
    obj = np.zeros(problem.shape)
    obj[problem.mask] = f
    it_full = np.zeros(problem.shape, np.int32)
    it_full[problem.mask] = iters
    st_full = np.zeros(problem.shape, np.uint8)
    st_full[problem.mask] = status
    return ParameterMaps.from_theta(full, obj, it_full, st_full, problem.affine)
