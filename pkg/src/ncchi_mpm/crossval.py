"""Leave-one-echo-out comparison of Gaussian and noncentral-chi fits.

Fold ``e`` removes echo ``e`` from every run, fits maps on what is left
with both likelihoods, predicts each removed volume and scores it by the
mean squared error inside the mask.  The Gaussian prediction is the model
signal itself; the noncentral-chi prediction is the expected magnitude.
"""

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import Family, ncchi_mean
from .forward_model import signal
from .map_fit import SolverSettings, Status, fit_maps

__all__ = ["predict_echo", "loeo", "LoeoResult", "FoldRow"]

log = logging.getLogger(__name__)


def predict_echo(maps, settings, noise, family, mask=None):
    """Predicted intensity of a volume acquired with ``settings``.

    Parameters
    ----------
    maps : ParameterMaps
    settings : AcquisitionSettings
    noise : NoiseModel
        Degrees of freedom and variance of the volume's run.
    family : Family or str
        ``gauss`` predicts the signal, ``ncchi`` its expected magnitude.
    mask : bool array, optional
        Voxels to predict; defaults to those with positive PD.  Zero elsewhere.
    """
    family = Family.parse(family)
    theta = maps.theta()
    if mask is None:
        mask = theta[..., 2] > 0
    out = np.zeros(theta.shape[:-1])
    mu = signal(theta[mask], settings)
    if family is Family.GAUSSIAN:
        out[mask] = mu
    else:
        out[mask] = ncchi_mean(mu, noise.nu, noise.sigma2)
    return out


@dataclass
class FoldRow:
    contrast: str
    held_out_echo: int
    mse_gauss: float
    mse_ncchi: float
    n_voxels: int
    failed_gauss: int = 0
    failed_ncchi: int = 0

    @property
    def diff(self):
        return self.mse_ncchi - self.mse_gauss

    @property
    def flagged(self):
        return bool(self.failed_gauss or self.failed_ncchi)


@dataclass
class LoeoResult:
    rows: list = field(default_factory=list)

    def contrasts(self):
        seen = []
        for r in self.rows:
            if r.contrast not in seen:
                seen.append(r.contrast)
        return seen

    def summary(self):
        """Per-contrast MSEs and difference averaged over held-out echoes."""
        out = {}
        for c in self.contrasts():
            rs = [r for r in self.rows if r.contrast == c]
            out[c] = {
                "mse_gauss": float(np.mean([r.mse_gauss for r in rs])),
                "mse_ncchi": float(np.mean([r.mse_ncchi for r in rs])),
                "diff": float(np.mean([r.diff for r in rs])),
                "n_folds": len(rs),
                "flagged": sum(r.flagged for r in rs),
            }
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["contrast", "held_out_echo", "mse_gauss", "mse_ncchi", "diff",
                    "n_voxels", "failed_gauss", "failed_ncchi"])
        for r in self.rows:
            w.writerow([r.contrast, r.held_out_echo, repr(r.mse_gauss), repr(r.mse_ncchi),
                        repr(r.diff), r.n_voxels, r.failed_gauss, r.failed_ncchi])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "rows": [dict(contrast=r.contrast, held_out_echo=r.held_out_echo,
                          mse_gauss=r.mse_gauss, mse_ncchi=r.mse_ncchi, diff=r.diff,
                          n_voxels=r.n_voxels, failed_gauss=r.failed_gauss,
                          failed_ncchi=r.failed_ncchi) for r in self.rows],
            "summary": self.summary(),
        }, indent=2, sort_keys=True)


def _fold(problem, echo, opts):
    keep = [i for i, e in enumerate(problem.echoes) if e != echo]
    held = [i for i, e in enumerate(problem.echoes) if e == echo]
    train = problem.subset(keep)
    mask = problem.mask
    preds = {}
    failed = {}
    for fam in (Family.GAUSSIAN, Family.NCCHI):
        o = SolverSettings.from_dict({**opts.to_dict(), "likelihood": fam.value, "threads": 1})
        maps = fit_maps(train, o)
        failed[fam] = int(np.sum(maps.status[mask] != Status.CONVERGED))
        preds[fam] = {i: predict_echo(maps, problem.settings[i], problem.noise[i], fam, mask)
                      for i in held}
    rows = []
    for i in held:
        obs = np.asarray(problem.volumes[i], dtype=float)[mask]
        mse = {fam: float(np.mean((preds[fam][i][mask] - obs) ** 2)) for fam in preds}
        rows.append(FoldRow(problem.runs[i], int(echo), mse[Family.GAUSSIAN], mse[Family.NCCHI],
                            int(mask.sum()), failed[Family.GAUSSIAN], failed[Family.NCCHI]))
    return rows


def loeo(problem, opts=None, threads=1):
    """Run every leave-one-echo-out fold.

    Every run needs at least three echoes so that two remain for fitting.
    Folds are independent; with ``threads > 1`` they run concurrently and
    are merged in echo order.
    """
    opts = opts or SolverSettings()
    for run in set(problem.runs):
        n = sum(r == run for r in problem.runs)
        if n < 3:
            raise ValueError(f"run {run!r} has {n} echoes; at least 3 are required")
    echoes = sorted(set(problem.echoes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda e: _fold(problem, e, opts), echoes))
    else:
        parts = [_fold(problem, e, opts) for e in echoes]
    rows = [r for part in parts for r in part]
    for r in rows:
        if r.flagged:
            log.warning("fold echo=%d contrast=%s: %d/%d voxels not converged",
                        r.held_out_echo, r.contrast, r.failed_gauss, r.failed_ncchi)
    return LoeoResult(rows)
