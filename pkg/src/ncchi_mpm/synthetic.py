"""Sampling from the noise models and simulated multi-echo acquisitions.

Random streams are ``numpy.random.Philox`` generators keyed by the phantom
seed and the volume index, so every volume is reproducible on its own and
the output does not depend on how work is scheduled.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import Family, NoiseModel
from .forward_model import AcquisitionSettings, signal
from .volume_io import EchoVolume

__all__ = [
    "RNG_ALGORITHM",
    "Region",
    "PhantomSpec",
    "Acquisition",
    "make_rng",
    "sample_ncchi",
    "sample_noise",
    "default_phantom",
    "default_protocol",
    "phantom_maps",
    "simulate_acquisition",
]

RNG_ALGORITHM = "numpy.random.Philox"


def make_rng(seed, *stream):
    """Counter-based generator for ``(seed, *stream)``."""
    ss = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def sample_ncchi(mu, nu, sigma2, rng, method="auto"):
    """Draw noncentral-chi magnitudes.

    Integer ``nu`` uses the defining construction: one Gaussian channel with
    mean ``mu / sigma`` and ``nu - 1`` zero-mean channels (their summed
    squares drawn as a central chi-square).  Non-integer ``nu`` uses the
    Poisson mixture ``chi2(nu + 2J)``, ``J ~ Poisson(mu^2 / (2 sigma2))``.

    Parameters
    ----------
    mu : array_like
        Noise-free magnitudes (>= 0); the output has this shape.
    method : {"auto", "direct", "poisson"}
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.sqrt(float(sigma2))
    nu = float(nu)
    if method == "auto":
        method = "direct" if nu == round(nu) and nu >= 1 else "poisson"
    if method == "direct":
        if nu != round(nu) or nu < 1:
            raise ValueError("direct sampling needs an integer nu >= 1")
        z1 = rng.standard_normal(mu.shape) + mu / sigma
        rest = rng.chisquare(nu - 1, mu.shape) if nu > 1 else 0.0
        s2 = z1 * z1 + rest
    elif method == "poisson":
        j = rng.poisson(0.5 * mu * mu / sigma2)
        s2 = rng.chisquare(nu + 2.0 * j)
    else:
        raise ValueError(f"unknown method {method!r}")
    return sigma * np.sqrt(s2)


def sample_noise(mu, model, rng):
    """Noisy observations of ``mu`` under any noise family."""
    mu = np.asarray(mu, dtype=float)
    if model is None:
        return mu.copy()
    if model.family is Family.GAUSSIAN:
        return mu + model.sigma * rng.standard_normal(mu.shape)
    return sample_ncchi(mu, model.nu, model.sigma2, rng)


@dataclass
class Region:
    """A phantom compartment: a shape and its tissue parameters.

    ``shape`` is one of ``"background"`` (whole grid), ``"ellipsoid"``
    (``center``/``radii`` in fractions of the grid) or ``"box"``
    (``lo``/``hi`` fractions).  Later regions overwrite earlier ones.
    """

    name: str
    shape: str
    params: tuple = (1.0, 20.0, 0.0, 0.0)   # R1, R2*, PD, MTsat
    center: tuple = (0.5, 0.5, 0.5)
    radii: tuple = (0.5, 0.5, 0.5)
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (1.0, 1.0, 1.0)

    def mask(self, dims):
        grids = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing="ij")
        if self.shape == "background":
            return np.ones(dims, bool)
        if self.shape == "ellipsoid":
            d = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
            return d <= 1.0
        if self.shape == "box":
            m = np.ones(dims, bool)
            for g, lo, hi in zip(grids, self.lo, self.hi):
                m &= (g >= lo) & (g < hi)
            return m
        raise ValueError(f"unknown region shape {self.shape!r}")


@dataclass
class Acquisition:
    """One simulated volume: settings plus its run label and echo index."""

    settings: AcquisitionSettings
    run: str
    echo: int

    def to_dict(self):
        s = self.settings
        return {"run": self.run, "echo": self.echo, "tr_s": s.tr, "te_s": s.te,
                "flip_deg": s.flip_deg, "mt_pulse": s.mt, "tr2_s": s.tr2}

    @classmethod
    def from_dict(cls, d):
        s = AcquisitionSettings.from_degrees(d["tr_s"], d["te_s"], d["flip_deg"],
                                             d.get("mt_pulse", 0), d.get("tr2_s", 0.0))
        return cls(s, d.get("run", "run"), int(d.get("echo", 0)))


@dataclass
class PhantomSpec:
    dims: tuple = (16, 16, 16)
    regions: list = field(default_factory=list)
    seed: int = 0
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.regions = [r if isinstance(r, Region) else Region(**r) for r in self.regions]
        if not self.regions or self.regions[0].shape != "background":
            raise ValueError("the first phantom region must be the background")

    def to_dict(self):
        return {"dims": list(self.dims), "seed": self.seed, "voxel_size": list(self.voxel_size),
                "regions": [{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(r).items()}
                            for r in self.regions]}

    @classmethod
    def from_dict(cls, d):
        regions = [Region(**{k: tuple(v) if isinstance(v, list) else v for k, v in r.items()})
                   for r in d["regions"]]
        return cls(tuple(d["dims"]), regions, int(d.get("seed", 0)),
                   tuple(d.get("voxel_size", (1.0, 1.0, 1.0))))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def default_phantom(dims=(16, 16, 16), seed=0, pd=1000.0):
    """Air background around concentric white-matter / grey-matter / CSF shells."""
    return PhantomSpec(dims, [
        Region("air", "background", (1.0, 20.0, 0.0, 0.0)),
        Region("csf", "ellipsoid", (0.25, 2.0, pd, 0.0), radii=(0.42, 0.42, 0.42)),
        Region("gm", "ellipsoid", (0.6, 16.0, 0.8 * pd, 0.02), radii=(0.33, 0.33, 0.33)),
        Region("wm", "ellipsoid", (1.0, 26.0, 0.7 * pd, 0.04), radii=(0.2, 0.2, 0.2)),
    ], seed)


def default_protocol(n_echoes=6, te0=2.3e-3, dte=2.3e-3):
    """MPM-like protocol: PDw, T1w and MTw multi-echo runs (TR 25 ms)."""
    tes = [te0 + dte * k for k in range(n_echoes)]
    runs = [
        ("PDw", dict(tr=0.025, flip_deg=6.0, mt=0, tr2=0.0)),
        ("T1w", dict(tr=0.025, flip_deg=21.0, mt=0, tr2=0.0)),
        ("MTw", dict(tr=0.0215, flip_deg=6.0, mt=1, tr2=0.0035)),
    ]
    out = []
    for name, r in runs:
        for e, te in enumerate(tes):
            s = AcquisitionSettings.from_degrees(r["tr"], te, r["flip_deg"], r["mt"], r["tr2"])
            out.append(Acquisition(s, name, e))
    return out


def phantom_maps(spec):
    """Ground-truth ``(R1, R2*, PD, MTsat)`` array of shape ``dims + (4,)`` and tissue mask."""
    theta = np.zeros(tuple(spec.dims) + (4,))
    labels = np.zeros(spec.dims, dtype=np.int16)
    for i, region in enumerate(spec.regions):
        m = region.mask(spec.dims)
        theta[m] = np.asarray(region.params, dtype=float)
        labels[m] = i
    return theta, labels


def _affine(spec):
    aff = np.diag(list(spec.voxel_size) + [1.0])
    aff[:3, 3] = -0.5 * np.asarray(spec.voxel_size) * (np.asarray(spec.dims) - 1)
    return aff


def simulate_acquisition(spec, acquisitions, noise):
    """Noise-free signals pushed through the noise model, one volume per acquisition.

    Parameters
    ----------
    spec : PhantomSpec
    acquisitions : list of Acquisition or AcquisitionSettings
    noise : NoiseModel, dict run -> NoiseModel, list (one per volume) or None
        ``None`` gives noise-free volumes.

    Returns
    -------
    volumes : list of EchoVolume
    theta : ndarray, ``dims + (4,)``
    labels : ndarray of region indices (0 = background)
    """
    theta, labels = phantom_maps(spec)
    aff = _affine(spec)
    vols = []
    for i, acq in enumerate(acquisitions):
        s = acq.settings if isinstance(acq, Acquisition) else acq
        run = acq.run if isinstance(acq, Acquisition) else "run"
        if isinstance(noise, dict):
            model = noise[run]
        elif isinstance(noise, (list, tuple)):
            model = noise[i]
        else:
            model = noise
        mu = np.where(theta[..., 2] > 0, signal(theta, s), 0.0)
        x = sample_noise(mu, model, make_rng(spec.seed, i))
        vols.append(EchoVolume(x.astype(np.float32), aff, spec.voxel_size))
    return vols, theta, labels
