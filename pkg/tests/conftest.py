import numpy as np
import pytest

from ncchi_mpm.distributions import NoiseModel
from ncchi_mpm.forward_model import signal
from ncchi_mpm.map_fit import FitProblem
from ncchi_mpm.synthetic import default_phantom, default_protocol, phantom_maps, simulate_acquisition


def phantom_problem(n=8, snr=None, seed=0, family="ncchi", n_echoes=6):
    """Seeded default phantom, MPM-like protocol, and the matching FitProblem.

    ``snr`` is the mean first-echo tissue signal of the PDw run over sigma;
    ``None`` gives noise-free volumes fitted with a tiny nominal variance.
    """
    spec = default_phantom((n, n, n), seed=seed)
    acq = default_protocol(n_echoes)
    theta, labels = phantom_maps(spec)
    mask = labels > 0
    if snr is None:
        model, sim = NoiseModel("ncchi", 2.0, 1e-4), None
    else:
        sigma = float(np.mean(signal(theta[mask], acq[0].settings))) / snr
        model = NoiseModel("ncchi", 2.0, sigma**2)
        sim = model.with_family(family)
    vols, theta, labels = simulate_acquisition(spec, acq, sim)
    prob = FitProblem(vols, [a.settings for a in acq], [model] * len(acq),
                      [a.run for a in acq], [a.echo for a in acq], mask)
    return prob, theta, labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
