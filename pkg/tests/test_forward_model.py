import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncchi_mpm.forward_model import (AcquisitionSettings, VoxelParams, signal, signal_derivatives,
                                     signal_grad, signal_hess)

PDW = AcquisitionSettings.from_degrees(0.025, 0.0023, 6)
T1W = AcquisitionSettings.from_degrees(0.025, 0.0023, 21)
MTW = AcquisitionSettings.from_degrees(0.025, 0.0023, 6, mt=1, tr2=0.01)


def ernst(r1, r2, pd, tr, te, a):
    e1 = np.exp(-tr * r1)
    return pd * np.sin(a) * (1 - e1) / (1 - np.cos(a) * e1) * np.exp(-te * r2)


def test_settings_validation():
    with pytest.raises(ValueError):
        AcquisitionSettings(0.0, 0.001, 0.1)
    with pytest.raises(ValueError):
        AcquisitionSettings(0.02, 0.001, 2.0)
    with pytest.raises(ValueError):
        AcquisitionSettings(0.02, 0.001, 0.1, mt=2)
    with pytest.raises(ValueError):
        VoxelParams(1.0, 20.0, 1.0, 1.0)
    assert PDW.flip_deg == pytest.approx(6.0)
    assert PDW.replace(te=0.01).te == 0.01


def test_ernst_without_mt():
    theta = [1.2, 25.0, 1000.0, 0.3]  # MTsat ignored without a pulse
    mu = signal(theta, PDW)
    assert mu == pytest.approx(ernst(1.2, 25, 1000, 0.025, 0.0023, PDW.flip), rel=1e-14)
    assert signal_grad(theta, PDW)[3] == 0.0


def test_mt_zero_saturation_is_ernst_at_long_tr():
    mu = signal([0.9, 15.0, 800.0, 0.0], MTW)
    assert mu == pytest.approx(ernst(0.9, 15, 800, 0.035, 0.0023, MTW.flip), rel=1e-13)


def test_full_saturation_with_mt():
    # MTsat -> 1 is not a valid parameter but the formula gives the limiting form
    r1, tr2, T = 1.0, MTW.tr2, MTW.tr + MTW.tr2
    A, B = np.exp(-T * r1), np.exp(-tr2 * r1)
    ref = np.sin(MTW.flip) * (1 - B) * np.exp(-MTW.te * 10.0)
    assert signal([r1, 10.0, 1.0, 1.0], MTW) == pytest.approx(ref, rel=1e-13)
    assert A < B


def _fd(fun, theta, h):
    out = []
    for i in range(4):
        e = np.zeros(4)
        e[i] = h[i]
        out.append((fun(theta + e) - fun(theta - e)) / (2 * h[i]))
    return np.stack(out, axis=-1)


@pytest.mark.parametrize("s", [PDW, T1W, MTW])
def test_gradient_and_hessian_match_finite_differences(s):
    rng = np.random.default_rng(3)
    for _ in range(30):
        theta = np.array([rng.uniform(0.2, 4), rng.uniform(2, 80), rng.uniform(10, 5000),
                          rng.uniform(0, 0.2)])
        h = 1e-5 * np.maximum(np.abs(theta), 1e-2)
        mu, g, H = signal_derivatives(theta, s)
        np.testing.assert_allclose(g, _fd(lambda t: signal(t, s), theta, h),
                                   rtol=1e-6, atol=1e-9 * abs(mu))
        np.testing.assert_allclose(H, _fd(lambda t: signal_grad(t, s), theta, h),
                                   rtol=1e-5, atol=1e-7 * abs(mu))
        np.testing.assert_allclose(H, H.T, rtol=0, atol=0)


def test_broadcasting_over_voxels_and_settings():
    rng = np.random.default_rng(1)
    theta = np.column_stack([rng.uniform(0.5, 2, 7), rng.uniform(5, 50, 7),
                             rng.uniform(100, 2000, 7), rng.uniform(0, 0.1, 7)])
    mu, g, H = signal_derivatives(theta, MTW)
    assert mu.shape == (7,) and g.shape == (7, 4) and H.shape == (7, 4, 4)
    for i in range(7):
        assert mu[i] == signal(theta[i], MTW)
        np.testing.assert_array_equal(H[i], signal_hess(theta[i], MTW))
    s = np.stack([PDW.as_array(), T1W.as_array(), MTW.as_array()])
    both = signal(theta[:, None, :], s[None])
    assert both.shape == (7, 3)
    assert both[2, 1] == signal(theta[2], T1W)


@settings(max_examples=150, deadline=None)
@given(st.floats(0.05, 10), st.floats(0.5, 200), st.floats(1e-3, 1e6), st.floats(0, 0.9),
       st.floats(1, 89), st.floats(0, 0.05), st.booleans())
def test_signal_properties(r1, r2, pd, mt, flip, te, mtflag):
    s = AcquisitionSettings.from_degrees(0.025, te, flip, int(mtflag), 0.01)
    theta = np.array([r1, r2, pd, mt])
    mu, g, _ = signal_derivatives(theta, s)
    # magnitude bounded by the equilibrium magnetisation and linear in PD
    assert 0 <= mu <= pd * (1 + 1e-12)
    assert signal(theta * [1, 1, 2, 1], s) == pytest.approx(2 * mu, rel=1e-12)
    assert g[1] <= 0                      # longer T2* decay never raises the signal
    assert g[2] == pytest.approx(mu / pd, rel=1e-12)
    if mtflag:
        assert g[3] <= 1e-12 * pd         # saturation never raises the signal
