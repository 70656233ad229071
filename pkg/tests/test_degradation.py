import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caduf import degradation as dg


def test_gaussian_near_delta_for_small_sigma():
    k = dg.gaussian_kernel(0.2, 13)
    assert k[6, 6] > 0.99
    # direct evaluation of the sampled Gaussian
    r = np.arange(13) - 6
    g = np.exp(-(r ** 2) / (2 * 0.04))
    ref = np.outer(g, g) / np.outer(g, g).sum()
    np.testing.assert_allclose(k, ref, rtol=1e-12, atol=1e-300)


@settings(max_examples=25, deadline=None)
@given(sigma=st.floats(0.2, 4.0))
def test_gaussian_symmetry_and_mass(sigma):
    k = dg.gaussian_kernel(sigma)
    np.testing.assert_allclose(k, k.T, atol=1e-18)
    np.testing.assert_allclose(k, k[::-1, ::-1], atol=1e-18)
    assert abs(k.sum() - 1) < 1e-8
    assert k.shape[0] == 2 * int(np.ceil(3 * sigma)) + 1


def test_gaussian_errors():
    with pytest.raises(ValueError):
        dg.gaussian_kernel(0.0)
    with pytest.raises(ValueError):
        dg.gaussian_kernel(1.0, 4)


def test_linear_motion_length_one_is_delta():
    np.testing.assert_array_equal(dg.linear_motion_kernel(37.0, 1.0), dg.delta_kernel(1))


def test_linear_motion_horizontal_five_taps():
    k = dg.linear_motion_kernel(0.0, 5.0)
    rows = np.nonzero(k.any(axis=1))[0]
    assert len(rows) == 1 and rows[0] == k.shape[0] // 2
    assert np.count_nonzero(k) == 5


def test_linear_motion_vertical_is_transpose_of_horizontal():
    np.testing.assert_allclose(dg.linear_motion_kernel(90.0, 7.0), dg.linear_motion_kernel(0.0, 7.0).T, atol=1e-12)


def test_linear_motion_angle_range():
    with pytest.raises(ValueError):
        dg.linear_motion_kernel(180.0, 3.0)
    with pytest.raises(ValueError):
        dg.linear_motion_kernel(-1.0, 3.0)
    with pytest.raises(ValueError):
        dg.linear_motion_kernel(10.0, 0.5)


def test_sm_length_ranges():
    assert dg.FAMILIES["GaussianSM"][2]["length"] == (1.0, 9.0)
    assert dg.FAMILIES["GaussianSM"][4]["length"] == (1.0, 15.0)
    rng = np.random.default_rng(0)
    for s, hi in ((2, 9.0), (4, 15.0)):
        lengths = [dg.sample_spec(rng, "GaussianSM", s).motion[2] for _ in range(300)]
        assert 1.0 <= min(lengths) and max(lengths) <= hi


@settings(max_examples=30, deadline=None)
@given(angle=st.floats(0, 179.99), length=st.floats(1, 15))
def test_linear_motion_kernel_invariants(angle, length):
    dg.validate_kernel(dg.linear_motion_kernel(angle, length))


def test_trajectory_min_anxiety_is_compact():
    fits = 0
    for seed in range(1000):
        k = dg.trajectory_kernel(np.random.default_rng(seed), anxiety=1e-3)
        rows = np.nonzero(k.any(axis=1))[0]
        cols = np.nonzero(k.any(axis=0))[0]
        if np.ptp(rows) < 15 and np.ptp(cols) < 15:
            fits += 1
    assert fits >= 900


def test_trajectory_sides_and_mass():
    for seed in range(60):
        rng = np.random.default_rng(seed)
        k = dg.trajectory_kernel(rng, max_length=16.0 if seed % 2 else 60.0)
        dg.validate_kernel(k)
        assert all(11 <= d <= 45 for d in k.shape)


def test_compose_with_delta_is_identity():
    k = dg.linear_motion_kernel(33.0, 6.0)
    np.testing.assert_allclose(dg.compose_kernels(k, dg.delta_kernel(1)), k, atol=1e-15)


def test_compose_gaussians_adds_variances():
    a, b = 1.0, 1.5
    k = dg.compose_kernels(dg.gaussian_kernel(a, 21), dg.gaussian_kernel(b, 21))
    ref = dg.gaussian_kernel(np.hypot(a, b), k.shape[0])
    assert np.abs(k - ref).max() < 1e-3
    assert abs(k.sum() - 1) < 1e-8


def test_compose_caps_side():
    big = dg.trajectory_kernel(np.random.default_rng(1), max_length=80.0)
    k = dg.compose_kernels(big, dg.gaussian_kernel(3.0))
    assert max(k.shape) <= 45
    dg.validate_kernel(k)


def test_blur_delta_and_constant():
    rng = np.random.default_rng(0)
    x = rng.random((3, 20, 22))
    np.testing.assert_array_equal(dg.blur(x, dg.delta_kernel(3)), x)
    c = np.full((3, 20, 22), 0.37)
    np.testing.assert_allclose(dg.blur(c, dg.gaussian_kernel(1.3)), c, atol=1e-15)


def test_blur_circular_matches_fft():
    rng = np.random.default_rng(1)
    x = rng.random((2, 24, 20))
    k = dg.compose_kernels(dg.gaussian_kernel(1.0), dg.linear_motion_kernel(30.0, 5.0))
    out = dg.blur(x, k, "circular")
    kp = np.zeros((24, 20))
    kp[: k.shape[0], : k.shape[1]] = k
    kp = np.roll(kp, (-(k.shape[0] // 2), -(k.shape[1] // 2)), axis=(0, 1))
    ref = np.real(np.fft.ifft2(np.fft.fft2(x) * np.fft.fft2(kp)))
    assert np.abs(out - ref).max() < 1e-10


def test_blur_kernel_too_large():
    with pytest.raises(ValueError):
        dg.blur(np.zeros((5, 5)), dg.gaussian_kernel(2.0))


def _bicubic_reference(x, s):
    """Loop implementation of antialiased Keys downsampling with replicate borders."""
    def resample_1d(v, n_out):
        n_in = v.size
        out = np.zeros(n_out)
        for i in range(n_out):
            centre = (i + 0.5) * s - 0.5
            acc = wsum = 0.0
            for j in range(int(np.floor(centre - 2 * s)), int(np.ceil(centre + 2 * s)) + 1):
                t = abs(centre - j) / s
                if t < 1:
                    w = 1.5 * t ** 3 - 2.5 * t ** 2 + 1
                elif t < 2:
                    w = -0.5 * t ** 3 + 2.5 * t ** 2 - 4 * t + 2
                else:
                    w = 0.0
                acc += w * v[min(max(j, 0), n_in - 1)]
                wsum += w
            out[i] = acc / wsum
        return out

    h, w = x.shape
    rows = np.array([resample_1d(x[r], w // s) for r in range(h)])
    return np.array([resample_1d(rows[:, c], h // s) for c in range(w // s)]).T


@pytest.mark.parametrize("s", [2, 3, 4])
def test_bicubic_matches_loop_reference(s):
    x = np.random.default_rng(2).random((4 * s * 3, 4 * s * 2))
    assert np.abs(dg.bicubic_downsample(x, s) - _bicubic_reference(x, s)).max() < 1e-10


def test_bicubic_constant_and_identity():
    c = np.full((3, 16, 16), 0.8)
    np.testing.assert_allclose(dg.bicubic_downsample(c, 4), 0.8, atol=1e-15)
    x = np.random.default_rng(3).random((3, 8, 8))
    np.testing.assert_array_equal(dg.bicubic_downsample(x, 1), x)
    with pytest.raises(ValueError):
        dg.bicubic_downsample(np.zeros((9, 8)), 2)


def test_sample_spec_ranges():
    rng = np.random.default_rng(4)
    for _ in range(200):
        sm2 = dg.sample_spec(rng, "GaussianSM", 2)
        assert 0.2 <= sm2.sigma <= 2.0 and sm2.noise == 0.0
        sm4 = dg.sample_spec(rng, "GaussianSM", 4)
        assert 0.2 <= sm4.sigma <= 4.0 and 1 <= sm4.motion[2] <= 15
        cm2 = dg.sample_spec(rng, "GaussianCM", 2)
        assert 0.2 <= cm2.sigma <= 1.0 and cm2.noise == 0.01
        cm4 = dg.sample_spec(rng, "GaussianCM", 4)
        assert 0.2 <= cm4.sigma <= 2.0 and cm4.motion[0] == "trajectory"
        assert 0.0 <= cm4.motion[3] <= 1.0 and cm4.motion[2] == 0.8


def test_generated_kernels_valid():
    rng = np.random.default_rng(5)
    for fam in ("GaussianSM", "GaussianCM"):
        for s in (2, 4):
            for _ in range(10):
                dg.validate_kernel(dg.sample_spec(rng, fam, s).kernel())


def test_spec_validation():
    with pytest.raises(ValueError):
        dg.DegradationSpec(3, 1.0).validate()
    with pytest.raises(ValueError):
        dg.DegradationSpec(2, 1.0, ("linear", 10.0, 0.5)).validate()
    with pytest.raises(ValueError):
        dg.DegradationSpec(2, 3.0, family="GaussianCM").validate()
    with pytest.raises(ValueError):
        dg.sample_spec(np.random.default_rng(0), "GaussianXX", 2)


def _delta_fitter(k, s):
    return dg.delta_kernel(3)


def test_synthesize_delta_kernel_exact_bicubic():
    x = np.random.default_rng(6).random((3, 32, 32))
    spec = dg.DegradationSpec(2, 0.01, noise=0.0)
    pair = dg.synthesize(x, spec, _delta_fitter)
    # sigma 0.01 samples to an exact delta
    np.testing.assert_array_equal(pair.k, dg.delta_kernel(1))
    np.testing.assert_array_equal(pair.y, dg.bicubic_downsample(x, 2))
    assert pair.y.shape == (3, 16, 16) and pair.y_anchor.shape == (3, 16, 16)


def test_synthesize_noise_level():
    x = np.random.default_rng(7).random((3, 512, 512))
    spec = dg.DegradationSpec(2, 0.5, noise=0.01, seed=11)
    noisy = dg.synthesize(x, spec, _delta_fitter).y
    clean = dg.synthesize(x, dg.with_noise(spec, 0.0), _delta_fitter).y
    d = noisy - clean
    assert d.size >= 1e5
    assert 0.009 <= d.std() <= 0.011


def test_anchor_sigmas():
    assert dg.ANCHOR_SIGMA == {2: 0.8, 4: 1.8}
    spec = dg.DegradationSpec(4, 1.0)
    np.testing.assert_array_equal(spec.anchor_kernel(), dg.gaussian_kernel(1.8))


def test_synthesize_deterministic():
    x = np.random.default_rng(8).random((3, 48, 48))
    spec = dg.sample_spec(np.random.default_rng(9), "GaussianCM", 2)
    a, b = dg.synthesize(x, spec), dg.synthesize(x, spec)
    for f in ("y", "k", "klow", "y_anchor"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_synthesize_rejects_bad_input():
    spec = dg.DegradationSpec(2, 1.0)
    with pytest.raises(ValueError):
        dg.synthesize(np.zeros((3, 15, 16)), spec, _delta_fitter)
    with pytest.raises(ValueError):
        dg.synthesize(np.full((3, 16, 16), 1.5), spec, _delta_fitter)


def test_dead_leaves_range():
    img = dg.dead_leaves(np.random.default_rng(0), 64, channels=3)
    assert img.shape == (3, 64, 64)
    assert 0 <= img.min() and img.max() <= 1
