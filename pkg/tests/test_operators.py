import numpy as np
import pytest

from caduf import degradation as dg
from caduf.operators import (
    DownsampleOperator,
    ExactPinv,
    bicubic_taps,
    fit_klow,
    fit_klow_mlp,
    fit_pinv_net,
    klow_support,
    project,
)
from caduf.tensor import Tensor

from conftest import natural_patches


@pytest.fixture(scope="module")
def op2():
    return DownsampleOperator(2)


def test_bicubic_taps_sum_to_one_and_centred():
    for s in (2, 3, 4):
        taps, first = bicubic_taps(s)
        assert abs(taps.sum() - 1) < 1e-15
        np.testing.assert_allclose(taps, taps[::-1], atol=1e-16)
        # the tap window is centred on the output sample position (s - 1) / 2
        assert first + (taps.size - 1) / 2 == (s - 1) / 2


@pytest.mark.parametrize("s", [2, 4])
def test_apply_matches_two_stage_definition_interior(s):
    op = DownsampleOperator(s)
    x = np.random.default_rng(0).random((2, 3, 64, 64))
    a = op(x)
    margin = (op.kernel.shape[0] // 2 + 1) // s + 1
    b = np.stack([op.reference(xi) for xi in x])
    assert np.abs(a - b)[..., margin:-margin, margin:-margin].max() < 1e-8


def test_apply_constant_and_linear(op2):
    c = np.full((1, 3, 16, 16), 0.42)
    np.testing.assert_allclose(op2(c), 0.42, atol=1e-14)
    rng = np.random.default_rng(1)
    x1, x2 = rng.random((2, 1, 3, 16, 16))
    assert np.abs(op2(0.3 * x1 + 0.7 * x2) - 0.3 * op2(x1) - 0.7 * op2(x2)).max() < 1e-10


def test_apply_indivisible(op2):
    with pytest.raises(ValueError):
        op2(np.zeros((1, 1, 15, 16)))


def test_separable_factors_match_conv(op2):
    x = np.random.default_rng(2).random((1, 2, 32, 24))
    ay, ax = op2.axis_matrix(32, 0), op2.axis_matrix(24, 1)
    np.testing.assert_allclose(ay @ x @ ax.T, op2(x), atol=1e-13)


def test_dense_pinv_identities(op2):
    pinv = ExactPinv(op2, dense=True)
    A = op2.matrix((32, 32))
    P = pinv.matrix((16, 16))
    assert np.abs(A @ P @ A - A).max() < 1e-8
    assert np.abs(P @ A @ P - P).max() < 1e-8
    assert np.abs(A @ P - np.eye(A.shape[0])).max() < 1e-8
    Q = P @ A
    assert np.abs(Q @ Q - Q).max() < 1e-8


def test_dense_pinv_size_limit(op2):
    with pytest.raises(ValueError):
        op2.matrix((66, 66))


def test_separable_pinv_equals_dense(op2):
    a = ExactPinv(op2, dense=True).matrix((12, 12))
    b = ExactPinv(op2).matrix((12, 12))
    assert np.abs(a - b).max() < 1e-10


@pytest.fixture(scope="module")
def projection_setup(op2):
    rng = np.random.default_rng(3)
    return ExactPinv(op2), rng.random((2, 3, 32, 32)), rng.random((2, 3, 16, 16))


def test_project_consistency(op2, projection_setup):
    pinv, xp, yd = projection_setup
    xu = project(xp, yd, op2, pinv)
    assert np.abs(op2(xu) - yd).max() < 1e-8


def test_project_already_consistent(op2, projection_setup):
    pinv, xp, _ = projection_setup
    np.testing.assert_allclose(project(xp, op2(xp), op2, pinv), xp, atol=1e-10)


def test_project_idempotent(op2, projection_setup):
    pinv, xp, yd = projection_setup
    once = project(xp, yd, op2, pinv)
    assert np.abs(project(once, yd, op2, pinv) - once).max() < 1e-10


def test_null_space_component_annihilated(op2, projection_setup):
    pinv, xp, _ = projection_setup
    v = xp - pinv(op2(xp))
    assert np.abs(op2(v)).max() < 1e-8


def test_project_shape_mismatch(op2, projection_setup):
    pinv, xp, _ = projection_setup
    with pytest.raises(ValueError):
        project(xp, np.zeros((2, 3, 15, 16)), op2, pinv)


def test_project_differentiable(op2, projection_setup):
    pinv, xp, yd = projection_setup
    x = Tensor(xp.copy(), requires_grad=True)
    y = Tensor(yd.copy(), requires_grad=True)
    out = project(x, y, op2, pinv)
    w = np.random.default_rng(4).standard_normal(out.shape)
    from caduf import functional as F

    F.sum(out * Tensor(w)).backward()
    # gradient of <w, (I - P A) x + P y> is (I - P A)^T w and P^T w
    A = op2.matrix((32, 32))
    P = pinv.matrix((16, 16))
    gx = w.reshape(6, -1) @ (np.eye(1024) - P @ A)
    gy = w.reshape(6, -1) @ P
    np.testing.assert_allclose(x.grad.reshape(6, -1), gx, atol=1e-10)
    np.testing.assert_allclose(y.grad.reshape(6, -1), gy, atol=1e-10)


def test_pinv_net_training_reduces_objective():
    op = DownsampleOperator(1, np.ones((1, 1)))
    rng = np.random.default_rng(5)
    imgs = natural_patches(4, 32, seed=1)
    net, rep = fit_pinv_net(op, imgs, rng, threshold=1e-7, max_steps=150, batch=2, patch=16, lr=2e-3)
    assert rep.steps == 150 and not rep.converged
    assert np.mean(rep.history[-10:]) < 0.25 * np.mean(rep.history[:10])
    assert net.residual == rep.loss


def test_fit_klow_delta():
    kl, res = fit_klow(dg.delta_kernel(1), 2, natural_patches(3, 96, gray=True))
    assert res < 1e-12
    np.testing.assert_allclose(kl, dg.delta_kernel(3), atol=1e-10)


def test_fit_klow_gaussian_on_natural_patches():
    kl, res = fit_klow(dg.gaussian_kernel(2.0), 2, natural_patches(6, 96, gray=True))
    assert res < 0.01
    assert 0.99 <= kl.sum() <= 1.01


def test_fit_klow_residual_nonincreasing_in_support():
    k = dg.compose_kernels(dg.gaussian_kernel(1.2), dg.linear_motion_kernel(40.0, 7.0))
    patches = natural_patches(3, 96, gray=True)
    res = [fit_klow(k, 2, patches, support=m, margin=9)[1] for m in (3, 5, 7, 9, 11)]
    assert all(b <= a + 1e-15 for a, b in zip(res, res[1:]))


def test_klow_support_rule():
    assert klow_support(np.ones((13, 13)), 2) == 9  # ceil(13/2)=7 -> 7 odd -> +2
    assert klow_support(np.ones((12, 5)), 4) == 5  # 3 -> 3 -> +2
    assert klow_support(np.ones((1, 1)), 2) == 3


def test_fit_klow_mlp_small():
    rng = np.random.default_rng(6)
    kernels = [dg.gaussian_kernel(s, 9) for s in np.linspace(0.4, 1.4, 6)]
    fit = fit_klow_mlp(kernels, 2, natural_patches(2, 64, gray=True), rng=rng, epochs=40, lr=1e-3,
                       hidden=64, batches_per_epoch=25, batch=6)
    assert len(fit.residuals) == 6
    assert all(np.isfinite(fit.residuals))
    assert fit.history[-1] < fit.history[0]


def test_klow_mlp_starts_at_mean_target():
    from caduf.operators import KLowMLP, klow_system, pad_kernel, solve_klow

    patches = natural_patches(2, 48, gray=True)
    kernels = [dg.gaussian_kernel(s, 7) for s in (0.5, 0.9, 1.3)]
    systems = [klow_system(k, 2, patches, 5) for k in kernels]
    targets = np.stack([solve_klow(sy) for sy in systems])
    inputs = np.stack([pad_kernel(k, 7).ravel() for k in kernels])
    net = KLowMLP(7, 5, np.random.default_rng(0), hidden=16)
    net.standardize(inputs, targets, systems[0].gram / systems[0].rows)
    np.testing.assert_allclose(net(inputs).data, np.broadcast_to(targets.mean(0), targets.shape), atol=1e-14)
    # the whitened basis turns the shared quadratic form into the identity
    B = net.out_basis
    g = systems[0].gram / systems[0].rows
    assert np.abs(B @ g @ B.T - np.eye(25)).max() < 1e-6
