import numpy as np
import pytest

from binderflow.denoiser.field import (
    AnalyticGaussianField,
    FieldArch,
    MLPField,
    TargetContext,
    field_forward,
    gaussian_velocity,
    stack_contexts,
)
from binderflow.flowcore import BinderState, CFMBatch, NoisyState, NumericError, cfm_loss

SMALL = FieldArch(d_z=2, hidden=(4,), time_freqs=1, pos_freqs=1, embed_dim=2, n_classes=2)


def make_ctx(rng, m=7, label=1):
    flags = np.zeros(m, bool)
    flags[:3] = True
    return TargetContext(rng.standard_normal((m, 3)) * 12, flags, class_label=label)


def noisy(rng, n=5, dz=2, t=(0.3, 0.2)):
    return NoisyState(BinderState(rng.standard_normal((n, 3)), rng.standard_normal((n, dz))), *t)


class TestMLPField:
    def test_zero_parameters_give_zero(self):
        rng = np.random.default_rng(0)
        vx, vz = field_forward(MLPField(SMALL), noisy(rng), make_ctx(rng))
        assert not vx.any() and not vz.any()
        assert vx.shape == (5, 3) and vz.shape == (5, 2)

    def test_permuting_target_points(self):
        rng = np.random.default_rng(1)
        field = MLPField.init(SMALL, rng)
        ctx = make_ctx(rng)
        perm = rng.permutation(len(ctx.points))
        shuffled = TargetContext(ctx.points[perm], ctx.hotspot_flags[perm], class_label=ctx.class_label)
        state = noisy(rng)
        a = field_forward(field, state, ctx)
        b = field_forward(field, state, shuffled)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_time_embedding_not_collapsed(self):
        rng = np.random.default_rng(2)
        field = MLPField.init(SMALL, rng)
        ctx = make_ctx(rng)
        base = noisy(rng)
        late = NoisyState(base.state, 1.0, 1.0)
        early = NoisyState(base.state, 0.0, 0.0)
        assert np.linalg.norm(field_forward(field, late, ctx)[0] - field_forward(field, early, ctx)[0]) > 0

    def test_hotspots_matter(self):
        rng = np.random.default_rng(3)
        field = MLPField.init(SMALL, rng)
        ctx = make_ctx(rng)
        moved = TargetContext(ctx.points, np.roll(ctx.hotspot_flags, 3), class_label=ctx.class_label)
        state = noisy(rng)
        assert not np.allclose(field_forward(field, state, ctx)[0], field_forward(field, state, moved)[0])

    def test_batched_context_matches_single(self):
        rng = np.random.default_rng(4)
        field = MLPField.init(SMALL, rng)
        ctxs = [make_ctx(rng) for _ in range(3)]
        x = rng.standard_normal((3, 5, 3))
        z = rng.standard_normal((3, 5, 2))
        t = np.array([0.1, 0.5, 0.9])
        vx, _ = field.velocity(x, z, t, t, stack_contexts(ctxs))
        for i in range(3):
            single, _ = field.velocity(x[i : i + 1], z[i : i + 1], t[i : i + 1], t[i : i + 1], ctxs[i])
            np.testing.assert_allclose(vx[i], single[0], atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        field = MLPField.init(SMALL, rng)
        ctx, state = make_ctx(rng), noisy(rng)
        assert np.array_equal(field_forward(field, state, ctx)[0], field_forward(field, state, ctx)[0])

    def test_nan_input(self):
        field = MLPField(SMALL)
        x = np.full((1, 2, 3), np.nan)
        with pytest.raises(NumericError):
            field.velocity(x, np.zeros((1, 2, 2)), np.array([0.5]), np.array([0.5]))

    def test_wrong_parameter_count(self):
        with pytest.raises(ValueError):
            MLPField(SMALL, np.zeros(3))

    def test_arch_roundtrip(self):
        assert FieldArch.from_dict(SMALL.to_dict()) == SMALL

    def test_smooth_in_parameters(self):
        rng = np.random.default_rng(6)
        field = MLPField.init(SMALL, rng)
        ctx, state = make_ctx(rng), noisy(rng)
        direction = rng.standard_normal(field.params.size)
        outs = []
        for h in (0.0, 1e-4, 2e-4):
            probe = MLPField(SMALL, field.params + h * direction)
            outs.append(field_forward(probe, state, ctx)[0])
        # second difference scales as h^2 for a smooth map
        assert np.abs(outs[2] - 2 * outs[1] + outs[0]).max() < 1e-5


def _fd_check(field, batch, seed, coords, eps=1e-6):
    _, grad = cfm_loss(field, batch, np.random.default_rng(seed), c_d=0.2)
    fd = []
    for i in coords:
        keep = field.params[i]
        field.params[i] = keep + eps
        lp, _ = cfm_loss(field, batch, np.random.default_rng(seed), c_d=0.2, with_grad=False)
        field.params[i] = keep - eps
        lm, _ = cfm_loss(field, batch, np.random.default_rng(seed), c_d=0.2, with_grad=False)
        field.params[i] = keep
        fd.append((lp - lm) / (2 * eps))
    fd = np.array(fd)
    return np.linalg.norm(grad[coords] - fd) / max(np.linalg.norm(fd), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cfm_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    field = MLPField.init(SMALL, rng)
    field.params += 0.1 * rng.standard_normal(field.params.size)
    batch = CFMBatch(rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 4, 2)), make_ctx(rng))
    coords = rng.choice(field.params.size, 10, replace=False)
    assert _fd_check(field, batch, seed, coords) <= 1e-4


def test_full_gradient_tiny_field():
    arch = FieldArch(d_z=1, hidden=(2,), time_freqs=1, pos_freqs=1, embed_dim=1, n_classes=0)
    rng = np.random.default_rng(10)
    field = MLPField.init(arch, rng)
    field.params += 0.1 * rng.standard_normal(field.params.size)
    batch = CFMBatch(rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 1)), make_ctx(rng, label=None))
    assert _fd_check(field, batch, 0, np.arange(field.params.size)) <= 1e-4


class TestAnalyticField:
    def test_standard_case_is_odd_and_zero_at_half(self):
        # with data equal to the source, v* = (2t - 1) x / (t^2 + (1 - t)^2): zero only at t = 1/2
        field = AnalyticGaussianField(np.zeros((1, 3)), 1.0)
        x = np.linspace(-3, 3, 100).reshape(-1, 1, 1) * np.ones((1, 1, 3))
        half = np.full(100, 0.5)
        vx, _ = field.velocity(x, np.zeros((100, 1, 1)), half, half)
        assert np.abs(vx).max() == 0.0
        t = np.full(100, 0.8)
        vx, _ = field.velocity(x, np.zeros((100, 1, 1)), t, t)
        vneg, _ = field.velocity(-x, np.zeros((100, 1, 1)), t, t)
        np.testing.assert_allclose(vx, -vneg)
        np.testing.assert_allclose(vx, (2 * 0.8 - 1) * x / (0.64 + 0.04))

    @pytest.mark.parametrize("x_star,t", [(0.4, 0.3), (1.8, 0.7), (-0.5, 0.5)])
    def test_conditional_expectation_monte_carlo(self, x_star, t):
        mu, sigma = 1.5, 0.7
        rng = np.random.default_rng(42)
        x1 = mu + sigma * rng.standard_normal(4_000_000)
        x0 = rng.standard_normal(4_000_000)
        xt = t * x1 + (1 - t) * x0
        keep = np.abs(xt - x_star) < 0.005
        u = (x1 - x0)[keep]
        se = u.std() / np.sqrt(u.size)
        assert abs(u.mean() - gaussian_velocity(x_star, t, mu, sigma**2)) < 3 * se

    def test_translation_noise_modes_against_joint_gaussian(self):
        # Oracle: E[x1 - x0 - d1 | x_t] from the full joint covariance of all 3N coordinates.
        n, sigma, c_d, t = 4, 0.6, 0.3, 0.45
        rng = np.random.default_rng(0)
        mu = rng.standard_normal((n, 3))
        field = AnalyticGaussianField(mu, sigma, c_d=c_d)
        ones = np.kron(np.ones((n, 1)), np.eye(3))
        src_cov = np.eye(3 * n) + c_d**2 * ones @ ones.T
        data_cov = sigma**2 * np.eye(3 * n)
        cov_t = t * t * data_cov + (1 - t) ** 2 * src_cov
        cov_ut = t * data_cov - (1 - t) * src_cov
        x = rng.standard_normal((n, 3))
        m = mu.ravel()
        expected = m + cov_ut @ np.linalg.solve(cov_t, x.ravel() - t * m)
        vx, _ = field.velocity(x[None], np.zeros((1, n, 1)), np.array([t]), np.array([t]))
        np.testing.assert_allclose(vx[0].ravel(), expected, atol=1e-12)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            AnalyticGaussianField(np.zeros((1, 3)), 0.0)
