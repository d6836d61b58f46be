"""Schedule, analytic denoiser, guided loop, and the gradient chain."""

from __future__ import annotations

import numpy as np
import pytest

from varicurate import (
    EmbedMap,
    GuidanceConfig,
    MixtureModel,
    NoiseSchedule,
    ParameterError,
    SandboxTrajectory,
    analytic_eps,
    diversity_report,
    guidance_gradient,
    guided_sample,
    unguided_sample,
    vendi_score,
)


class TestNoiseSchedule:
    def test_cosine_shape_and_bounds(self):
        sched = NoiseSchedule.cosine(50)
        assert sched.T == 50
        assert sched.alphas[0] == 1.0
        assert sched.alphas[-1] > 0.0
        assert np.all(np.diff(sched.alphas) < 0)
        assert np.all(sched.alphas > 0) and np.all(sched.alphas <= 1)

    def test_linear_schedule_valid(self):
        sched = NoiseSchedule.linear(30)
        assert sched.T == 30
        assert np.all(np.diff(sched.alphas) < 0)

    def test_abar_range_check(self):
        sched = NoiseSchedule.cosine(10)
        assert sched.abar(1) == sched.alphas[1]
        with pytest.raises(ParameterError):
            sched.abar(0)
        with pytest.raises(ParameterError):
            sched.abar(11)

    def test_invalid_sequences_rejected(self):
        with pytest.raises(ParameterError):
            NoiseSchedule(np.array([0.9, 0.5]))  # must start at 1
        with pytest.raises(ParameterError):
            NoiseSchedule(np.array([1.0, 0.5, 0.5]))  # not strictly decreasing
        with pytest.raises(ParameterError):
            NoiseSchedule(np.array([1.0, 0.5, 0.0]))  # hits zero


class TestMixtureModel:
    def test_orthogonal_layout(self):
        model = MixtureModel.orthogonal(4, 8, radius=5.0, variance=0.25)
        assert model.n_components == 4
        assert model.dim == 8
        np.testing.assert_allclose(model.weights, 0.25)
        gram = model.means @ model.means.T
        np.testing.assert_allclose(gram, 25.0 * np.eye(4), atol=1e-12)

    def test_restrict_renormalizes(self):
        model = MixtureModel.orthogonal(4, 8)
        sub = model.restrict([1, 3])
        assert sub.n_components == 2
        np.testing.assert_allclose(sub.weights, 0.5)

    def test_validation(self):
        with pytest.raises(ParameterError):
            MixtureModel(np.array([0.5, 0.6]), np.eye(2), np.ones(2))
        with pytest.raises(ParameterError):
            MixtureModel(np.array([1.0]), np.zeros((1, 2)), np.array([0.0]))
        with pytest.raises(ParameterError):
            MixtureModel.orthogonal(4, 3)


class TestAnalyticEps:
    def test_single_standard_gaussian_closed_form(self, rng):
        # zero-mean unit-variance data makes the noised marginal standard
        # at every level, so the prediction is sqrt(1-abar) * z exactly
        model = MixtureModel(np.array([1.0]), np.zeros((1, 5)), np.array([1.0]))
        sched = NoiseSchedule.cosine(20)
        z = rng.standard_normal((6, 5)) * 2
        for t in (1, 7, 20):
            abar = sched.abar(t)
            eps = analytic_eps(z, t, sched, model)
            np.testing.assert_allclose(eps, np.sqrt(1 - abar) * z, rtol=1e-12)

    def test_basin_dominance(self):
        model = MixtureModel.orthogonal(2, 4, radius=3.0, variance=0.5)
        sched = NoiseSchedule.cosine(10)
        z = model.means[:1].copy()  # sitting on component 0's mean
        log_r, _, _, _ = model._posterior(z, sched.abar(5))
        assert np.exp(log_r[0, 0]) > 0.5

    def test_score_matches_log_density_finite_differences(self, rng):
        model = MixtureModel.orthogonal(3, 5, radius=2.0, variance=0.7)
        sched = NoiseSchedule.cosine(15)
        z = rng.standard_normal((4, 5)) * 1.5
        for t in (2, 9, 15):
            abar = sched.abar(t)
            eps = analytic_eps(z, t, sched, model)
            score = -eps / np.sqrt(1 - abar)
            h = 1e-6
            fd = np.zeros_like(z)
            for i in range(z.shape[0]):
                for j in range(z.shape[1]):
                    up = z.copy()
                    up[i, j] += h
                    dn = z.copy()
                    dn[i, j] -= h
                    fd[i, j] = (
                        model.log_density_t(up, abar)[i]
                        - model.log_density_t(dn, abar)[i]
                    ) / (2 * h)
            np.testing.assert_allclose(score, fd, rtol=1e-5, atol=1e-7)

    def test_step_out_of_range(self, rng):
        model = MixtureModel.orthogonal(2, 4)
        sched = NoiseSchedule.cosine(10)
        with pytest.raises(ParameterError):
            analytic_eps(rng.standard_normal((2, 4)), 0, sched, model)

    def test_dim_mismatch(self, rng):
        model = MixtureModel.orthogonal(2, 4)
        sched = NoiseSchedule.cosine(10)
        with pytest.raises(ParameterError):
            analytic_eps(rng.standard_normal((2, 5)), 3, sched, model)


class TestGuidanceGradient:
    def loss_through_chain(self, z, eps, abar, emap):
        z0 = (z - np.sqrt(1 - abar) * eps) / np.sqrt(abar)
        raw = emap.raw(z0)
        emb = raw / np.linalg.norm(raw, axis=1)[:, None]
        return -vendi_score(emb)

    @pytest.mark.parametrize("linear", [False, True])
    def test_matches_finite_differences(self, rng, linear):
        for trial in range(6):
            m = int(rng.integers(2, 9))
            d = int(rng.integers(2, 9))
            emap = (
                EmbedMap.random_linear(d, d + 2, seed=trial)
                if linear
                else EmbedMap.sphere()
            )
            z = rng.standard_normal((m, d)) * 2.0
            eps = rng.standard_normal((m, d))
            abar = float(rng.uniform(0.1, 0.9))
            _, grad, _ = guidance_gradient(z, eps, abar, emap)
            h = 1e-6
            fd = np.zeros_like(z)
            for i in range(m):
                for j in range(d):
                    up = z.copy()
                    up[i, j] += h
                    dn = z.copy()
                    dn[i, j] -= h
                    fd[i, j] = (
                        self.loss_through_chain(up, eps, abar, emap)
                        - self.loss_through_chain(dn, eps, abar, emap)
                    ) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_loss_value(self, rng):
        z = rng.standard_normal((4, 6))
        eps = rng.standard_normal((4, 6))
        loss, _, emb = guidance_gradient(z, eps, 0.5, EmbedMap.sphere())
        assert loss == pytest.approx(-vendi_score(emb), abs=1e-12)


def small_setup(T=8, d=4):
    return NoiseSchedule.cosine(T), MixtureModel.orthogonal(3, d), EmbedMap.sphere()


class TestGuidedSample:
    def test_scale_zero_is_bitwise_unguided(self):
        sched, model, emap = small_setup()
        for sampler in ("ancestral", "deterministic"):
            cfg = GuidanceConfig(scale=0.0, batch_size=5, sampler=sampler, seed=3)
            a = guided_sample(sched, model, emap, cfg)
            b = unguided_sample(sched, model, emap, cfg)
            assert np.array_equal(a.latents, b.latents)
            assert np.array_equal(a.final_embeddings, b.final_embeddings)

    def test_seed_determinism(self):
        sched, model, emap = small_setup()
        cfg = GuidanceConfig(scale=2.0, batch_size=4, seed=9)
        a = guided_sample(sched, model, emap, cfg)
        b = guided_sample(sched, model, emap, cfg)
        assert np.array_equal(a.latents, b.latents)
        assert np.array_equal(a.vendi_series, b.vendi_series)

    def test_different_seeds_differ(self):
        sched, model, emap = small_setup()
        a = guided_sample(sched, model, emap, GuidanceConfig(batch_size=4, seed=1))
        b = guided_sample(sched, model, emap, GuidanceConfig(batch_size=4, seed=2))
        assert not np.array_equal(a.latents, b.latents)

    def test_trajectory_shapes(self):
        sched, model, emap = small_setup(T=5, d=4)
        cfg = GuidanceConfig(scale=1.0, batch_size=7, seed=0)
        traj = guided_sample(sched, model, emap, cfg)
        assert traj.latents.shape == (6, 7, 4)
        assert traj.steps.tolist() == [5, 4, 3, 2, 1]
        assert traj.vendi_series.shape == (5,)
        assert traj.mean_cosine_series.shape == (5,)
        assert traj.final_embeddings.shape == (7, 4)
        np.testing.assert_allclose(
            np.linalg.norm(traj.final_embeddings, axis=1), 1.0, atol=1e-9
        )
        assert np.all(traj.vendi_series >= 1.0 - 1e-9)
        assert np.all(traj.vendi_series <= 7 + 1e-9)
        np.testing.assert_array_equal(traj.final_batch, traj.latents[0])

    def test_deterministic_single_step_returns_denoised_estimate(self, rng):
        # with one step, the update reduces to the clean reconstruction
        sched = NoiseSchedule.cosine(1)
        model = MixtureModel.orthogonal(2, 3)
        cfg = GuidanceConfig(scale=0.0, batch_size=4, sampler="deterministic", seed=5)
        traj = guided_sample(sched, model, EmbedMap.sphere(), cfg)
        z1 = traj.latents[1]
        abar = sched.abar(1)
        eps = analytic_eps(z1, 1, sched, model)
        z0 = (z1 - np.sqrt(1 - abar) * eps) / np.sqrt(abar)
        np.testing.assert_allclose(traj.latents[0], z0, atol=1e-12)

    def test_self_recurrence_changes_and_reproduces(self):
        sched, model, emap = small_setup()
        base = GuidanceConfig(scale=1.0, batch_size=4, seed=2)
        rec = GuidanceConfig(scale=1.0, batch_size=4, seed=2, self_recurrence=2)
        a = guided_sample(sched, model, emap, base)
        b = guided_sample(sched, model, emap, rec)
        c = guided_sample(sched, model, emap, rec)
        assert not np.array_equal(a.latents[0], b.latents[0])
        assert np.array_equal(b.latents, c.latents)

    def test_guidance_needs_batch_of_two(self):
        with pytest.raises(ParameterError):
            GuidanceConfig(scale=1.0, batch_size=1)
        GuidanceConfig(scale=0.0, batch_size=1)  # fine when guidance is off

    def test_linear_embed_map_runs(self):
        sched = NoiseSchedule.cosine(6)
        model = MixtureModel.orthogonal(2, 4)
        emap = EmbedMap.random_linear(4, 6, seed=1)
        traj = guided_sample(sched, model, emap, GuidanceConfig(batch_size=4, seed=0))
        assert traj.final_embeddings.shape == (4, 6)


class TestDiversityReport:
    def fabricate(self, finals):
        finals = np.asarray(finals, dtype=np.float64)
        m, d = finals.shape
        return SandboxTrajectory(
            latents=np.stack([finals, np.zeros_like(finals) + 0.5]),
            steps=np.array([1]),
            vendi_series=np.array([1.0]),
            mean_cosine_series=np.array([0.0]),
            final_embeddings=finals,
            seed=0,
        )

    def test_orthonormal_batch(self):
        rep = diversity_report(self.fabricate(np.eye(4)))
        assert rep.mean_pairwise_cosine == pytest.approx(0.0, abs=1e-12)
        assert rep.final_vendi == pytest.approx(4.0, abs=1e-8)

    def test_collapsed_batch(self):
        rep = diversity_report(self.fabricate(np.tile([1.0, 0.0], (5, 1))))
        assert rep.mean_pairwise_cosine == pytest.approx(1.0, abs=1e-12)
        assert rep.final_vendi == pytest.approx(1.0, abs=1e-8)

    def test_random_batch_matches_double_loop(self, rng):
        x = rng.standard_normal((7, 5))
        x /= np.linalg.norm(x, axis=1)[:, None]
        rep = diversity_report(self.fabricate(x))
        acc = [
            float(x[i] @ x[j])
            for i in range(7)
            for j in range(7)
            if i != j
        ]
        assert rep.mean_pairwise_cosine == pytest.approx(np.mean(acc), abs=1e-12)
