"""Smoothing-optimization tests: calibration, loss/grad, AdamW, fusions."""

from __future__ import annotations

import numpy as np
import pytest

from fpq.formats import E2M1, FpFormat
from fpq.galt import (
    CalibrationSet,
    GaltProblem,
    LayerNormAffine,
    OptimizerState,
    OutlierSpec,
    adamw_step,
    build_calibration,
    fuse_lambda,
    fuse_lambda_weight,
    galt_grad,
    galt_loss,
    optimize_galt,
    synth_calibration,
)
from fpq.hadamard import HadamardConfig, apply_ght, fuse_weight_rotation
from fpq.quantize import Granularity, dequantize, quantize

GS = Granularity.per_group(128)

# Nearly lossless stand-in format: 16-bit-wide grid, relative step 2^-10.
FINE = FpFormat("E5M10", 5, 10, 15)


def _problem(seed: int = 7, dim: int = 256, out: int = 256) -> GaltProblem:
    calib = synth_calibration(seed=seed, dim=dim, outliers=OutlierSpec(count=4, magnitude=50.0))
    rng = np.random.default_rng(seed + 100)
    w = rng.standard_normal((out, dim)) * 0.5
    return GaltProblem(calib, w, HadamardConfig(dim=dim, group_size=128), E2M1, GS)


class TestCalibration:
    def test_build_concatenates_per_step(self) -> None:
        rng = np.random.default_rng(0)
        samples = [
            [rng.standard_normal((1, 8)), rng.standard_normal((4, 8))]
            for _ in range(2)
        ]
        calib = build_calibration(samples)
        assert [s.shape for s in calib.per_step] == [(2, 8), (8, 8)]
        assert calib.step_token_counts == (1, 4)
        assert calib.n_samples == 2
        np.testing.assert_array_equal(calib.per_step[0][0], samples[0][0][0])
        np.testing.assert_array_equal(calib.per_step[0][1], samples[1][0][0])

    def test_single_sample_passthrough(self) -> None:
        sample = [np.ones((2, 4)), np.ones((5, 4))]
        calib = build_calibration([sample])
        for got, want in zip(calib.per_step, sample):
            np.testing.assert_array_equal(got, want)

    def test_row_count_law(self) -> None:
        rng = np.random.default_rng(1)
        n, counts = 10, (1, 4, 9)
        samples = [[rng.standard_normal((t, 16)) for t in counts] for _ in range(n)]
        calib = build_calibration(samples)
        assert all(s.shape[0] == n * t for s, t in zip(calib.per_step, counts))

    def test_ragged_schedule_rejected(self) -> None:
        good = [np.ones((1, 4)), np.ones((4, 4))]
        bad = [np.ones((1, 4)), np.ones((3, 4))]
        with pytest.raises(ValueError, match="schedule"):
            build_calibration([good, bad])

    def test_token_counts_must_increase(self) -> None:
        with pytest.raises(ValueError, match="strictly increase"):
            CalibrationSet([np.ones((4, 8)), np.ones((4, 8))], (4, 4), 8)


class TestSynthCalibration:
    def test_deterministic(self) -> None:
        a = synth_calibration(seed=3)
        b = synth_calibration(seed=3)
        for x, y in zip(a.per_step, b.per_step):
            np.testing.assert_array_equal(x, y)

    def test_no_outliers_plain_gaussian(self) -> None:
        calib = synth_calibration(seed=4, outliers=None)
        tall = calib.per_step[-1]
        assert np.abs(tall).max() < 8  # no planted channels

    def test_outlier_positions_vary_across_steps(self) -> None:
        calib = synth_calibration(seed=5, outliers=OutlierSpec(count=4, magnitude=100.0))
        planted = []
        for x in calib.per_step[3:]:
            absmax = np.abs(x).max(axis=0)
            planted.append(frozenset(np.flatnonzero(absmax > 10 * np.median(absmax))))
        assert len(set(planted)) > 1


class TestLossAndGrad:
    def test_lossless_format_gives_zero_loss(self) -> None:
        prob = _problem()
        fp4_loss = galt_loss(prob, 9)
        fine = GaltProblem(prob.calib, prob.weight, prob.hadamard, FINE, GS)
        assert galt_loss(fine, 9) < 1e-4 * fp4_loss

    def test_lambda_one_equals_rotation_only_error(self) -> None:
        prob = _problem()
        x = prob.calib.per_step[5]
        a = dequantize(quantize(apply_ght(x, prob.hadamard), E2M1, GS))
        w = dequantize(quantize(fuse_weight_rotation(prob.weight, prob.hadamard), E2M1, GS))
        direct = float(np.mean((a @ w.T - x @ prob.weight.T) ** 2))
        assert galt_loss(prob, 5) == pytest.approx(direct, rel=1e-10)

    def test_global_lambda_scale_cancels_unquantized(self) -> None:
        prob = _problem(dim=128, out=32)
        x = prob.calib.per_step[2]
        w = prob.weight
        cfg = prob.hadamard
        rng = np.random.default_rng(8)
        lam = np.exp(rng.uniform(-0.5, 0.5, 128))
        for c in (1.0, 3.7):
            out = apply_ght(x * (c * lam), cfg) @ apply_ght(w / (c * lam), cfg).T
            np.testing.assert_allclose(out, x @ w.T, rtol=1e-8)

    def test_full_precision_path_invariant_to_lambda(self) -> None:
        prob = _problem(dim=128, out=64)
        rng = np.random.default_rng(9)
        lam = np.exp(rng.uniform(-1, 1, 128))
        x = prob.calib.per_step[7]
        out = apply_ght(x * lam, prob.hadamard) @ fuse_lambda_weight(prob.weight, lam, prob.hadamard).T
        ref = x @ prob.weight.T
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-10

    def test_gradient_shape_and_validation(self) -> None:
        prob = _problem(dim=128, out=32)
        assert galt_grad(prob, 0).shape == (128,)
        with pytest.raises(ValueError, match="out of range"):
            galt_loss(prob, 99)
        prob.lam = np.zeros(128)
        with pytest.raises(ValueError, match="positive"):
            galt_loss(prob, 0)

    def test_lossless_gradient_vanishes(self) -> None:
        prob = _problem(dim=128, out=64)
        fp4_scale = np.abs(galt_grad(prob, 4)).max()
        fine = GaltProblem(prob.calib, prob.weight, prob.hadamard, FINE, GS)
        assert np.abs(galt_grad(fine, 4)).max() < 1e-3 * fp4_scale

    def test_gradient_matches_surrogate_finite_differences(self) -> None:
        # The straight-through backward differentiates the forward with the
        # quantization residual frozen at the evaluation point; central
        # differences of that surrogate are the oracle.
        prob = _problem(dim=256, out=128)
        step = 6
        x = prob.calib.per_step[step]
        w = prob.weight
        cfg = prob.hadamard
        lam0 = prob.lam.copy()
        a0 = apply_ght(x * lam0, cfg)
        w0 = apply_ght(w / lam0, cfg)
        ra = dequantize(quantize(a0, E2M1, GS)) - a0
        rw = dequantize(quantize(w0, E2M1, GS)) - w0
        ref = x @ w.T

        def surrogate(lam: np.ndarray) -> float:
            aq = apply_ght(x * lam, cfg) + ra
            wq = apply_ght(w / lam, cfg) + rw
            return float(np.mean((aq @ wq.T - ref) ** 2))

        grad = galt_grad(prob, step)
        h = 1e-3
        rng = np.random.default_rng(10)
        for c in rng.choice(256, 30, replace=False):
            lp, lm = lam0.copy(), lam0.copy()
            lp[c] += h
            lm[c] -= h
            fd = (surrogate(lp) - surrogate(lm)) / (2 * h)
            assert abs(grad[c] - fd) <= 5e-2 * max(abs(fd), abs(grad[c]))


class TestAdamW:
    def test_zero_gradient_no_motion(self) -> None:
        state = OptimizerState.fresh(4)
        lam = np.ones(4)
        np.testing.assert_array_equal(adamw_step(state, lam, np.zeros(4)), lam)

    def test_sign_scaled_steps_without_momentum(self) -> None:
        state = OptimizerState.fresh(1, lr=0.01, beta1=0.0, beta2=0.0)
        lam = np.ones(1)
        g = np.array([2.5])
        for t in range(1, 4):
            lam = adamw_step(state, lam, g)
            # m_hat = g, v_hat = g^2, so each step is lr * sign(g).
            np.testing.assert_allclose(lam, 1.0 - t * 0.01 * np.sign(g), rtol=1e-7)

    def test_positivity_floor(self) -> None:
        state = OptimizerState.fresh(1, lr=10.0, beta1=0.0, beta2=0.0)
        lam = adamw_step(state, np.array([0.5]), np.array([1.0]))
        assert lam[0] == state.min_value


class TestOptimize:
    def test_zero_epochs_returns_baseline(self) -> None:
        prob = _problem(dim=128, out=64)
        lam, history = optimize_galt(prob, epochs=0)
        np.testing.assert_array_equal(lam, np.ones(128))
        baseline = sum(galt_loss(prob, j) for j in range(prob.calib.num_steps))
        assert history == [pytest.approx(baseline)]

    def test_loss_improves_on_planted_outliers(self) -> None:
        prob = _problem()
        lam, history = optimize_galt(prob, epochs=8)
        assert min(history) < history[0]
        assert not np.allclose(lam, 1.0)

    def test_best_is_min_of_history(self) -> None:
        prob = _problem(dim=128, out=64)
        lam, history = optimize_galt(prob, epochs=5)
        best_idx = int(np.argmin(history))
        assert history[best_idx] == min(history)
        # Returned lambda reproduces its recorded epoch loss only for the
        # baseline entry; otherwise just confirm it never regresses.
        assert min(history) <= history[0]

    def test_problem_lambda_untouched(self) -> None:
        prob = _problem(dim=128, out=64)
        optimize_galt(prob, epochs=2)
        np.testing.assert_array_equal(prob.lam, np.ones(128))


class TestFusions:
    def test_identity_lambda(self) -> None:
        affine = LayerNormAffine(np.array([0.5, -0.25]), np.array([1.0, 2.0]))
        fused = fuse_lambda(affine, np.ones(2))
        np.testing.assert_array_equal(fused.alpha, affine.alpha)
        np.testing.assert_array_equal(fused.beta, affine.beta)

    def test_affine_equivalence(self) -> None:
        rng = np.random.default_rng(11)
        c = 64
        alpha = rng.standard_normal(c)
        beta = rng.standard_normal(c)
        lam = np.exp(rng.uniform(-1, 1, c))
        x = rng.standard_normal((32, c))
        fused = fuse_lambda(LayerNormAffine(alpha, beta), lam)
        unfused = (x * (1 + alpha) + beta) * lam
        refused = x * (lam + fused.alpha) + fused.beta
        np.testing.assert_allclose(refused, unfused, rtol=1e-7)

    def test_zero_affine_is_pure_scaling(self) -> None:
        lam = np.array([2.0, 0.5])
        fused = fuse_lambda(LayerNormAffine(np.zeros(2), np.zeros(2)), lam)
        x = np.array([[1.0, 4.0]])
        np.testing.assert_array_equal(x * (lam + fused.alpha) + fused.beta, x * lam)

    def test_weight_fusion_identity_lambda(self) -> None:
        w = np.random.default_rng(12).standard_normal((16, 128))
        cfg = HadamardConfig(dim=128, group_size=128)
        np.testing.assert_array_equal(
            fuse_lambda_weight(w, np.ones(128), cfg), fuse_weight_rotation(w, cfg)
        )

    def test_weight_fusion_halves_column(self) -> None:
        w = np.ones((4, 128))
        lam = np.ones(128)
        lam[3] = 2.0
        cfg = HadamardConfig(dim=128, group_size=128)
        scaled = w / lam
        np.testing.assert_array_equal(
            fuse_lambda_weight(w, lam, cfg), fuse_weight_rotation(scaled, cfg)
        )
        assert scaled[0, 3] == 0.5

    def test_rejects_non_positive_lambda(self) -> None:
        cfg = HadamardConfig(dim=128, group_size=128)
        with pytest.raises(ValueError, match="positive"):
            fuse_lambda_weight(np.ones((2, 128)), np.zeros(128), cfg)
