import math

import numpy as np
import pytest

from ssattn import tensor as T
from ssattn.errors import ConfigError, ShapeError
from ssattn.model import (Deraformer, LossWeights, ModelConfig, edge_loss, psnr_loss, total_loss)
from ssattn.tensor import Tensor
from ssattn.uncertainty import udl_loss

SMALL = ModelConfig(levels=2, channels=(4, 8), irm_blocks=(2, 2), heads=(1, 2), latent_blocks=1,
                    latent_heads=2, window_side=2)


def perturbed(cfg, seed=0, scale=0.05):
    model = Deraformer(cfg)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return model


class TestConfig:
    def test_rejects_non_increasing_channels(self):
        with pytest.raises(ConfigError):
            ModelConfig(channels=(8, 8, 16))

    def test_rejects_wrong_lengths_and_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(irm_blocks=(2, 2))
        with pytest.raises(ConfigError):
            ModelConfig(heads=(1, 3, 4))

    def test_dict_roundtrip_and_digest(self):
        cfg = ModelConfig(alpha=0.3)
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
        assert ModelConfig().digest() != cfg.digest()


class TestForward:
    @pytest.mark.parametrize("size", [32, 48, 64])
    def test_shape_contract(self, size):
        model = Deraformer(ModelConfig())
        x = np.random.default_rng(size).uniform(size=(3, size, size))
        out = model(x)
        assert out.final.shape == (3, size, size)
        for k, stage in enumerate(out.stages):
            s = size // 2 ** (2 - k)
            assert stage.derained.shape == (3, s, s) and stage.log_sigma.shape == (1, s, s)

    def test_non_divisible_extent_is_padded_and_cropped(self):
        out = Deraformer(ModelConfig())(np.random.default_rng(0).uniform(size=(2, 3, 20, 27)))
        assert out.final.shape == (2, 3, 20, 27)
        assert out.stages[0].derained.shape == (2, 3, 5, 7)

    def test_untrained_model_is_identity(self):
        x = np.random.default_rng(1).uniform(size=(3, 32, 32))
        np.testing.assert_array_equal(Deraformer(ModelConfig())(x).final.data, x)

    def test_deterministic(self):
        x = np.random.default_rng(2).uniform(size=(3, 16, 16))
        a = perturbed(ModelConfig(), seed=3)(x).final.data
        b = perturbed(ModelConfig(), seed=3)(x).final.data
        np.testing.assert_array_equal(a, b)

    def test_rejects_non_rgb(self):
        with pytest.raises(ShapeError):
            Deraformer(SMALL)(np.zeros((1, 8, 8)))

    def test_uncertainty_reaches_every_block(self):
        out = perturbed(SMALL)(np.random.default_rng(4).uniform(size=(3, 8, 8)))
        assert [len(s) for s in out.sigmas] == [2, 2]
        assert all(np.all(s > 0) for stage in out.sigmas for s in stage)

    def test_stage_targets_are_area_averages(self):
        gt = np.random.default_rng(5).uniform(size=(3, 8, 8))
        coarse, fine = Deraformer(SMALL).stage_targets(gt)
        np.testing.assert_allclose(coarse.data, gt.reshape(3, 4, 2, 4, 2).mean(axis=(2, 4)), atol=1e-15)
        np.testing.assert_array_equal(fine.data, gt)


class TestLosses:
    def test_psnr_loss_values(self):
        z = np.zeros((3, 4, 4))
        assert psnr_loss(z, z).item() == pytest.approx(-120.0)
        assert psnr_loss(z, np.ones_like(z)).item() == pytest.approx(0.0, abs=1e-10)
        assert psnr_loss(z, np.full_like(z, 0.1)).item() == pytest.approx(-20.0, abs=1e-9)

    def test_psnr_loss_batch_mean(self):
        a = np.zeros((2, 3, 2, 2))
        b = np.stack([np.full((3, 2, 2), 0.1), np.ones((3, 2, 2))])
        assert psnr_loss(a, b).item() == pytest.approx((-20.0 + 0.0) / 2, abs=1e-9)

    def test_edge_loss_shift_invariant(self):
        gt = np.random.default_rng(6).uniform(size=(3, 5, 5))
        assert edge_loss(gt, gt).item() == 0.0
        assert edge_loss(gt + 0.3, gt).item() == pytest.approx(0.0, abs=1e-15)

    def test_edge_loss_step_image(self):
        gt = np.zeros((1, 4, 4))
        gt[:, :, 2:] = 1.0
        # horizontal differences: one unit jump per row out of 4x3 entries; vertical: none
        dx = np.abs(np.diff(gt, axis=-1)).mean()
        dy = np.abs(np.diff(gt, axis=-2)).mean()
        assert dx == pytest.approx(4 / 12) and dy == 0.0
        assert edge_loss(np.zeros_like(gt), gt).item() == pytest.approx(dx + dy, abs=1e-15)

    def test_total_loss_weight_zeroing(self):
        model = perturbed(SMALL)
        x, gt = (np.random.default_rng(s).uniform(size=(3, 8, 8)) for s in (7, 8))
        out = model(x)
        lb = total_loss(out, gt, LossWeights(1.0, 0.0, 0.0), model=model)
        assert lb.total.item() == psnr_loss(out.final, gt).item()

    def test_total_loss_perfect_prediction(self):
        model = Deraformer(SMALL)
        x = np.random.default_rng(9).uniform(size=(3, 8, 8))
        out = model(x)
        targets = [Tensor(s.derained.data) for s in out.stages]
        lb = total_loss(out, x, stage_gts=targets)
        assert lb.total.item() == pytest.approx(-120.0, abs=1e-9)

    def test_total_loss_hand_sum(self):
        model = perturbed(SMALL, seed=1)
        rng = np.random.default_rng(10)
        x, gt = rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8))
        out = model(x)
        w = LossWeights(0.7, 0.3, 1.3)
        lb = total_loss(out, gt, w, model=model)
        pred = out.final.data
        mse = ((pred - gt) ** 2).mean(axis=(1, 2, 3))
        lp = np.mean(10 * np.log10(mse + 1e-12))
        le = np.abs(np.diff(pred - gt, axis=-1)).mean() + np.abs(np.diff(pred - gt, axis=-2)).mean()
        lu = 0.0
        for stage, tgt in zip(out.stages, model.stage_targets(gt)):
            r = np.abs(stage.derained.data - tgt.data).sum(axis=1, keepdims=True)
            ls = stage.log_sigma.data
            lu += np.mean(r * np.exp(-ls) + ls)
        assert lb.total.item() == pytest.approx(0.7 * lp + 0.3 * le + 1.3 * lu, abs=1e-12)


class TestGradients:
    def test_random_parameter_subset_matches_finite_differences(self):
        model = perturbed(SMALL, seed=2, scale=0.1)
        rng = np.random.default_rng(11)
        x, gt = rng.uniform(size=(1, 3, 8, 8)), rng.uniform(size=(1, 3, 8, 8))
        targets = model.stage_targets(gt)

        def loss():
            return total_loss(model(x), gt, stage_gts=targets).total

        model.zero_grad()
        T.backward(loss())
        named = list(model.named_parameters())
        flat = [(i, j) for i, (_, p) in enumerate(named) for j in range(p.size)]
        picks = rng.choice(len(flat), size=max(1, len(flat) // 100), replace=False)
        worst = 0.0
        for k in picks:
            i, j = flat[k]
            p = named[i][1]
            analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)[j]
            numeric = T.numeric_gradient(lambda: loss().item(), p.data, [j])[0]
            worst = max(worst, T.relative_error([analytic], [numeric]))
        assert worst < 1e-3

    def test_every_parameter_receives_gradient(self):
        model = perturbed(ModelConfig(), seed=4)
        rng = np.random.default_rng(12)
        x, gt = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
        model.zero_grad()
        T.backward(total_loss(model(x), gt, model=model).total)
        dead = [n for n, p in model.named_parameters()
                if p.grad is None or not np.any(p.grad != 0)]
        assert dead == []

    def test_position_bias_only_unused_offsets_idle(self):
        """Every relative offset inside a window is used, so no table row stays at zero gradient."""
        model = perturbed(ModelConfig(), seed=5)
        rng = np.random.default_rng(13)
        x, gt = rng.uniform(size=(1, 3, 16, 16)), rng.uniform(size=(1, 3, 16, 16))
        model.zero_grad()
        T.backward(total_loss(model(x), gt, model=model).total)
        for name, p in model.named_parameters():
            if name.endswith("rel_table"):
                assert np.all(np.any(p.grad != 0, axis=1)), name
