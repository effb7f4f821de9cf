import math

import numpy as np
import pytest

from detadapt.detector import DetLoss, FeaturePyramid, TinyRetinaNet
from detadapt.domainadapt import (
    DiscriminatorSet,
    DomainConfig,
    DomainLoss,
    PixelDiscriminator,
    PooledDiscriminator,
    _side_loss,
    build_discriminator,
    check_batch_sizes,
    discriminator_loss,
    discriminator_side_losses,
    domain_loss,
    pooled_feature_side,
    reported_total,
    total_loss,
)
from detadapt.errors import ConfigError, ShapeError
from detadapt.tensorcore import Tensor, backward, gradcheck


def _zero_output(disc: PixelDiscriminator) -> PixelDiscriminator:
    disc.conv3.weight.data[...] = 0.0
    disc.conv3.bias.data[...] = 0.0
    return disc


def _features(rng, shape=(2, 4, 4, 4)):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _pyramid(levels, requires_grad=False):
    c3, c4, c5 = (Tensor(levels[level], requires_grad=requires_grad) for level in (3, 4, 5))
    return FeaturePyramid(c3, c4, c5, c3, c4, c5)


class TestConfig:
    def test_unknown_level_rejected(self):
        with pytest.raises(ConfigError):
            DomainConfig(levels=(2, 3))

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            DomainConfig(lam=-1.0)

    def test_levels_normalized(self):
        assert DomainConfig(levels=(5, 3, 3)).levels == (3, 5)

    def test_unknown_builder_level(self, rng):
        with pytest.raises(ValueError):
            build_discriminator(6, 4, rng)

    def test_pooled_side_after_three_stride_two_blocks(self):
        assert [pooled_feature_side(s) for s in (16, 8, 4, 2, 1)] == [2, 1, 1, 1, 1]
        assert pooled_feature_side(5) == 1
        assert pooled_feature_side(32) == 4

    def test_batch_sizes_checked_for_pooled_levels_only(self):
        sides = {3: 32, 4: 16, 5: 8}
        check_batch_sizes(DomainConfig(levels=(3, 4)), sides, {"batch_size": 1})
        with pytest.raises(ConfigError, match="D5"):
            check_batch_sizes(DomainConfig(levels=(3, 5)), sides, {"batch_size": 1})
        check_batch_sizes(DomainConfig(levels=(5,)), sides, {"batch_size": 2})


class TestArchitecture:
    def test_only_enabled_levels_are_built(self, rng):
        discs = DiscriminatorSet((8, 8, 8), DomainConfig(levels=(3, 5)), rng)
        assert discs.d4 is None
        assert isinstance(discs.d3, PixelDiscriminator)
        assert isinstance(discs.d5, PooledDiscriminator)
        prefixes = {name.split(".")[0] for name, _ in discs.named_parameters()}
        assert prefixes == {"d3", "d5"}

    def test_d3_is_per_location(self, rng):
        out = build_discriminator(3, 4, rng)(_features(rng, (2, 4, 5, 5)))
        assert out.shape == (2, 1, 5, 5)

    @pytest.mark.parametrize("level,fc_layers", [(4, 1), (5, 2)])
    def test_pooled_heads(self, rng, level, fc_layers):
        disc = build_discriminator(level, 4, rng, width=6, hidden=3)
        assert len(disc.fc) == fc_layers
        out = disc(_features(rng, (2, 4, 8, 8)), np.random.default_rng(0))
        assert out.shape == (2, 1)


class TestLossAlgebra:
    def test_balanced_zero_logits_give_log_two_per_side(self, rng):
        disc = _zero_output(PixelDiscriminator(4, 5, rng))
        source, target = discriminator_side_losses(disc, _features(rng), _features(rng), 0.5, gamma_d=0.0)
        assert source.item() == pytest.approx(0.693147, abs=1e-6)
        assert target.item() == pytest.approx(0.693147, abs=1e-6)

    def test_discriminator_loss_is_mean_of_sides(self, rng):
        disc = PixelDiscriminator(4, 5, rng)
        src, tgt = _features(rng), _features(rng)
        source, target = discriminator_side_losses(disc, src, tgt, 0.5)
        combined = discriminator_loss(disc, src, tgt, 0.5)
        assert combined.item() == pytest.approx(0.5 * (source.item() + target.item()), rel=1e-6)

    def test_alpha_shifts_weight_between_sides(self, rng):
        disc = _zero_output(PixelDiscriminator(4, 5, rng))
        source, target = discriminator_side_losses(disc, _features(rng), _features(rng), 0.5, 0.0, alpha_d=0.75)
        assert source.item() == pytest.approx(0.5 * math.log(2), abs=1e-6)
        assert target.item() == pytest.approx(1.5 * math.log(2), abs=1e-6)

    def test_empty_batch_rejected(self, rng):
        disc = PixelDiscriminator(4, 5, rng)
        with pytest.raises(ShapeError):
            discriminator_loss(disc, _features(rng, (0, 4, 4, 4)), _features(rng), 0.5)

    def test_reported_total_subtracts_domain_terms(self):
        det = DetLoss(Tensor(1.5), Tensor(0.25))
        dom = DomainLoss(Tensor(0.5), Tensor(0.25), Tensor(0.125))
        assert reported_total(det, dom, 0.5) == pytest.approx(1.75 - 0.5 * 0.875)
        assert total_loss(det, dom, 0.5).item() == pytest.approx(1.75 + 0.875)

    def test_disabled_levels_contribute_zero(self):
        dom = DomainLoss(l_d3=Tensor(0.4))
        assert dom.values() == pytest.approx((0.4, 0.0, 0.0))


class TestGradientReversalContract:
    def _feature_grad(self, lam, level=4, seed=0):
        rng = np.random.default_rng(seed)
        disc = build_discriminator(level, 4, np.random.default_rng(42), width=6, hidden=3)
        src = Tensor(rng.normal(size=(2, 4, 16, 16)), requires_grad=True)
        tgt = Tensor(rng.normal(size=(2, 4, 16, 16)), requires_grad=True)
        loss = discriminator_loss(disc, src, tgt, lam, rng=np.random.default_rng(7))
        backward(loss)
        return src.grad.astype(np.float64), [p.grad.copy() for p in disc.parameters()]

    @pytest.mark.parametrize("level", [3, 4, 5])
    def test_feature_gradients_scale_linearly_in_lambda(self, level):
        half, _ = self._feature_grad(0.5, level)
        full, _ = self._feature_grad(1.0, level)
        mask = np.abs(half) > 1e-12
        assert mask.any()
        np.testing.assert_allclose(full[mask] / half[mask], 2.0, atol=1e-4)

    def test_zero_lambda_blocks_feature_gradients(self):
        grad, _ = self._feature_grad(0.0)
        assert np.all(grad == 0.0)

    def test_discriminator_gradients_do_not_depend_on_lambda(self):
        _, low = self._feature_grad(0.1)
        _, high = self._feature_grad(2.0)
        for a, b in zip(low, high):
            np.testing.assert_array_equal(a, b)

    def test_feature_gradient_opposes_discriminator_descent(self, rng):
        """With the reversal, the feature gradient is minus lam times the plain gradient."""
        disc = PixelDiscriminator(4, 5, np.random.default_rng(3))
        src_data = rng.normal(size=(2, 4, 4, 4))
        tgt_data = rng.normal(size=(2, 4, 4, 4))

        src = Tensor(src_data, requires_grad=True)
        backward(discriminator_loss(disc, src, Tensor(tgt_data), 1.0))
        reversed_grad = src.grad.copy()

        plain = Tensor(src_data, requires_grad=True)
        logits = disc(plain)
        backward(_side_loss(logits, 0.0, 2.0) * 0.5)
        np.testing.assert_allclose(reversed_grad, -plain.grad, rtol=1e-5, atol=1e-7)


class TestGradcheck:
    @pytest.mark.parametrize("seed", range(20))
    def test_pixel_discriminator_loss(self, seed):
        rng = np.random.default_rng(seed)
        disc = PixelDiscriminator(3, 4, rng).astype(np.float64)
        fn = lambda t: discriminator_loss(disc, t[0], t[1], 1.0)
        result = gradcheck(fn, [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3, 3, 3))], h=1e-5)
        assert result.ok, result.errors

    @pytest.mark.parametrize("seed", range(5))
    def test_pooled_discriminator_loss(self, seed):
        rng = np.random.default_rng(seed)
        disc = build_discriminator(5, 2, rng, width=4, hidden=3, rate=0.0).astype(np.float64)
        fn = lambda t: discriminator_loss(disc, t[0], t[1], 0.5)
        result = gradcheck(fn, [rng.normal(size=(2, 2, 16, 16)), rng.normal(size=(2, 2, 16, 16))], h=1e-5)
        assert result.ok, result.errors


class TestDomainLoss:
    def test_pyramid_levels_feed_matching_discriminators(self, tiny_config, rng):
        model = TinyRetinaNet(tiny_config, rng)
        discs = DiscriminatorSet(tiny_config.c_channels, DomainConfig(levels=(3, 4), width=6, hidden=3), rng)
        source = model.backbone_forward(rng.uniform(size=(2, 3, 32, 32)))
        target = model.backbone_forward(rng.uniform(size=(2, 3, 32, 32)))
        dom = domain_loss(discs, source, target, np.random.default_rng(0))
        assert dom.l_d3.item() > 0 and dom.l_d4.item() > 0
        assert dom.l_d5.item() == 0.0
        backward(dom.total())
        stage = model.backbone.stage2.conv1.weight
        assert np.any(stage.grad != 0)

    def test_image_order_within_a_batch_does_not_matter(self, rng):
        discs = DiscriminatorSet((4, 4, 4), DomainConfig(width=6, hidden=3, dropout=0.0), rng)
        source = {level: rng.normal(size=(3, 4, side, side)) for level, side in ((3, 8), (4, 4), (5, 4))}
        target = {level: rng.normal(size=(3, 4, side, side)) for level, side in ((3, 8), (4, 4), (5, 4))}
        order = np.array([2, 0, 1])
        plain = domain_loss(discs, _pyramid(source), _pyramid(target))
        shuffled = domain_loss(
            discs,
            _pyramid({k: v[order] for k, v in source.items()}),
            _pyramid({k: v[::-1] for k, v in target.items()}),
        )
        assert shuffled.values() == pytest.approx(plain.values(), rel=1e-5)

    def test_disabled_level_contributes_no_gradient(self, rng):
        config = DomainConfig(width=6, hidden=3, dropout=0.0)
        full = DiscriminatorSet((4, 4, 4), config, rng)
        partial = DiscriminatorSet((4, 4, 4), DomainConfig(levels=(3, 5), width=6, hidden=3, dropout=0.0), rng)
        partial.d3, partial.d5 = full.d3, full.d5
        source = {level: rng.normal(size=(2, 4, side, side)) for level, side in ((3, 8), (4, 8), (5, 8))}
        target = _pyramid({level: rng.normal(size=(2, 4, 8, 8)) for level in (3, 4, 5)})

        grads = {}
        for name, discs in (("full", full), ("partial", partial)):
            pyramid = _pyramid(source, requires_grad=True)
            backward(domain_loss(discs, pyramid, target).total())
            grads[name] = {level: pyramid.c_level(level).grad for level in (3, 4, 5)}

        assert np.any(grads["full"][4] != 0)
        assert not np.any(grads["partial"][4])
        for level in (3, 5):
            np.testing.assert_allclose(grads["partial"][level], grads["full"][level], rtol=1e-5, atol=1e-7)
