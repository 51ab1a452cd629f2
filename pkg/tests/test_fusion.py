import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from crisisfusion.fusion import (
    FusionError,
    GuidedCrossAttentionFusion,
    MultimodalClassifier,
    SelfAttention,
    batch_loss,
    loss_and_grads,
    seed_parameters,
    validate_labels,
)

@pytest.fixture(autouse=True)
def _double_precision():
    """All tests in this module run in double precision."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def make_fusion(seed=0, image_dim=3, text_dim=5, num_classes=3, proj_dim=7,
                head_hidden=6, **kwargs):
    model = GuidedCrossAttentionFusion(
        image_dim, text_dim, num_classes, proj_dim=proj_dim, head_hidden=head_hidden, **kwargs
    ).double()
    seed_parameters(model, seed)
    return model


def make_inputs(seed=0, batch=2, m=4, image_dim=3, l=3, text_dim=5, num_classes=3):
    gen = torch.Generator().manual_seed(seed)
    image = torch.randn(batch, m, image_dim, dtype=torch.float64, generator=gen)
    text = torch.randn(batch, l, text_dim, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, num_classes, (batch,), generator=gen)
    return image, text, labels


def brute_force_attention(seq: np.ndarray) -> np.ndarray:
    """Scalar-loop reference for identity-projection attention."""
    m, d = seq.shape
    scale = 1.0 / math.sqrt(d)
    out = np.zeros_like(seq)
    for i in range(m):
        scores = [
            sum(seq[i][t] * seq[j][t] for t in range(d)) * scale for j in range(m)
        ]
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        total = sum(exps)
        weights = [e / total for e in exps]
        for t in range(d):
            out[i][t] = sum(weights[j] * seq[j][t] for j in range(m))
    return out


class TestSelfAttention:
    def test_single_token_passes_through(self):
        attn = SelfAttention(4, identity_projections=True)
        seq = torch.tensor([[1.0, -2.0, 0.5, 3.0]])
        assert torch.equal(attn(seq), seq)

    def test_matches_bruteforce_on_2x2(self):
        attn = SelfAttention(2, identity_projections=True)
        seq = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        expected = brute_force_attention(seq.numpy())
        assert np.allclose(attn(seq).numpy(), expected, atol=1e-14)

    def test_matches_bruteforce_on_random_sequences(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            m, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            seq = rng.standard_normal((m, d))
            attn = SelfAttention(d, identity_projections=True)
            assert np.allclose(attn(torch.tensor(seq)).numpy(),
                               brute_force_attention(seq), atol=1e-12)

    def test_equal_rows_map_to_themselves(self):
        attn = SelfAttention(3, identity_projections=True)
        row = torch.tensor([0.7, -1.1, 2.0])
        seq = row.repeat(5, 1)
        out = attn(seq)
        assert torch.allclose(out, seq, atol=1e-14)

    def test_attention_rows_sum_to_one(self):
        attn = SelfAttention(6)
        seed_parameters(attn, 3)
        seq = torch.randn(4, 9, 6, generator=torch.Generator().manual_seed(1))
        weights = attn.attention_weights(seq)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(4, 9), atol=1e-6)
        assert (weights >= 0).all()

    def test_output_rows_are_convex_combinations(self):
        attn = SelfAttention(3)
        seed_parameters(attn, 5)
        seq = torch.randn(7, 3, generator=torch.Generator().manual_seed(2))
        weights = attn.attention_weights(seq)
        values = attn.value(seq)
        assert torch.allclose(attn(seq), weights @ values, atol=1e-12)

    def test_nonfinite_input_rejected(self):
        attn = SelfAttention(2, identity_projections=True)
        bad = torch.tensor([[1.0, float("nan")]])
        with pytest.raises(FusionError, match="non-finite"):
            attn(bad)
        with pytest.raises(FusionError):
            attn(torch.tensor([[float("inf"), 0.0]]))


class TestPoolAndProject:
    def test_zero_map_gives_zero_vector_of_default_width(self):
        model = GuidedCrossAttentionFusion(3, 5, 2).double()
        with torch.no_grad():
            model.image_proj.weight.zero_()
            model.image_proj.bias.zero_()
        out = model.project_image(torch.randn(4, 3))
        assert out.shape == (4, 100)
        assert torch.equal(out, torch.zeros(4, 100))

    def test_rectifier_on_bias_only(self):
        model = make_fusion(proj_dim=2)
        with torch.no_grad():
            model.image_proj.weight.zero_()
            model.image_proj.bias.copy_(torch.tensor([-1.0, 1.0]))
        out = model.project_image(torch.randn(3))
        assert torch.equal(out, torch.tensor([0.0, 1.0]))

    def test_three_row_hand_computation(self):
        model = make_fusion(seed=11)
        seq = torch.randn(3, 3, generator=torch.Generator().manual_seed(9))
        pooled = model.pool_image(seq)
        assert torch.allclose(pooled, seq.mean(dim=0), atol=1e-15)
        w = model.image_proj.weight.detach().numpy()
        b = model.image_proj.bias.detach().numpy()
        expected = np.maximum(w @ pooled.numpy() + b, 0.0)
        assert np.allclose(model.project_image(pooled).detach().numpy(), expected, atol=1e-14)

    def test_text_pooling_is_row_zero(self):
        model = make_fusion()
        seq = torch.randn(2, 6, 5, generator=torch.Generator().manual_seed(4))
        assert torch.equal(model.pool_text(seq), seq[:, 0, :])

    def test_default_dimensions_are_fixed(self):
        model = GuidedCrossAttentionFusion(4, 8, 2).double()
        image, text, _ = make_inputs(image_dim=4, text_dim=8, num_classes=2)
        out = model(image, text)
        assert out.gated_image.shape[-1] == 100
        assert out.gated_text.shape[-1] == 100
        assert out.fused.shape[-1] == 200


class TestCrossGate:
    def test_zero_gate_params_give_half_masks(self):
        model = make_fusion()
        with torch.no_grad():
            model.image_gate.weight.zero_()
            model.image_gate.bias.zero_()
            model.text_gate.weight.zero_()
            model.text_gate.bias.zero_()
        image, text, _ = make_inputs()
        out = model(image, text)
        assert torch.equal(out.image_mask, torch.full_like(out.image_mask, 0.5))
        assert torch.equal(out.text_mask, torch.full_like(out.text_mask, 0.5))
        attended_i = model.image_attention(image)
        proj_i = model.project_image(model.pool_image(attended_i))
        assert torch.allclose(out.gated_image, 0.5 * proj_i, atol=1e-15)

    def test_saturated_gate_passes_projection_through(self):
        model = make_fusion()
        with torch.no_grad():
            model.image_gate.weight.zero_()
            model.image_gate.bias.fill_(30.0)
        image, text, _ = make_inputs()
        out = model(image, text)
        attended_i = model.image_attention(image)
        proj_i = model.project_image(model.pool_image(attended_i))
        assert torch.allclose(out.gated_image, proj_i, atol=1e-9)

    def test_image_mask_ignores_image_input_bitwise(self):
        model = make_fusion(seed=21)
        image_a, text, _ = make_inputs(seed=1)
        image_b = image_a + torch.randn_like(image_a)
        out_a = model(image_a, text)
        out_b = model(image_b, text)
        assert torch.equal(out_a.image_mask, out_b.image_mask)
        assert not torch.equal(out_a.text_mask, out_b.text_mask)

    def test_text_mask_ignores_text_input_bitwise(self):
        model = make_fusion(seed=22)
        image, text_a, _ = make_inputs(seed=2)
        text_b = text_a + torch.randn_like(text_a)
        out_a = model(image, text_a)
        out_b = model(image, text_b)
        assert torch.equal(out_a.text_mask, out_b.text_mask)
        assert not torch.equal(out_a.image_mask, out_b.image_mask)

    def test_cross_dependency_via_autodiff(self):
        model = make_fusion(seed=23)
        image, text, _ = make_inputs(seed=3)
        image.requires_grad_(True)
        text.requires_grad_(True)
        out = model(image, text)
        image_grad = torch.autograd.grad(
            out.image_mask.sum(), image, retain_graph=True, allow_unused=True
        )[0]
        assert image_grad is None or torch.equal(image_grad, torch.zeros_like(image))
        text_grad = torch.autograd.grad(
            out.text_mask.sum(), text, allow_unused=True
        )[0]
        assert text_grad is None or torch.equal(text_grad, torch.zeros_like(text))

    def test_masks_strictly_inside_unit_interval(self):
        model = make_fusion(seed=24)
        image, text, _ = make_inputs(seed=4)
        out = model(image, text)
        for mask in (out.image_mask, out.text_mask):
            assert (mask > 0).all() and (mask < 1).all()

    def test_constant_one_gate_reduces_to_concatenation(self):
        gated = make_fusion(seed=25)
        plain = make_fusion(seed=25, gate_mode="ones")
        plain.load_state_dict(gated.state_dict())
        image, text, _ = make_inputs(seed=5)
        out = plain(image, text)
        attended_i = plain.image_attention(image)
        attended_t = plain.text_attention(text)
        proj_i = plain.project_image(plain.pool_image(attended_i))
        proj_t = plain.project_text(plain.pool_text(attended_t))
        assert torch.equal(out.fused, torch.cat([proj_i, proj_t], dim=-1))

    def test_fused_is_image_half_then_text_half(self):
        model = make_fusion(seed=26)
        image, text, _ = make_inputs(seed=6)
        out = model(image, text)
        k = model.proj_dim
        assert torch.equal(out.fused[..., :k], out.gated_image)
        assert torch.equal(out.fused[..., k:], out.gated_text)


class TestClassify:
    def test_zero_logits_give_uniform(self):
        model = make_fusion(num_classes=4)
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        image, text, _ = make_inputs(num_classes=4)
        out = model(image, text)
        assert torch.allclose(out.probabilities, torch.full_like(out.probabilities, 0.25), atol=1e-15)

    def test_scalar_softmax_hand_value(self):
        probs = torch.softmax(torch.tensor([10.0, 0.0]), dim=-1)
        expected = math.exp(10) / (math.exp(10) + 1)
        assert probs[0].item() == pytest.approx(expected, abs=1e-12)
        assert probs[0].item() == pytest.approx(0.99995, abs=5e-6)
        assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_shift_invariance(self):
        model = make_fusion(seed=31)
        image, text, _ = make_inputs(seed=7)
        logits, probs = model.classify(model(image, text).fused)
        shifted_probs = torch.softmax(logits + 7.0, dim=-1)
        assert torch.allclose(probs, shifted_probs, atol=1e-12)

    def test_probabilities_sum_to_one(self):
        model = make_fusion(seed=32)
        image, text, _ = make_inputs(seed=8, batch=5)
        out = model(image, text)
        assert torch.allclose(out.probabilities.sum(-1), torch.ones(5), atol=1e-6)
        assert (out.probabilities >= 0).all()
        assert torch.isfinite(out.logits).all()


class TestLoss:
    def test_certain_prediction_has_negligible_loss(self):
        loss = F.cross_entropy(torch.tensor([[30.0, 0.0]]), torch.tensor([0]))
        assert loss.item() < 1e-9

    def test_uniform_prediction_loss_is_log_c(self):
        model = make_fusion(num_classes=5)
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        image, text, labels = make_inputs(num_classes=5)
        loss = batch_loss(model, image, text, labels)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_label_out_of_range_fails_before_forward(self):
        class Sentinel(GuidedCrossAttentionFusion):
            def forward(self, *args):
                raise AssertionError("forward must not run on invalid labels")

        model = Sentinel(3, 5, 3).double()
        image, text, _ = make_inputs()
        with pytest.raises(FusionError, match="label out of range"):
            batch_loss(model, image, text, torch.tensor([0, 3]))
        with pytest.raises(FusionError):
            validate_labels(torch.tensor([-1]), 3)

    def test_gradients_cover_every_parameter(self):
        model = make_fusion(seed=41)
        image, text, labels = make_inputs(seed=9)
        _, grads = loss_and_grads(model, image, text, labels)
        names = {name for name, _ in model.named_parameters()}
        assert set(grads) == names
        for name, param in model.named_parameters():
            assert grads[name].shape == param.shape
            assert torch.isfinite(grads[name]).all()


def finite_difference_check(model, image, text, labels, eps=1e-5, tol=1e-4,
                            atol=1e-9, max_coords_per_tensor=None, rng=None):
    """Central-difference check of every (or a sampled subset of) coordinate.

    Relative error must stay below ``tol``; coordinates whose disagreement is
    under ``atol`` pass outright, since a central difference of an O(1) loss
    cannot resolve gradients below ~1e-11 in absolute terms.
    """
    _, grads = loss_and_grads(model, image, text, labels)
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            grad = grads[name].reshape(-1)
            indices = range(flat.numel())
            if max_coords_per_tensor is not None and flat.numel() > max_coords_per_tensor:
                indices = rng.choice(flat.numel(), size=max_coords_per_tensor, replace=False)
            for i in indices:
                original = flat[i].item()
                flat[i] = original + eps
                loss_plus = batch_loss(model, image, text, labels).item()
                flat[i] = original - eps
                loss_minus = batch_loss(model, image, text, labels).item()
                flat[i] = original
                fd = (loss_plus - loss_minus) / (2 * eps)
                analytic = grad[i].item()
                if abs(fd - analytic) < atol:
                    continue
                rel = abs(fd - analytic) / max(abs(fd), abs(analytic))
                worst = max(worst, rel)
                assert rel < tol, f"{name}[{i}]: fd={fd}, analytic={analytic}, rel={rel}"
    return worst


class TestGradientCheck:
    @pytest.mark.parametrize("seed", range(10))
    def test_full_fusion_path_matches_finite_differences(self, seed):
        model = make_fusion(seed=1000 + seed)
        image, text, labels = make_inputs(seed=2000 + seed)
        worst = finite_difference_check(model, image, text, labels)
        assert worst < 1e-4

    def test_full_pipeline_with_convd(self):
        model = MultimodalClassifier(3, 5, 3, proj_dim=7, head_hidden=6).double()
        seed_parameters(model, 77)
        gen = torch.Generator().manual_seed(88)
        image = torch.randn(2, 3, 2, 2, dtype=torch.float64, generator=gen)
        text = torch.randn(2, 3, 5, dtype=torch.float64, generator=gen)
        labels = torch.tensor([0, 2])
        worst = finite_difference_check(model, image, text, labels)
        assert worst < 1e-4

    def test_default_width_model_sampled_coordinates(self):
        model = GuidedCrossAttentionFusion(3, 5, 3).double()
        seed_parameters(model, 55)
        image, text, labels = make_inputs(seed=66)
        rng = np.random.default_rng(0)
        worst = finite_difference_check(
            model, image, text, labels, max_coords_per_tensor=40, rng=rng
        )
        assert worst < 1e-4


class TestSeededInit:
    def test_same_seed_same_parameters(self):
        a = make_fusion(seed=5)
        b = make_fusion(seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_different_parameters(self):
        a = make_fusion(seed=5)
        b = make_fusion(seed=6)
        assert any(
            not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters())
        )


class TestMultimodalClassifier:
    def test_convd_preserves_map_shape(self):
        model = MultimodalClassifier(4, 8, 2).double()
        image = torch.randn(1, 4, 2, 2)
        assert model.convd(image).shape == (1, 4, 2, 2)

    def test_forward_produces_fusion_output(self):
        model = MultimodalClassifier(4, 8, 3, proj_dim=10, head_hidden=5).double()
        seed_parameters(model, 1)
        image = torch.randn(2, 4, 2, 2)
        text = torch.randn(2, 6, 8)
        out = model(image, text)
        assert out.logits.shape == (2, 3)
        assert torch.allclose(out.probabilities.sum(-1), torch.ones(2), atol=1e-12)
