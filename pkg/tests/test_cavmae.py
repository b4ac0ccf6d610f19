import math

import numpy as np
import pytest
import torch

from avedit.cavmae import (
    CavMae,
    CavMaeConfig,
    CavMaeTrainer,
    EncoderOutput,
    apply_mask,
    contrastive_loss,
    extract_features,
    forward_losses,
    mae_loss,
    mask_gather,
    masked_recon_error,
    patch_normalize,
    prepare_clip,
    total_loss,
)
from avedit.synthcorpus import (
    CorpusConfig,
    Event,
    EventScript,
    make_event_vocabulary,
    render_clip,
)

TINY = CavMaeConfig(
    d_model=8, heads=2, depth_single=1, depth_joint=1, depth_decoder=1,
    decoder_dim=8, patch=4, visual_grid=(2, 2), audio_grid=(1, 2),
    audio_grid_full=(1, 2), tau=0.5,
)


def tiny_model(seed=0, cfg=TINY):
    torch.manual_seed(seed)
    return CavMae(cfg)


class TestEmbed:
    def test_zero_projection_gives_pos_plus_mod(self):
        model = tiny_model()
        with torch.no_grad():
            model.proj_v.weight.zero_()
            model.proj_v.bias.zero_()
        patches = torch.zeros(1, 4, 16)
        out = model.embed("visual", patches, (2, 2))
        expected = model.pos_v[:2, :2].reshape(4, 8) + model.mod_v
        torch.testing.assert_close(out[0], expected)

    def test_identical_content_differs_by_position_only(self):
        model = tiny_model()
        patches = torch.randn(1, 4, 16, generator=torch.Generator().manual_seed(1))
        patches[0, 2] = patches[0, 0]
        out = model.embed("visual", patches, (2, 2))
        pos = model.pos_v[:2, :2].reshape(4, 8)
        torch.testing.assert_close(out[0, 2] - out[0, 0], pos[2] - pos[0])

    def test_modality_embedding_difference(self):
        # Shared projection and positional tables isolate (m_a - m_v).
        model = tiny_model()
        with torch.no_grad():
            model.proj_a.weight.copy_(model.proj_v.weight)
            model.proj_a.bias.copy_(model.proj_v.bias)
            model.pos_a[:1, :2].copy_(model.pos_v[:1, :2])
        patches = torch.randn(1, 2, 16, generator=torch.Generator().manual_seed(2))
        diff = model.embed("audio", patches, (1, 2)) - model.embed(
            "visual", patches, (1, 2)
        )
        torch.testing.assert_close(
            diff, (model.mod_a - model.mod_v).expand(1, 2, 8)
        )

    def test_grid_exceeding_table(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.embed("visual", torch.zeros(1, 9, 16), (3, 3))


class TestApplyMask:
    def test_zero_ratio(self):
        tokens = torch.randn(2, 10, 4)
        m = apply_mask(tokens, 0.0, 0)
        assert m.masked_idx.shape == (2, 0)
        torch.testing.assert_close(m.kept, tokens)

    def test_mask_count_rounding(self):
        m = apply_mask(torch.randn(1, 104, 4), 0.75, 0)
        assert m.masked_idx.shape[1] == 78

    def test_deterministic_under_seed(self):
        tokens = torch.randn(3, 16, 4)
        m1 = apply_mask(tokens, 0.5, 42)
        m2 = apply_mask(tokens, 0.5, 42)
        torch.testing.assert_close(m1.kept_idx, m2.kept_idx)
        torch.testing.assert_close(m1.masked_idx, m2.masked_idx)

    def test_partition_property(self):
        m = apply_mask(torch.randn(2, 12, 4), 0.5, 7)
        for b in range(2):
            union = set(m.kept_idx[b].tolist()) | set(m.masked_idx[b].tolist())
            assert union == set(range(12))

    def test_ratio_one_rejected(self):
        with pytest.raises(ValueError):
            apply_mask(torch.randn(1, 8, 4), 1.0, 0)


class TestEncodeSingle:
    def test_depth_zero_identity(self):
        cfg = CavMaeConfig(
            d_model=8, heads=2, depth_single=0, depth_joint=1, depth_decoder=1,
            decoder_dim=8, patch=4, visual_grid=(2, 2), audio_grid=(1, 2),
            audio_grid_full=(1, 2),
        )
        model = tiny_model(cfg=cfg)
        tokens = torch.randn(2, 4, 8)
        out = model.encode_single(tokens, "visual")
        torch.testing.assert_close(out[:, 1:], tokens)
        torch.testing.assert_close(out[:, 0], model.global_v.expand(2, 8))

    def test_shape_contract(self):
        model = tiny_model()
        out = model.encode_single(torch.randn(3, 4, 8), "audio")
        assert out.shape == (3, 5, 8)

    def test_permutation_equivariance(self):
        model = tiny_model()
        tokens = torch.randn(1, 4, 8)
        perm = torch.tensor([2, 0, 3, 1])
        out = model.encode_single(tokens, "visual")
        out_p = model.encode_single(tokens[:, perm], "visual")
        torch.testing.assert_close(out_p[:, 1:], out[:, 1:][:, perm])
        torch.testing.assert_close(out_p[:, 0], out[:, 0])


class TestEncodeJoint:
    def test_output_arity(self):
        model = tiny_model()
        e_v = torch.randn(2, 5, 8)
        e_a = torch.randn(2, 3, 8)
        out = model.encode_joint(e_v, e_a, e_a.clone())
        assert out._fields == ("e_v_joint", "e_m_joint", "e_v_single", "e_a_single")
        assert out.e_v_joint.shape == e_v.shape
        assert out.e_m_joint.shape == e_a.shape

    def test_weight_sharing_aliasing(self):
        # Zeroing the shared attention zeroes its effect on all streams.
        model = tiny_model()
        blk = model.joint[0]
        with torch.no_grad():
            blk.attn.in_proj_weight.zero_()
            blk.attn.in_proj_bias.zero_()
            blk.attn.out_proj.weight.zero_()
            blk.attn.out_proj.bias.zero_()
        e_v = torch.randn(1, 4, 8)
        e_a = torch.randn(1, 3, 8)
        out = model.encode_joint(e_v, e_a, e_a.clone())
        # With attention zeroed every stream reduces to x + mlp(ln2(x));
        # verify for the two single-modal streams with their own norms.
        for stream, x in (("v", e_v), ("a", e_a)):
            expected = x + blk.mlp(blk.ln2[stream](x))
            actual = out.e_v_single if stream == "v" else out.e_a_single
            torch.testing.assert_close(actual, expected)

    def test_parameter_count_is_shared_blocks_plus_norms(self):
        model = tiny_model()
        d = model.cfg.d_model
        total = sum(p.numel() for p in model.joint.parameters())
        blk = model.joint[0]
        shared = sum(p.numel() for p in blk.attn.parameters()) + sum(
            p.numel() for p in blk.mlp.parameters()
        )
        norms = 3 * 2 * 2 * d  # 3 streams x 2 norms x (weight + bias)
        assert total == len(model.joint) * (shared + norms)

    def test_audio_single_stream_matches_joint_with_empty_visual(self):
        model = tiny_model()
        for blk in model.joint:
            with torch.no_grad():
                for s in ("v", "a"):
                    blk.ln1[s].weight.copy_(blk.ln1["av"].weight)
                    blk.ln1[s].bias.copy_(blk.ln1["av"].bias)
                    blk.ln2[s].weight.copy_(blk.ln2["av"].weight)
                    blk.ln2[s].bias.copy_(blk.ln2["av"].bias)
        e_a = torch.randn(2, 3, 8)
        out = model.encode_joint(torch.zeros(2, 0, 8), e_a, e_a.clone())
        torch.testing.assert_close(out.e_a_single, out.e_m_joint)

    def test_shape_mismatch(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encode_joint(torch.randn(2, 4, 8), torch.randn(3, 3, 8),
                               torch.randn(3, 3, 8))


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        e = torch.randn(1, 6, dtype=torch.float64)
        loss = contrastive_loss(e, e.clone(), tau=0.1)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_two_orthogonal_pairs(self):
        e_a = torch.eye(2, dtype=torch.float64)
        loss = contrastive_loss(e_a, e_a.clone(), tau=1.0)
        assert float(loss) == pytest.approx(math.log(1 + math.exp(-1.0)), abs=1e-12)

    def test_rotation_invariance(self):
        rng = torch.Generator().manual_seed(3)
        e_a = torch.randn(5, 6, generator=rng, dtype=torch.float64)
        e_v = torch.randn(5, 6, generator=rng, dtype=torch.float64)
        q, _ = torch.linalg.qr(torch.randn(6, 6, generator=rng, dtype=torch.float64))
        base = contrastive_loss(e_a, e_v, tau=0.2)
        rotated = contrastive_loss(e_a @ q, e_v @ q, tau=0.2)
        assert float(rotated) == pytest.approx(float(base), abs=1e-10)

    def test_scale_invariance(self):
        rng = torch.Generator().manual_seed(4)
        e_a = torch.randn(4, 6, generator=rng, dtype=torch.float64)
        e_v = torch.randn(4, 6, generator=rng, dtype=torch.float64)
        base = contrastive_loss(e_a, e_v, tau=0.2)
        scaled = contrastive_loss(3.7 * e_a, 3.7 * e_v, tau=0.2)
        assert float(scaled) == pytest.approx(float(base), abs=1e-10)

    def test_zero_norm_row_rejected(self):
        e = torch.zeros(2, 4)
        with pytest.raises(ValueError):
            contrastive_loss(e, torch.randn(2, 4), tau=0.1)


class TestMaeLoss:
    def test_zero_on_perfect_reconstruction(self):
        target = torch.randn(2, 6, 16)
        idx = torch.tensor([[0, 3, 5], [1, 2, 4]])
        recon = torch.zeros_like(target)
        normed = patch_normalize(mask_gather(target, idx))
        recon = recon.scatter(1, idx.unsqueeze(-1).expand(-1, -1, 16), normed)
        assert float(masked_recon_error(recon, target, idx)) == pytest.approx(0.0, abs=1e-10)

    def test_constant_offset_per_modality(self):
        target_v = torch.randn(2, 6, 16)
        target_a = torch.randn(2, 4, 16)
        idx_v = torch.tensor([[0, 1], [2, 3]])
        idx_a = torch.tensor([[0], [1]])

        def off_by_one(target, idx):
            recon = torch.zeros_like(target)
            normed = patch_normalize(mask_gather(target, idx)) + 1.0
            return recon.scatter(1, idx.unsqueeze(-1).expand(-1, -1, 16), normed)

        loss = mae_loss(off_by_one(target_v, idx_v), target_v, idx_v,
                        off_by_one(target_a, idx_a), target_a, idx_a)
        assert float(loss) == pytest.approx(2.0, abs=1e-6)

    def test_unmasked_perturbation_ignored(self):
        target = torch.randn(1, 6, 16)
        idx = torch.tensor([[0, 1, 2]])
        recon = torch.randn(1, 6, 16)
        perturbed = recon.clone()
        perturbed[0, 4] += 100.0
        a = masked_recon_error(recon, target, idx)
        b = masked_recon_error(perturbed, target, idx)
        assert float(a) == float(b)

    def test_unmasked_gradient_exactly_zero(self):
        target = torch.randn(1, 6, 16)
        idx = torch.tensor([[0, 2, 5]])
        recon = torch.randn(1, 6, 16, requires_grad=True)
        masked_recon_error(recon, target, idx).backward()
        unmasked = [1, 3, 4]
        assert torch.all(recon.grad[0, unmasked] == 0)
        assert torch.any(recon.grad[0, [0, 2, 5]] != 0)

    def test_no_masked_patches_rejected(self):
        with pytest.raises(ValueError):
            mae_loss(None, None, None, None, None, None)


class TestTotalLoss:
    def test_paper_weights(self):
        cfg = CavMaeConfig()
        assert cfg.lambda_c == 0.01 and cfg.lambda_mae == 1.0
        assert total_loss(1.0, 1.0, cfg) == pytest.approx(1.01)

    def test_zero_contrastive(self):
        cfg = CavMaeConfig()
        assert total_loss(0.0, 3.5, cfg) == pytest.approx(3.5)


def finite_difference_check(params, loss_fn, eps=1e-5, tol=1e-4):
    """Central-difference gradient check; returns fraction of coordinates
    within relative tolerance."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    good = total = 0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(loss_fn().detach())
            flat[i] = orig - eps
            down = float(loss_fn().detach())
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(float(gflat[i])), 1e-8)
            total += 1
            if abs(fd - float(gflat[i])) / denom < tol:
                good += 1
    return good / total


class TestGradients:
    def test_contrastive_gradient(self):
        rng = torch.Generator().manual_seed(5)
        e_a = torch.randn(3, 4, generator=rng, dtype=torch.float64, requires_grad=True)
        e_v = torch.randn(3, 4, generator=rng, dtype=torch.float64, requires_grad=True)
        frac = finite_difference_check(
            [e_a, e_v], lambda: contrastive_loss(e_a, e_v, tau=0.3)
        )
        assert frac >= 0.99

    def test_mae_gradient(self):
        rng = torch.Generator().manual_seed(6)
        target = torch.randn(2, 4, 8, generator=rng, dtype=torch.float64)
        idx = torch.tensor([[0, 2], [1, 3]])
        recon = torch.randn(2, 4, 8, generator=rng, dtype=torch.float64,
                            requires_grad=True)
        frac = finite_difference_check(
            [recon], lambda: masked_recon_error(recon, target, idx)
        )
        assert frac >= 0.99

    def test_total_loss_gradient(self):
        cfg = CavMaeConfig()
        rng = torch.Generator().manual_seed(7)
        e_a = torch.randn(3, 4, generator=rng, dtype=torch.float64, requires_grad=True)
        e_v = torch.randn(3, 4, generator=rng, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 4, 8, generator=rng, dtype=torch.float64)
        idx = torch.tensor([[0, 2], [1, 3]])
        recon = torch.randn(2, 4, 8, generator=rng, dtype=torch.float64,
                            requires_grad=True)

        def loss_fn():
            return total_loss(
                contrastive_loss(e_a, e_v, tau=0.3),
                masked_recon_error(recon, target, idx),
                cfg,
            )

        assert finite_difference_check([e_a, e_v, recon], loss_fn) >= 0.99


CORPUS_CFG = CorpusConfig()


def make_clip(seed=0, silent=False):
    vocab = make_event_vocabulary(8, 0)
    rng = np.random.default_rng(seed)
    events = (Event(int(rng.integers(8)), 0.25, 1.25),)
    script = EventScript(f"t{seed}", CORPUS_CFG.duration_s,
                         events if not silent else
                         tuple(Event(e.class_id, e.onset_s, e.offset_s,
                                     visible=True, audible=False) for e in events))
    return render_clip(script, vocab, CORPUS_CFG)


class TestTrainerAndFeatures:
    def test_pretrain_steps_run_and_are_deterministic(self):
        clips = [prepare_clip(make_clip(s), CORPUS_CFG) for s in range(4)]
        cfg = CavMaeConfig(d_model=32, heads=2, depth_single=1, depth_joint=1,
                           depth_decoder=1, decoder_dim=16)

        def run():
            torch.manual_seed(0)
            model = CavMae(cfg)
            trainer = CavMaeTrainer(model, clips, CORPUS_CFG, seed=1,
                                    batch_clips=2, frames_per_clip=2)
            return trainer.train(3)

        h1, h2 = run(), run()
        assert h1 == h2
        assert len(h1) == 3

    def test_mix_prob_zero_never_mixes(self):
        clips = [prepare_clip(make_clip(s), CORPUS_CFG) for s in range(2)]
        cfg = CavMaeConfig(d_model=32, heads=2, depth_single=1, depth_joint=1,
                           depth_decoder=1, decoder_dim=16)
        torch.manual_seed(0)
        model = CavMae(cfg)
        trainer = CavMaeTrainer(model, clips, CORPUS_CFG, seed=1, mix_prob=0.0,
                                batch_clips=2, frames_per_clip=1)
        v, a, m, _ = trainer._sample_batch()
        torch.testing.assert_close(a, m)

    def test_lr_step_decay(self):
        clips = [prepare_clip(make_clip(0), CORPUS_CFG)]
        cfg = CavMaeConfig(d_model=32, heads=2, depth_single=1, depth_joint=1,
                           depth_decoder=1, decoder_dim=16)
        torch.manual_seed(0)
        trainer = CavMaeTrainer(CavMae(cfg), clips, CORPUS_CFG, seed=0,
                                lr=1e-4, decay_start=10, decay_every=5)
        trainer.step_count = 5
        assert trainer._current_lr() == 1e-4
        trainer.step_count = 10
        assert trainer._current_lr() == 5e-5
        trainer.step_count = 15
        assert trainer._current_lr() == 2.5e-5

    def test_extract_features_shapes_and_determinism(self):
        clip = make_clip(3)
        torch.manual_seed(0)
        model = CavMae(CavMaeConfig(d_model=32, heads=2, depth_single=1,
                                    depth_joint=1, depth_decoder=1, decoder_dim=16))
        f1 = extract_features(model, clip, CORPUS_CFG)
        f2 = extract_features(model, clip, CORPUS_CFG)
        assert f1.per_frame_audio.shape == (16, 32)
        assert f1.per_frame_visual.shape == (16, 32)
        np.testing.assert_array_equal(f1.per_frame_audio, f2.per_frame_audio)
        np.testing.assert_array_equal(f1.global_visual, f2.global_visual)

    def test_silenced_twin_changes_audio_features_only(self):
        clip = make_clip(5)
        silent = make_clip(5, silent=True)
        np.testing.assert_array_equal(clip.frames, silent.frames)
        torch.manual_seed(0)
        model = CavMae(CavMaeConfig(d_model=32, heads=2, depth_single=1,
                                    depth_joint=1, depth_decoder=1, decoder_dim=16))
        f = extract_features(model, clip, CORPUS_CFG)
        f_s = extract_features(model, silent, CORPUS_CFG)
        np.testing.assert_array_equal(f.per_frame_visual, f_s.per_frame_visual)
        assert np.any(f.per_frame_audio != f_s.per_frame_audio)


class TestFullForwardGradient:
    def test_forward_losses_gradient_matches_finite_differences(self):
        cfg = CavMaeConfig(
            d_model=4, heads=1, depth_single=1, depth_joint=1, depth_decoder=1,
            decoder_dim=4, patch=2, visual_grid=(2, 2), audio_grid=(1, 2),
            audio_grid_full=(1, 2), tau=0.5,
        )
        torch.manual_seed(0)
        model = CavMae(cfg).double()
        rng = torch.Generator().manual_seed(8)
        v = torch.randn(2, 4, 4, generator=rng, dtype=torch.float64)
        a = torch.randn(2, 2, 4, generator=rng, dtype=torch.float64)
        m = a + 0.1 * torch.randn(2, 2, 4, generator=rng, dtype=torch.float64)

        def loss_fn():
            gen = torch.Generator().manual_seed(123)
            out = forward_losses(model, v, a, m, (2, 2), (1, 2), 0.5, gen)
            return out["total"]

        params = [p for p in model.parameters() if p.requires_grad]
        frac = finite_difference_check(params, loss_fn, eps=1e-6)
        assert frac >= 0.99
