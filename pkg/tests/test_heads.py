"""Architecture contracts: shapes, parameter counts, stripping, gradient flow,
decoder geometry and checkpoint round trips."""

import numpy as np
import pytest
import torch

from hmtl.heads import (
    BackboneConfig,
    DECODER_FILTER_LADDER,
    HeadSpec,
    assemble,
    build_backbone,
    decoder_head,
    load_checkpoint,
    parameter_count,
    puzzle_heads,
    rotation_head,
    save_checkpoint,
    strip_ssh,
    supervised_head,
    cat_reg_head,
)


def conv_block_params(in_c, out_c):
    return in_c * out_c * 9 + 2 * out_c  # bias-free conv + group norm scale/shift


def linear_params(in_f, out_f):
    return in_f * out_f + out_f


class TestBackbone:
    def test_shapes(self):
        cfg = BackboneConfig(resolution=64, feature_dim=128)
        backbone = build_backbone(cfg)
        x = torch.rand(2, 3, 64, 64)
        pooled, maps = backbone(x)
        assert pooled.shape == (2, 128)
        assert maps["block4"].shape == (2, 128, 4, 4)
        assert maps["block1"].shape == (2, 16, 32, 32)
        assert cfg.final_map_size == 4

    def test_seed_determinism(self):
        a = build_backbone(BackboneConfig(seed=5))
        b = build_backbone(BackboneConfig(seed=5))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = build_backbone(BackboneConfig(seed=6))
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_zero_image_finite(self):
        backbone = build_backbone(BackboneConfig())
        backbone.eval()
        pooled, maps = backbone(torch.zeros(1, 3, 64, 64))
        assert torch.isfinite(pooled).all()
        assert all(torch.isfinite(m).all() for m in maps.values())

    def test_incompatible_resolution_rejected(self):
        with pytest.raises(ValueError, match="power-of-two"):
            BackboneConfig(resolution=60)

    def test_parameter_count_formula(self):
        cfg = BackboneConfig(resolution=64, feature_dim=128, num_blocks=4)
        backbone = build_backbone(cfg)
        channels = (16, 32, 64, 128)
        assert cfg.channels == channels
        expected = sum(conv_block_params(i, o) for i, o in zip((3,) + channels[:-1], channels))
        assert parameter_count(backbone) == expected


class TestAssembly:
    def test_sl_only_simplex_output(self):
        model = assemble(build_backbone(BackboneConfig()), [supervised_head(8)], seed=0)
        model.eval()
        out = model(torch.rand(3, 3, 64, 64))
        assert out["sl"].shape == (3, 8)
        torch.testing.assert_close(out["sl"].sum(dim=-1), torch.ones(3))

    def test_puzzle_heads_emit_nine_simplexes(self):
        model = assemble(build_backbone(BackboneConfig()), [puzzle_heads(3)], seed=0)
        model.eval()
        out = model(torch.rand(2, 3, 64, 64))
        assert len(out["puzzle"]) == 9
        for probs in out["puzzle"]:
            assert probs.shape == (2, 9)
            torch.testing.assert_close(probs.sum(dim=-1), torch.ones(2))

    def test_decoder_geometry_and_range(self):
        model = assemble(build_backbone(BackboneConfig(resolution=64)), [supervised_head(8), decoder_head()], seed=0)
        model.eval()
        decoder = model.ssh_heads["decoder"]
        assert decoder.filters == DECODER_FILTER_LADDER[-4:] == (128, 64, 32, 16)
        with torch.no_grad():
            out = model(torch.rand(2, 3, 64, 64))
        rec = out["decoder"]
        assert rec.shape == (2, 3, 64, 64)
        assert float(rec.min()) >= 0.0 and float(rec.max()) <= 1.0

    def test_joint_branches_only_when_both_ssh_present(self):
        joint = assemble(build_backbone(BackboneConfig()), [puzzle_heads(2), rotation_head()], seed=0)
        assert set(joint.branches.keys()) == {"puzzle", "rotation"}
        solo = assemble(build_backbone(BackboneConfig()), [puzzle_heads(2)], seed=0)
        assert len(solo.branches) == 0

    def test_duplicate_supervised_classifier_rejected(self):
        specs = [supervised_head(8), HeadSpec(kind=supervised_head(4).kind, name="sl2", num_classes=4)]
        with pytest.raises(ValueError, match="at most one"):
            assemble(build_backbone(BackboneConfig()), specs, seed=0)

    def test_classifier_and_cat_reg_exclusive(self):
        with pytest.raises(ValueError, match="cannot be combined"):
            assemble(build_backbone(BackboneConfig()), [supervised_head(8), cat_reg_head("valence", 20)], seed=0)

    def test_head_parameter_counts(self):
        backbone = build_backbone(BackboneConfig(feature_dim=128))
        model = assemble(backbone, [supervised_head(8), puzzle_heads(2), rotation_head()], seed=0)
        assert parameter_count(model.sl_heads["sl"]) == linear_params(128, 8)
        # joint mode: one 512 branch per ssh group, linear classifiers on top
        assert parameter_count(model.branches["puzzle"]) == linear_params(128, 512)
        assert parameter_count(model.ssh_heads["puzzle"]) == 4 * linear_params(512, 4)
        assert parameter_count(model.branches["rotation"]) == linear_params(128, 512)
        assert parameter_count(model.ssh_heads["rotation"]) == linear_params(512, 8)

    def test_decoder_parameter_count(self):
        cfg = BackboneConfig(resolution=64, feature_dim=128)
        model = assemble(build_backbone(cfg), [decoder_head()], seed=0)
        channels = cfg.channels  # (16, 32, 64, 128)
        filters = (128, 64, 32, 16)
        expected = 0
        in_c = channels[-1]
        skips = (64, 32, 16, 0)
        for f, skip in zip(filters, skips):
            expected += in_c * f * 16 + f          # transposed conv 4x4
            expected += (f + skip) * f * 9 + f     # fuse conv 3x3
            in_c = f
        expected += 16 * 3 + 3                     # final 1x1 conv
        assert parameter_count(model.ssh_heads["decoder"]) == expected


class TestStripSsh:
    def _hmtl_model(self):
        return assemble(
            build_backbone(BackboneConfig()), [supervised_head(8), puzzle_heads(2), rotation_head()], seed=1
        )

    def test_strip_removes_ssh_and_keeps_sl(self):
        model = self._hmtl_model()
        stripped = strip_ssh(model)
        assert stripped.supervised_names == ["sl"]
        assert stripped.ssh_names == []

    def test_sl_outputs_bit_identical(self):
        model = self._hmtl_model()
        model.eval()
        x = torch.rand(4, 3, 64, 64)
        full = model(x)["sl"]
        stripped = strip_ssh(model)
        stripped.eval()
        assert torch.equal(stripped(x)["sl"], full)

    def test_parameters_shared_not_copied(self):
        model = self._hmtl_model()
        stripped = strip_ssh(model)
        with torch.no_grad():
            next(model.backbone.parameters()).add_(1.0)
        assert torch.equal(next(stripped.backbone.parameters()), next(model.backbone.parameters()))

    def test_strip_on_sl_only_is_identity_view(self):
        model = assemble(build_backbone(BackboneConfig()), [supervised_head(8)], seed=2)
        model.eval()
        stripped = strip_ssh(model)
        stripped.eval()
        x = torch.rand(2, 3, 64, 64)
        assert torch.equal(stripped(x)["sl"], model(x)["sl"])


class TestGradientFlow:
    def test_backbone_receives_gradients_from_both_loss_sources(self):
        torch.manual_seed(0)
        model = assemble(build_backbone(BackboneConfig()), [supervised_head(8), puzzle_heads(2)], seed=3)
        model.train()
        x = torch.rand(6, 3, 64, 64)
        y = torch.randint(0, 8, (6,))
        puzzle_labels = torch.stack([torch.randperm(4) for _ in range(6)])

        def backbone_grad_norm(loss):
            model.zero_grad()
            loss.backward()
            return sum(float(p.grad.abs().sum()) for p in model.backbone.parameters() if p.grad is not None)

        out = model(x)
        sl_loss = -torch.log(out["sl"].gather(1, y.view(-1, 1)).clamp_min(1e-12)).mean()
        assert backbone_grad_norm(sl_loss) > 0

        out = model(x)
        ssh_loss = sum(
            -torch.log(p.gather(1, puzzle_labels[:, j].view(-1, 1)).clamp_min(1e-12)).mean()
            for j, p in enumerate(out["puzzle"])
        )
        assert backbone_grad_norm(ssh_loss) > 0


class TestCheckpoints:
    def test_roundtrip_forward_identical(self, tmp_path):
        model = assemble(
            build_backbone(BackboneConfig()), [supervised_head(8), puzzle_heads(2), rotation_head()], seed=4
        )
        model.eval()
        x = torch.rand(2, 3, 64, 64)
        before = model(x)
        save_checkpoint(model, tmp_path / "ckpt", epoch=3, seed=4, metrics={"accuracy": 0.5})
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        after = loaded(x)
        assert torch.equal(before["sl"], after["sl"])
        for a, b in zip(before["puzzle"], after["puzzle"]):
            assert torch.equal(a, b)
        assert manifest["epoch"] == 3
        assert manifest["metrics"]["accuracy"] == 0.5
        assert "backbone" in manifest["components"]

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nothing")

    def test_decoder_checkpoint_roundtrip(self, tmp_path):
        model = assemble(build_backbone(BackboneConfig()), [supervised_head(8), decoder_head()], seed=5)
        model.eval()
        x = torch.rand(1, 3, 64, 64)
        before = model(x)["decoder"]
        save_checkpoint(model, tmp_path / "dec")
        loaded, _ = load_checkpoint(tmp_path / "dec")
        assert torch.equal(loaded(x)["decoder"], before)
