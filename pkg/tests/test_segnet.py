"""Network assembly tests: shapes, providers, variants, parameter ordering."""

import numpy as np
import pytest

from hqfnet import tensor as T
from hqfnet.checkpoint import read_feature, write_feature
from hqfnet.segnet import (
    FUSED_STAGES,
    BaselineFusion,
    FileFeatureProvider,
    NetConfig,
    SegNet,
    SyntheticFeatureProvider,
    batch_features,
)
from hqfnet.tensor import ShapeError, Tensor


def toy_cfg(**kw):
    base = dict(input_size=64, n_classes=3, width=0.125, n_qubits=8, provider_channels=8)
    base.update(kw)
    return NetConfig(**base)


def toy_feats(net, ids):
    provider = SyntheticFeatureProvider(net.cfg, seed=11)
    return batch_features(net, provider, ids)


class TestNetConfig:
    def test_ladder_scaling(self):
        assert toy_cfg().ladder == (8, 16, 32, 64, 128)
        assert NetConfig().ladder == (64, 128, 256, 512, 1024)

    def test_divisibility_guard(self):
        with pytest.raises(ValueError, match="divisible"):
            NetConfig(input_size=100)

    def test_fusion_mode_guard(self):
        with pytest.raises(ValueError, match="fusion"):
            NetConfig(fusion="concat")


class TestEncoder:
    def test_paper_profile_ladder(self):
        cfg = NetConfig(n_classes=5)
        net = SegNet(cfg, seed=0)
        x = Tensor(np.zeros((1, 3, 224, 224)))
        skips, bottom = net.encoder.forward(x)
        assert [s.shape for s in skips] == [
            (1, 128, 112, 112), (1, 256, 56, 56), (1, 512, 28, 28), (1, 1024, 14, 14)
        ]
        assert bottom.shape == (1, 1024, 14, 14)

    def test_width_scales_channels(self):
        net = SegNet(toy_cfg(), seed=0)
        skips, bottom = net.encoder.forward(Tensor(np.zeros((1, 3, 64, 64))))
        assert bottom.shape == (1, 128, 4, 4)

    def test_deterministic_forward(self):
        net = SegNet(toy_cfg(fusion="none", qskip=False, qmoe=False), seed=3)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 64, 64)))
        a = net.forward(x).data
        b = net.forward(x).data
        np.testing.assert_array_equal(a, b)


class TestProviders:
    def test_synthetic_deterministic(self):
        cfg = toy_cfg()
        p1 = SyntheticFeatureProvider(cfg, seed=5)
        p2 = SyntheticFeatureProvider(cfg, seed=5)
        for stage in FUSED_STAGES:
            np.testing.assert_array_equal(
                p1.features("img_3", stage), p2.features("img_3", stage)
            )

    def test_synthetic_varies_by_key(self):
        cfg = toy_cfg()
        p = SyntheticFeatureProvider(cfg, seed=5)
        a = p.features("img_3", 2)
        assert not np.array_equal(a, p.features("img_4", 2))
        assert not np.array_equal(a, SyntheticFeatureProvider(cfg, 6).features("img_3", 2))

    def test_shapes_follow_patch_factor(self):
        cfg = toy_cfg()
        p = SyntheticFeatureProvider(cfg, seed=5)
        for stage in FUSED_STAGES:
            want = cfg.provider_shape(stage)
            assert p.features("x", stage).shape == want
            assert want[1] == max(1, (cfg.input_size >> stage) // cfg.provider_patch)

    def test_file_provider_round_trip(self, tmp_path):
        cfg = toy_cfg()
        src = SyntheticFeatureProvider(cfg, seed=9)
        manifest = {}
        for stage in FUSED_STAGES:
            arr = src.features("s0", stage)
            write_feature(tmp_path / f"s0_{stage}.hqft", arr)
            back = read_feature(tmp_path / f"s0_{stage}.hqft")
            np.testing.assert_array_equal(back, arr.astype("<f4").astype(np.float64))
            manifest.setdefault("s0", {})[str(stage)] = f"s0_{stage}.hqft"
        (tmp_path / "manifest.json").write_text(__import__("json").dumps(manifest))
        fp = FileFeatureProvider(cfg, tmp_path / "manifest.json")
        got = fp.features("s0", 2)
        assert got.shape == cfg.provider_shape(2)
        with pytest.raises(FileNotFoundError):
            fp.features("missing", 2)

    def test_provider_is_frozen(self):
        net = SegNet(toy_cfg(), seed=0)
        names = [n for n, _ in net.named_params()]
        assert not any("provider" in n for n in names)


class TestBaselineFusion:
    def test_add_with_zero_projection(self):
        rng = np.random.default_rng(0)
        fuse = BaselineFusion(rng, 4, 2, "add")
        fuse.proj.w.data[:] = 0.0
        fuse.proj.b.data[:] = 0.0
        u = Tensor(rng.normal(size=(1, 4, 6, 6)))
        d = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(fuse.forward(u, d).data, u.data)

    def test_mul_with_unit_projection(self):
        rng = np.random.default_rng(1)
        fuse = BaselineFusion(rng, 4, 2, "mul")
        fuse.proj.w.data[:] = 0.0
        fuse.proj.b.data[:] = 1.0
        u = Tensor(rng.normal(size=(1, 4, 6, 6)))
        d = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_allclose(fuse.forward(u, d).data, u.data, atol=1e-12)

    def test_matches_elementwise_loop(self):
        rng = np.random.default_rng(2)
        for mode in ("add", "mul"):
            fuse = BaselineFusion(rng, 3, 2, mode)
            u = rng.normal(size=(1, 3, 4, 4))
            d = rng.normal(size=(1, 2, 4, 4))
            out = fuse.forward(Tensor(u), Tensor(d)).data
            proj = T.bilinear_upsample(fuse.proj(Tensor(d)), 4, 4).data
            expect = np.empty_like(u)
            for b in range(1):
                for c in range(3):
                    for y in range(4):
                        for x in range(4):
                            if mode == "add":
                                expect[b, c, y, x] = u[b, c, y, x] + proj[b, c, y, x]
                            else:
                                expect[b, c, y, x] = u[b, c, y, x] * proj[b, c, y, x]
            assert np.abs(out - expect).max() <= 1e-12


class TestForward:
    def test_logits_shape_matches_input(self):
        net = SegNet(toy_cfg(), seed=1)
        x = Tensor(np.random.default_rng(3).uniform(size=(2, 3, 64, 64)))
        out = net.forward(x, toy_feats(net, ["a", "b"]))
        assert out.shape == (2, 3, 64, 64)

    def test_plain_variant_needs_no_features(self):
        net = SegNet(toy_cfg(fusion="none", qskip=False, qmoe=False), seed=1)
        out = net.forward(Tensor(np.zeros((1, 3, 64, 64))))
        assert out.shape == (1, 3, 64, 64)
        names = [n for n, _ in net.named_params()]
        assert not any(n.startswith(("fusion", "qskip", "bottleneck.qmoe")) for n in names)

    def test_fusion_without_features_rejected(self):
        net = SegNet(toy_cfg(), seed=1)
        with pytest.raises(ValueError, match="provider"):
            net.forward(Tensor(np.zeros((1, 3, 64, 64))))

    def test_wrong_input_size_rejected(self):
        net = SegNet(toy_cfg(), seed=1)
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 3, 32, 32))), {})

    @pytest.mark.parametrize("fusion,qskip,qmoe", [
        ("mul", False, False), ("add", False, False), ("dmcaf", False, False),
        ("dmcaf", True, False), ("dmcaf", False, True), ("dmcaf", True, True),
    ])
    def test_variant_matrix_smoke(self, fusion, qskip, qmoe):
        net = SegNet(toy_cfg(fusion=fusion, qskip=qskip, qmoe=qmoe), seed=1)
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)))
        out = net.forward(x, toy_feats(net, ["v"]))
        assert out.shape == (1, 3, 64, 64)
        assert np.isfinite(out.data).all()

    def test_qskip_disabled_is_pass_through(self):
        cfg = toy_cfg(fusion="none", qmoe=False, qskip=False)
        net = SegNet(cfg, seed=2)
        trace = {}
        net.forward(Tensor(np.zeros((1, 3, 64, 64))), None, trace=trace)
        assert not any(k.startswith("qskip") for k in trace)
        assert net.qskips == []


class TestParameterLadder:
    def counts(self):
        out = {}
        for name, fusion, qskip, qmoe in (
            ("mul", "mul", False, False), ("add", "add", False, False),
            ("dmcaf", "dmcaf", False, False), ("dmcaf_qskip", "dmcaf", True, False),
            ("dmcaf_qmoe", "dmcaf", False, True), ("full", "dmcaf", True, True),
        ):
            cfg = toy_cfg(fusion=fusion, qskip=qskip, qmoe=qmoe,
                          dmcaf=__import__("hqfnet.dmcaf", fromlist=["DmcafConfig"]).DmcafConfig(
                              dim=16, heads=2, points=2, stride=2))
            out[name] = SegNet(cfg, seed=0).param_count()
        return out

    def test_each_module_only_adds_parameters(self):
        c = self.counts()
        assert c["mul"] == c["add"]
        assert c["dmcaf"] > c["add"]
        assert c["dmcaf_qskip"] > c["dmcaf"]
        assert c["dmcaf_qmoe"] > c["dmcaf"]
        assert all(c["full"] > c[k] for k in c if k != "full")

    def test_named_params_stable_and_unique(self):
        net = SegNet(toy_cfg(), seed=0)
        names = [n for n, _ in net.named_params()]
        assert len(names) == len(set(names))
        assert names == [n for n, _ in net.named_params()]
