import numpy as np
import pytest

from rangefuse.checkpoint import (
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from rangefuse.errors import ConfigError, DimensionError, FormatError
from rangefuse.losses import pseudo_labels, total_loss
from rangefuse.network import ModelConfig, RangeFusionNet, count_parameters
from rangefuse.preproc import RawScan, SensorConfig, collate, preprocess_pipeline
from rangefuse.tensor import Conv2d, Tensor, check_gradients, directional_check, functional as F

from conftest import random_points, randomize_affine


def toy_scan(rng, n=64, num_classes=4):
    pts = random_points(rng, n, spread=10.0)
    return RawScan(pts, rng.integers(0, num_classes, n))


def toy_inputs(cfg, rng, n=64):
    scan = toy_scan(rng, n, cfg.num_classes)
    proj, index, feats = preprocess_pipeline(scan, cfg.sensor)
    labels = scan.labels[proj.kept]
    return feats.astype(cfg.dtype), index, labels


def tiny64(**kw):
    return ModelConfig.tiny(dtype="float64", **kw)


class TestConfig:
    def test_json_roundtrip(self):
        cfg = ModelConfig.tiny(block_type="residual")
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    @pytest.mark.parametrize(
        "change",
        [
            dict(num_classes=0),
            dict(stage_strides=(1, 2)),
            dict(stage_strides=(2, 2, 2, 4)),  # 8 x 16 grid not divisible by 32
            dict(block_type="dense"),
            dict(dtype="float16"),
            dict(blocks_per_stage=(1, 0, 1, 1)),
        ],
    )
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            ModelConfig.tiny(**change)

    def test_unknown_key(self):
        data = ModelConfig.tiny().to_dict()
        data["width_multiplier"] = 2
        with pytest.raises(ConfigError):
            ModelConfig.from_dict(data)

    def test_cumulative_strides(self):
        assert ModelConfig.tiny().cumulative_strides() == [1, 2, 4, 8]


class TestParameterCount:
    def test_conv_example(self):
        assert count_parameters(Conv2d(4, 8, 3, bias=True)) == 296

    def test_full_config_within_budget(self):
        n = count_parameters(RangeFusionNet(ModelConfig.full()))
        assert 4.32e6 <= n <= 6.48e6


class TestForward:
    @pytest.fixture
    def setup(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg, seed=3)
        feats, index, labels = toy_inputs(cfg, rng)
        return cfg, model, feats, index, labels

    def test_shapes_and_pyramid(self, setup):
        cfg, model, feats, index, _ = setup
        out = model(feats, index)
        assert out.logits.shape == (index.num_points, cfg.num_classes)
        assert len(out.aux_logits) == cfg.num_stages
        for aux in out.aux_logits:
            assert aux.shape == (1, cfg.num_classes, 8, 16)
        for attn, s in zip(out.attention, cfg.cumulative_strides()):
            assert attn.shape == (1, cfg.stage_widths[0], 8 // s, 16 // s)

    def test_attention_strictly_inside_unit_interval(self, setup):
        _, model, feats, index, _ = setup
        for attn in model(feats, index).attention:
            assert attn.min() > 0.0 and attn.max() < 1.0

    def test_attention_saturation_passes_blocks_through(self, setup):
        _, model, feats, index, _ = setup
        # pre-activation forced to -25 (below -20) everywhere
        for stage in model.stages:
            stage.attention.weight.data[:] = 0.0
            stage.attention.bias.data[:] = -25.0
        pt0, embed = model.encoder(Tensor(feats), index)
        px = model.pixel_stem(embed, pt0, index)
        pt = model.point_stem(pt0, embed, index)
        for stage in model.stages:
            px_tilde = px
            for block in stage.blocks:
                px_tilde = block(px_tilde)
            px, pt = stage(px, pt, index)
            np.testing.assert_allclose(px.data, px_tilde.data, rtol=0, atol=1e-8)

    def test_single_class(self, rng):
        cfg = tiny64(num_classes=1)
        feats, index, _ = toy_inputs(cfg, rng)
        out = RangeFusionNet(cfg)(feats, index)
        assert out.logits.shape == (index.num_points, 1)

    def test_deterministic_construction_and_forward(self, rng):
        cfg = tiny64()
        feats, index, _ = toy_inputs(cfg, rng)
        a = RangeFusionNet(cfg, seed=7)(feats, index).logits.data
        b = RangeFusionNet(cfg, seed=7)(feats, index).logits.data
        c = RangeFusionNet(cfg, seed=8)(feats, index).logits.data
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, c)

    def test_point_permutation_equivariance(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg, seed=1)
        feats, index, _ = toy_inputs(cfg, rng)
        model(feats, index)  # populate running statistics
        model.eval()
        scan = toy_scan(rng, 80)
        perm = rng.permutation(80)
        _, ia, fa = preprocess_pipeline(scan, cfg.sensor)
        _, ib, fb = preprocess_pipeline(RawScan(scan.points[perm]), cfg.sensor)
        la = model(fa, ia).logits.data
        lb = model(fb, ib).logits.data
        np.testing.assert_allclose(lb, la[perm], rtol=1e-10, atol=1e-10)

    def test_batched_images(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg).eval()
        scans = [toy_scan(rng, n) for n in (50, 70)]
        parts = [preprocess_pipeline(s, cfg.sensor) for s in scans]
        index = collate([p[1] for p in parts])
        feats = np.concatenate([p[2] for p in parts])
        out = model(feats, index)
        assert out.aux_logits[0].shape[0] == 2
        single = model(parts[1][2], parts[1][1]).logits.data
        np.testing.assert_allclose(out.logits.data[parts[0][1].num_points:], single, atol=1e-10)

    def test_grid_mismatch(self, rng):
        cfg = tiny64()
        _, index, feats = preprocess_pipeline(toy_scan(rng), SensorConfig(8, 32, 0.2, 0.5))
        with pytest.raises(DimensionError):
            RangeFusionNet(cfg)(feats, index)

    def test_feature_width_mismatch(self, setup):
        _, model, feats, index, _ = setup
        with pytest.raises(DimensionError):
            model(feats[:, :4], index)

    @pytest.mark.parametrize("block_type", ["convsenext", "residual"])
    def test_block_types(self, rng, block_type):
        cfg = tiny64(block_type=block_type)
        feats, index, _ = toy_inputs(cfg, rng)
        assert np.all(np.isfinite(RangeFusionNet(cfg)(feats, index).logits.data))

    def test_sigmoid_refinement_flag(self, setup):
        cfg, _, feats, index, _ = setup
        model = RangeFusionNet(cfg.replace(point_refine_sigmoid=True))
        pt0, embed = model.encoder(Tensor(feats), index)
        px = model.pixel_stem(embed, pt0, index)
        pt = model.point_stem(pt0, embed, index)
        _, pt = model.stages[0](px, pt, index)
        assert pt.data.min() > 0.0 and pt.data.max() < 1.0


class TestEncoder:
    def test_pixel_max_matches_loop(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg)
        feats, index, _ = toy_inputs(cfg, rng)
        pt, image = model.encoder(Tensor(feats), index)
        pixels = np.unique(index.pixel_index)
        pooled = np.stack([pt.data[index.pixel_index == p].max(axis=0) for p in pixels])
        expected = model.encoder.pixel_mlp(Tensor(pooled)).data
        flat = image.data.transpose(0, 2, 3, 1).reshape(-1, image.shape[1])
        np.testing.assert_allclose(flat[pixels], expected, atol=1e-12)
        empty = np.setdiff1d(np.arange(index.num_pixels), pixels)
        assert not flat[empty].any()


class TestGradients:
    def test_every_parameter_receives_gradient(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg, seed=2)
        # two images: with a single image, train-mode BN makes the pooled SE
        # input equal beta (0 at init), which parks the SE ReLU on its kink
        parts = [toy_inputs(cfg, rng, n=96) for _ in range(2)]
        index = collate([p[1] for p in parts])
        feats = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[2] for p in parts])
        out = model(feats, index)
        pix = pseudo_labels(labels, index, cfg.num_classes)
        loss, _ = total_loss(out.logits, out.aux_logits, labels, pix)
        loss.backward()
        dead = [name for name, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    def test_end_to_end_finite_differences(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg, seed=5)
        randomize_affine(model, rng)
        feats, index, _ = toy_inputs(cfg, rng)
        w = rng.standard_normal((index.num_points, cfg.num_classes))
        v = [rng.standard_normal(a.shape) for a in model(feats, index).aux_logits]

        def objective():
            out = model(feats, index)
            total = F.sum(F.mul(out.logits, Tensor(w)))
            for aux, vv in zip(out.aux_logits, v):
                total = F.add(total, F.sum(F.mul(aux, Tensor(vv))))
            return total

        names, params = zip(*model.named_parameters())
        # the 1 x 2 deepest map gives gradients near 1e-9, below the float64
        # difference noise; the 1e-5 floor acts as an absolute tolerance there
        errs = check_gradients(objective, params, step=1e-5, max_entries=3, rng=rng, floor=1e-5)
        worst = max(errs, key=errs.get)
        assert errs[worst] < 1e-3, names[int(worst)]

    def test_loss_directional_derivative(self, rng):
        cfg = tiny64()
        model = RangeFusionNet(cfg, seed=4)
        randomize_affine(model, rng)
        feats, index, labels = toy_inputs(cfg, rng)
        pix = pseudo_labels(labels, index, cfg.num_classes)

        def objective():
            out = model(feats, index)
            return total_loss(out.logits, out.aux_logits, labels, pix)[0]

        analytic, numeric = directional_check(objective, model.parameters(), step=1e-5, rng=rng)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric), 1e-6)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        cfg = ModelConfig.tiny()
        model = RangeFusionNet(cfg, seed=9)
        feats, index, _ = toy_inputs(cfg, rng)
        model(feats, index)  # move running statistics off their init
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, model, meta={"epoch": 3, "miou": 0.5})
        loaded, meta = load_checkpoint(a)
        save_checkpoint(b, loaded, meta=meta)
        assert a.read_bytes() == b.read_bytes()
        assert meta == {"epoch": 3, "miou": 0.5}
        assert loaded.cfg == cfg and not loaded.training
        np.testing.assert_array_equal(model.eval()(feats, index).logits.data, loaded(feats, index).logits.data)

    def test_header_layout(self):
        blob = encode_tensors({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        assert blob[:4] == b"HNXT"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1
        assert int.from_bytes(blob[12:14], "little") == 1 and blob[14:15] == b"w"
        assert blob[15] == 0 and blob[16] == 2  # float32, rank 2
        assert int.from_bytes(blob[17:21], "little") == 2 and int.from_bytes(blob[21:25], "little") == 3
        assert blob[25:] == np.arange(6, dtype="<f4").tobytes()

    @pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1", "<i8", "<i4", "<u4", ">f8"])
    def test_dtypes(self, dtype, rng):
        arr = (rng.random((3, 2, 1)) * 100).astype(dtype)
        back = decode_tensors(encode_tensors({"x": arr, "s": np.zeros((), dtype=dtype)}))
        assert np.array_equal(back["x"], arr) and back["s"].shape == ()

    def test_unsupported_dtype(self):
        with pytest.raises(ConfigError):
            encode_tensors({"x": np.zeros(2, dtype=np.complex64)})

    @pytest.mark.parametrize(
        "corrupt",
        [
            lambda b: b"XXXX" + b[4:],
            lambda b: b[:-3],
            lambda b: b + b"\0",
            lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
            lambda b: b[:15] + b"\x63" + b[16:],
        ],
        ids=["magic", "truncated", "trailing", "version", "dtype-code"],
    )
    def test_corrupt_bytes(self, corrupt):
        blob = encode_tensors({"w": np.ones((2, 2), dtype=np.float32)})
        with pytest.raises(FormatError):
            decode_tensors(corrupt(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            read_tensors(tmp_path / "absent.ckpt")

    def test_tensor_set_mismatch(self, tmp_path):
        model = RangeFusionNet(ModelConfig.tiny())
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        tensors = read_tensors(path)
        tensors.pop(next(k for k in tensors if k.endswith("running_var")))
        write_tensors(path, tensors)
        with pytest.raises(FormatError):
            load_checkpoint(path)
