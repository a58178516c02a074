import time

import numpy as np
import pytest

from conftest import check_grads, param
from gridformer import tensor as T
from gridformer.config import PRESETS
from gridformer.data import make_pyramid
from gridformer.errors import ConfigError, ContractError, FormatError, ShapeError
from gridformer.gradcheck import gradcheck_model
from gridformer.grid import (
    Downsample,
    GridConfig,
    GridFormer,
    GridFusion,
    GridHead,
    GridTail,
    Upsample,
    WeightedFusion,
    column_directions,
)
from gridformer.serialization import checkpoint_load, checkpoint_save
from gridformer.tensor import Tape, Tensor, backward, meta, no_grad

TINY = PRESETS["tiny"]


def pyramid(rng, size, n=1, rows=3, dtype=np.float32):
    return [Tensor(a) for a in make_pyramid(rng.random((n, 3, size, size)).astype(dtype), rows)]


def zero(module):
    for p in module.parameters():
        p.data[...] = 0


def zero_tail_convs(model):
    for conv in model.tail.conv:
        zero(conv)


def meta_input(*shape):
    return Tensor._wrap(np.broadcast_to(np.float32(0), shape))


class TestConfig:
    def test_widths(self):
        cfg = GridConfig()
        assert [cfg.width(i) for i in range(3)] == [48, 96, 192]

    def test_stride_count_must_match_rows(self):
        with pytest.raises(ConfigError):
            GridConfig(rows=2)

    def test_pad_multiple(self):
        assert GridConfig().pad_multiple == 16
        assert GridConfig(rows=1, sampler_strides=(32,)).pad_multiple == 32

    def test_column_directions(self):
        assert column_directions(5) == ["down", "down", "plain", "up", "up"]
        assert column_directions(2) == ["down", "up"]
        assert column_directions(1) == ["plain"]


class TestTransitions:
    def test_downsample_shape(self, rng):
        with meta():
            out = Downsample(rng, 48)(meta_input(1, 48, 256, 256))
        assert out.shape == (1, 96, 128, 128)

    def test_upsample_shape(self, rng):
        with meta():
            out = Upsample(rng, 96)(meta_input(1, 96, 128, 128))
        assert out.shape == (1, 48, 256, 256)

    def test_round_trip_shape(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 8, 6)))
        assert Upsample(rng, 8)(Downsample(rng, 4)(x)).shape == x.shape

    def test_zero_weights(self, rng):
        down, up = Downsample(rng, 2), Upsample(rng, 4)
        zero(down)
        zero(up)
        np.testing.assert_array_equal(down(Tensor(np.full((1, 2, 4, 4), 0.7))).data, 0.0)
        np.testing.assert_array_equal(up(Tensor(rng.standard_normal((1, 4, 2, 2)))).data, 0.0)

    def test_odd_extent(self, rng):
        with pytest.raises(ShapeError):
            Downsample(rng, 2)(Tensor(np.zeros((1, 2, 5, 4))))

    def test_grads(self, rng):
        down, up = Downsample(rng, 2, np.float64), Upsample(rng, 4, np.float64)
        x = param(rng, 1, 2, 4, 4)
        mask = Tensor(rng.standard_normal((1, 2, 4, 4)))
        check_grads(lambda: T.sum_all(up(down(x)) * mask), [x] + down.parameters() + up.parameters())


class TestWeightedFusion:
    def test_selects_first(self, rng):
        f = WeightedFusion(3, np.float64)
        f.w1.data[...] = 1.0
        f.w2.data[...] = 0.0
        a = rng.standard_normal((1, 3, 2, 2))
        np.testing.assert_array_equal(f(Tensor(a), Tensor(rng.standard_normal((1, 3, 2, 2)))).data, a)

    def test_equal_inputs_average(self, rng):
        a = rng.standard_normal((2, 3, 2, 2))
        np.testing.assert_array_equal(WeightedFusion(3, np.float64)(Tensor(a), Tensor(a)).data, a)

    def test_init(self):
        f = WeightedFusion(5)
        assert f.w1.data.tolist() == [0.5] * 5 and f.w2.data.tolist() == [0.5] * 5

    def test_weight_grad_is_channel_sum(self, rng):
        f = WeightedFusion(3, np.float64)
        a, b = Tensor(rng.standard_normal((2, 3, 2, 2))), Tensor(rng.standard_normal((2, 3, 2, 2)))
        with Tape():
            root = T.sum_all(f(a, b))
        backward(root, f.parameters())
        np.testing.assert_allclose(f.w1.grad, a.data.sum(axis=(0, 2, 3)), rtol=1e-12)
        check_grads(lambda: T.sum_all(f(a, b)), f.parameters())

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            WeightedFusion(2)(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 2, 2))))


class TestHead:
    def test_full_scale_shapes(self, rng):
        head = GridHead(rng, GridConfig(cetls_per_rdtl=1))
        with meta():
            feats = head([meta_input(1, 3, 256 >> i, 256 >> i) for i in range(3)])
        assert [f.shape[1:] for f in feats] == [(48, 256, 256), (96, 128, 128), (192, 64, 64)]

    def test_zero_weights_give_zero_features(self, rng):
        head = GridHead(rng, TINY)
        zero(head)
        for f in head(pyramid(rng, 16)):
            np.testing.assert_array_equal(f.data, 0.0)

    def test_coarse_level_perturbation(self, rng):
        head = GridHead(rng, TINY)
        x = pyramid(rng, 16)
        base = head(x)
        x[1] = Tensor(x[1].data + 0.1)
        moved = head(x)
        np.testing.assert_array_equal(moved[0].data, base[0].data)
        assert not np.allclose(moved[1].data, base[1].data)
        assert not np.allclose(moved[2].data, base[2].data)


class TestFusion:
    def test_shapes_preserved(self, rng):
        fusion = GridFusion(rng, TINY)
        feats = [Tensor(rng.standard_normal((1, TINY.width(i), 16 >> i, 16 >> i)).astype(np.float32)) for i in range(3)]
        assert [f.shape for f in fusion(feats)] == [f.shape for f in feats]

    def test_rows_decouple_without_cross_weights(self, rng):
        fusion = GridFusion(rng, TINY)
        for col in fusion.columns:
            for f in getattr(col, "fuse", []):
                f.w2.data[...] = 0
        feats = [Tensor(rng.standard_normal((1, TINY.width(i), 16 >> i, 16 >> i)).astype(np.float32)) for i in range(3)]
        base = fusion(feats)
        feats[2] = Tensor(feats[2].data + 1.0)
        moved = fusion(feats)
        np.testing.assert_array_equal(moved[0].data, base[0].data)
        np.testing.assert_array_equal(moved[1].data, base[1].data)
        assert not np.allclose(moved[2].data, base[2].data)

    def test_two_row_two_column_gradients(self, rng):
        cfg = GridConfig(rows=2, fusion_columns=2, base_channels=4, growth=2, cetls_per_rdtl=1,
                         sampler_strides=(2, 2), dtype="float64", seed=3)
        model = GridFormer(cfg)
        clean = rng.random((1, 3, 16, 16))
        report = gradcheck_model(model, np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1), clean)
        assert report.passed, report.summary()
        assert {c.path.split(".")[0] for c in report.checks} == {"head", "fusion", "tail"}


class TestTail:
    def test_zero_convs_give_long_skip(self, rng):
        tail = GridTail(rng, TINY)
        for conv in tail.conv:
            zero(conv)
        x = pyramid(rng, 16)
        feats = [Tensor(rng.standard_normal((1, TINY.width(i), 16 >> i, 16 >> i)).astype(np.float32)) for i in range(3)]
        for out, inp in zip(tail(feats, x), x):
            np.testing.assert_array_equal(out.data, inp.data)

    def test_every_parameter_gets_gradient(self, rng):
        tail = GridTail(rng, TINY.replace(dtype="float64"), np.float64)
        for p in tail.parameters():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        x = pyramid(rng, 16, dtype=np.float64)
        feats = [Tensor(rng.standard_normal((1, TINY.width(i), 16 >> i, 16 >> i))) for i in range(3)]
        with Tape():
            out = tail(feats, x)
            root = T.sum_all(out[0] * out[0]) + T.sum_all(out[1] * out[1]) + T.sum_all(out[2] * out[2])
        backward(root, tail.parameters())
        dead = [n for n, p in tail.named_parameters() if not np.any(p.grad)]
        assert dead == []


class TestModel:
    def test_zero_tail_is_identity(self, rng):
        model = GridFormer(TINY)
        zero_tail_convs(model)
        x = pyramid(rng, 32, n=2)
        for out, inp in zip(model(x), x):
            np.testing.assert_array_equal(out.data, inp.data)

    def test_unique_paths(self):
        model = GridFormer(TINY)
        names = [n for n, _ in model.named_parameters()]
        assert len(names) == len(set(names))
        assert all(p.path == n for n, p in model.named_parameters())

    def test_bad_pyramid(self, rng):
        model = GridFormer(TINY)
        x = pyramid(rng, 16)
        with pytest.raises(ContractError):
            model(x[:2])
        with pytest.raises(ContractError):
            model([x[0], x[2], x[2]])
        with pytest.raises(ContractError):
            model(pyramid(rng, 24))

    @pytest.mark.parametrize("size", [20, 37, 64])
    def test_restore_pads_and_crops(self, rng, size):
        model = GridFormer(TINY)
        img = rng.random((3, size, size)).astype(np.float32)
        levels = model.restore_pyramid(img)
        assert [lv.shape for lv in levels] == [(3, -(-size // 2**i), -(-size // 2**i)) for i in range(3)]

    def test_restore_on_divisible_input_matches_forward(self, rng):
        model = GridFormer(TINY)
        img = rng.random((1, 3, 32, 32)).astype(np.float32)
        with no_grad():
            direct = model([Tensor(a) for a in make_pyramid(img)])[0].data
        np.testing.assert_array_equal(model.restore(img), direct)

    def test_deterministic_forward(self, rng):
        a, b = GridFormer(TINY), GridFormer(TINY)
        x = pyramid(rng, 16)
        np.testing.assert_array_equal(a(x)[0].data, b(x)[0].data)

    def test_tiny_step_budget(self, rng):
        model = GridFormer(TINY)
        x = pyramid(rng, 64)
        start = time.perf_counter()
        with Tape():
            out = model(x)
            root = T.mean(out[0])
        backward(root, model.parameters())
        assert time.perf_counter() - start < 10.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        model = GridFormer(TINY.replace(seed=4))
        for p in model.parameters():
            p.data = p.data + rng.standard_normal(p.shape).astype(p.dtype) * 0.01
        path = tmp_path / "m.gfck"
        checkpoint_save(model, path)
        loaded = checkpoint_load(path)
        assert loaded.config == model.config
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        x = pyramid(rng, 16)
        np.testing.assert_array_equal(model(x)[0].data, loaded(x)[0].data)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.gfck"
        checkpoint_save(GridFormer(PRESETS["micro"]), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            checkpoint_load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.gfck"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            checkpoint_load(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.gfck"
        checkpoint_save(GridFormer(PRESETS["micro"]), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            checkpoint_load(path)

    def test_mismatched_config_names_first_path(self, tmp_path):
        path = tmp_path / "m.gfck"
        checkpoint_save(GridFormer(PRESETS["micro"]), path)
        other = GridFormer(PRESETS["micro"].replace(growth=2))
        with pytest.raises(FormatError, match=r"head\.gfl\.0\.layers\.0\.out\.weight"):
            checkpoint_load(path, into=other)

    def test_config_text_is_readable(self, tmp_path):
        path = tmp_path / "m.gfck"
        checkpoint_save(GridFormer(PRESETS["micro"]), path)
        raw = path.read_bytes()
        assert raw[:4] == b"GFCK"
        assert b"base_channels=8\n" in raw and b"sampler_strides=4,2,2\n" in raw
