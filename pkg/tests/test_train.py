import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridformer.config import PRESETS, dump_dataclass, grid_config, load_config, parse_lines
from gridformer.data import DegradationSpec, PairedDataset, synth_pairs
from gridformer.errors import ConfigError, ContractError, TrainingError
from gridformer.grid import GridConfig, GridFormer
from gridformer.losses import LossConfig
from gridformer.optim import OptimizerState, adamw_step, cosine_lr
from gridformer.tensor import Parameter
from gridformer.train import BatchSampler, TrainConfig, clip_gradients, train_loop


def make_param(value, grad, path="w"):
    p = Parameter(np.array(value, np.float64))
    p.path = path
    p.grad = np.array(grad, np.float64)
    return p


@pytest.fixture(scope="module")
def small_data():
    return synth_pairs(4, DegradationSpec("haze", seed=1), 16)


def micro_model(seed=0):
    return GridFormer(PRESETS["micro"].replace(seed=seed))


class TestAdamW:
    def test_zero_grad_is_identity(self):
        p = make_param([1.0, -2.0, 3.0], [0.0, 0.0, 0.0])
        adamw_step([p], OptimizerState(), lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_decay_only(self):
        p = make_param([1.0, -2.0], [0.0, 0.0])
        adamw_step([p], OptimizerState(), lr=0.1, weight_decay=0.01)
        np.testing.assert_allclose(p.data, [0.999, -1.998], rtol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=6))
    def test_first_step_moves_by_lr_sign(self, grads):
        p = make_param(np.zeros(len(grads)), grads)
        adamw_step([p], OptimizerState(), lr=1e-3)
        np.testing.assert_allclose(p.data, -1e-3 * np.sign(grads), rtol=1e-4)

    def test_matches_reference_over_steps(self, rng):
        p = make_param(rng.standard_normal(5), np.zeros(5))
        x, m, v = p.data.copy(), np.zeros(5), np.zeros(5)
        state = OptimizerState()
        for t in range(1, 6):
            g = rng.standard_normal(5)
            p.grad = g
            adamw_step([p], state, lr=0.01, weight_decay=0.1)
            x = x * (1 - 0.01 * 0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)
        assert state.step == 5

    def test_missing_grad_names_parameter(self):
        p = make_param([1.0], [0.0], path="head.conv.weight")
        p.grad = None
        with pytest.raises(ContractError, match="head.conv.weight"):
            adamw_step([p], OptimizerState(), lr=0.1)

    def test_clip(self):
        p = make_param([0.0, 0.0], [3.0, 4.0])
        assert clip_gradients([p], 1.0) == 5.0
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 1000) == 3e-4
        assert cosine_lr(1000, 1000) == 1e-6
        assert cosine_lr(500, 1000) == pytest.approx(1.505e-4, rel=1e-12)

    def test_clamped_after_end(self):
        assert cosine_lr(5000, 1000) == 1e-6

    def test_monotone(self):
        values = [cosine_lr(s, 300) for s in range(301)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_schedule_in_trace(self, small_data):
        cfg = TrainConfig(total_steps=4, patch_size=16, log_every=0)
        result = train_loop(micro_model(), small_data, cfg, LossConfig(alpha=0.0))
        assert [r.lr for r in result.trace] == [cosine_lr(s, 4) for s in range(4)]


class TestSampler:
    def test_epoch_is_permutation(self):
        s = BatchSampler(7, seed=3)
        first = s.take(7)
        assert sorted(first) == list(range(7))
        assert sorted(s.take(7)) == list(range(7))

    def test_deterministic(self):
        assert BatchSampler(10, 1).take(25) == BatchSampler(10, 1).take(25)

    def test_seed_matters(self):
        assert BatchSampler(10, 1).take(10) != BatchSampler(10, 2).take(10)


class TestTrainLoop:
    def test_loss_decreases(self, small_data):
        cfg = TrainConfig(total_steps=200, patch_size=16, log_every=0)
        trace = train_loop(micro_model(), small_data, cfg, LossConfig(alpha=0.0)).trace
        assert np.mean([r.loss for r in trace[-20:]]) < trace[0].loss

    def test_alpha_zero_total_is_charbonnier(self, small_data):
        cfg = TrainConfig(total_steps=3, patch_size=16, log_every=0)
        for row in train_loop(micro_model(), small_data, cfg, LossConfig(alpha=0.0)).trace:
            assert row.loss == row.charbonnier
            assert row.perceptual == 0.0

    def test_perceptual_term_reported(self, small_data):
        cfg = TrainConfig(total_steps=2, patch_size=16, log_every=0)
        row = train_loop(micro_model(), small_data, cfg).trace[0]
        assert row.perceptual > 0
        assert row.loss == pytest.approx(row.charbonnier + 0.1 * row.perceptual, rel=1e-12)

    def test_bit_identical_runs(self, small_data, tmp_path):
        cfg = TrainConfig(total_steps=5, patch_size=16, batch_size=2, log_every=0)
        train_loop(micro_model(), small_data, cfg, out_dir=tmp_path / "a")
        train_loop(micro_model(), small_data, cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
        assert (tmp_path / "a" / "final.gfck").read_bytes() == (tmp_path / "b" / "final.gfck").read_bytes()

    def test_callback_stops_early(self, small_data, tmp_path):
        cfg = TrainConfig(total_steps=50, patch_size=16, log_every=0)
        result = train_loop(micro_model(), small_data, cfg, out_dir=tmp_path, callback=lambda s, r: s == 2)
        assert len(result.trace) == 3
        assert (tmp_path / "final.gfck").exists()

    def test_periodic_checkpoints(self, small_data, tmp_path):
        cfg = TrainConfig(total_steps=4, patch_size=16, checkpoint_every=2, log_every=0)
        train_loop(micro_model(), small_data, cfg, out_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("step*.gfck")) == ["step000002.gfck", "step000004.gfck"]

    def test_non_finite_loss(self, small_data):
        bad = PairedDataset(small_data.ids, [d * np.nan for d in small_data.degraded], small_data.clean)
        cfg = TrainConfig(total_steps=2, patch_size=16, log_every=0)
        with pytest.raises(TrainingError, match="step 0"):
            train_loop(micro_model(), bad, cfg)

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train_loop(micro_model(), PairedDataset([], [], []), TrainConfig(log_every=0))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_start=1e-6, lr_end=1e-3)
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=0)


class TestConfig:
    def test_presets(self):
        assert grid_config("gridformer") == GridConfig()
        assert [grid_config("gridformer-s").width(i) for i in range(3)] == [32, 64, 128]

    def test_none_gives_defaults(self):
        assert load_config(None)["train"] == TrainConfig()

    def test_file_with_sections(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            "# comment\npreset = tiny\nrows=2\nsampler_strides=2,2\n"
            "train.total_steps = 7\ntrain.deterministic=false\nloss.alpha=0.0\n"
        )
        cfg = load_config(str(path))
        assert cfg["grid"] == PRESETS["tiny"].replace(rows=2, sampler_strides=(2, 2))
        assert cfg["train"].total_steps == 7 and cfg["train"].deterministic is False
        assert cfg["loss"].alpha == 0.0

    def test_dump_round_trip(self, tmp_path):
        cfg = PRESETS["micro"].replace(use_dense=False)
        path = tmp_path / "c.txt"
        path.write_text(dump_dataclass(cfg))
        assert grid_config(str(path)) == cfg

    @pytest.mark.parametrize(
        "text",
        ["nonsense", "bogus_key=1", "rows=abc", "use_norm=maybe", "nope.x=1", "preset=huge"],
    )
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "c.txt"
        path.write_text(text + "\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_unknown_preset_or_missing_file(self):
        with pytest.raises(ConfigError, match="preset"):
            grid_config("does-not-exist")

    def test_parse_lines_default_section(self):
        assert parse_lines("a=1\nx.b = 2") == {"grid": {"a": "1"}, "x": {"b": "2"}}

    def test_stride_count_must_match_rows(self):
        with pytest.raises(ConfigError):
            GridConfig(rows=2)
