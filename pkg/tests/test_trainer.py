from dataclasses import replace

import numpy as np
import pytest

from gmcml.camera import CameraMode
from gmcml.losses import Stage
from gmcml.noise import coupling_check, ratios
from gmcml.trainer import (
    METRIC_FIELDS,
    SGD,
    Adam,
    Schedule,
    TrainConfig,
    Trainer,
    balanced_batches,
    check_compatible,
    read_metrics,
    run_training,
    split_stages,
)


def params_copy(trainer):
    return {k: v.data.copy() for k, v in trainer.params.items()}


class TestConfig:
    def test_round_trip(self, tiny_config):
        assert TrainConfig.from_dict(tiny_config.to_dict()) == tiny_config
        assert TrainConfig.from_dict(tiny_config.to_dict()).hash() == tiny_config.hash()

    def test_hash_changes_with_config(self, tiny_config):
        assert replace(tiny_config, lr=0.5).hash() != tiny_config.hash()

    @pytest.mark.parametrize(
        "bad", [dict(optimizer="rmsprop"), dict(batch_size=4), dict(lr=-1.0), dict(epochs_pretrain=-1), dict(m_tri=0.0)]
    )
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestSchedule:
    def test_balanced_batches(self):
        cats = [0] * 10 + [1] * 7 + [2] * 9
        batches = balanced_batches(cats, 9, 3, np.random.default_rng(0))
        assert len(batches) == 2
        for b in batches:
            assert sorted(np.bincount(np.asarray(cats)[b])) == [3, 3, 3]
        flat = np.concatenate(batches)
        assert len(set(flat.tolist())) == len(flat)

    def test_batch_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            balanced_batches([0, 0, 0, 1, 1, 1], 4, 2, np.random.default_rng(0))

    def test_stage_layout(self, tiny_config, tiny_pairs):
        sched = Schedule(tiny_config, split_stages(tiny_pairs, tiny_config))
        # 12 centred samples per class feed 3 pretrain batches; all 24 feed 6
        assert sched.total_steps == 2 * 3 + 2 * 6
        assert sched.stage_end(Stage.PRETRAIN) == 6
        assert sched.batch(5)[0] is Stage.PRETRAIN and sched.batch(6)[0] is Stage.FINETUNE
        assert all(p.mode is CameraMode.CENTERED for p in sched.batch(0)[1])
        with pytest.raises(IndexError):
            sched.batch(sched.total_steps)

    def test_missing_mode_rejected(self, tiny_config, tiny_pairs):
        centred = [p for p in tiny_pairs if p.mode is CameraMode.CENTERED]
        with pytest.raises(ValueError, match="shifted"):
            split_stages(centred, tiny_config)
        shifted = [p for p in tiny_pairs if p.mode is CameraMode.SHIFTED]
        with pytest.raises(ValueError, match="centered"):
            split_stages(shifted, tiny_config)
        assert split_stages(centred, replace(tiny_config, epochs_finetune=0))

    def test_compatibility(self, tiny_config, tiny_pairs):
        with pytest.raises(ValueError, match="model 32, dataset 16"):
            check_compatible(replace(tiny_config, resolution=32), tiny_pairs)
        with pytest.raises(ValueError, match="class count"):
            check_compatible(replace(tiny_config, num_classes=1), tiny_pairs)


class TestStep:
    def test_infer_is_deterministic_and_bounded(self, tiny_config, tiny_pairs):
        tr = Trainer(tiny_config)
        o = np.stack([p.o for p in tiny_pairs[:4]])
        a = tr.infer(o)
        b = tr.infer(o.copy())
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert a[0].min() >= 0.0 and a[0].max() <= 1.0
        ref = tr.forward(o, o, np.zeros((4, tiny_config.latent)))
        np.testing.assert_array_equal(a[2], ref.logits.data)

    def test_infer_shape_checked(self, tiny_config):
        with pytest.raises(ValueError):
            Trainer(tiny_config).infer(np.zeros((3, 32, 32)))

    def test_zero_lr_keeps_parameters_but_moves_noise(self, tiny_config, tiny_pairs):
        tr = Trainer(replace(tiny_config, lr=0.0))
        before = params_copy(tr)
        batch = tiny_pairs[:4] + tiny_pairs[12:16]
        m = tr.train_step(batch, "pretrain")
        assert tr.noise.var_ratio != m.var_ratio
        for k, v in tr.params.items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_cross_network_gradient(self, tiny_config, tiny_pairs):
        tr = Trainer(replace(tiny_config, w_encgen=0.0))
        batch = tiny_pairs[:4] + tiny_pairs[12:16]
        m = tr.train_step(batch, "finetune")
        assert np.isfinite(m.gen_grad_norm) and m.gen_grad_norm > 0.0

    def test_softmax_only_in_finetune(self, tiny_config, tiny_pairs):
        tr = Trainer(tiny_config)
        batch = tiny_pairs[:4] + tiny_pairs[12:16]
        assert tr.train_step(batch, "pretrain").loss_softmax is None
        assert tr.train_step(batch, "finetune").loss_softmax > 0.0

    def test_category_outside_model(self, tiny_config, tiny_pairs):
        tr = Trainer(replace(tiny_config, num_classes=1, batch_size=6))
        with pytest.raises(ValueError, match="outside"):
            tr.train_step(tiny_pairs[:4] + tiny_pairs[12:16], "pretrain")

    def test_fixed_noise_constant(self, tiny_config, tiny_pairs, tmp_path):
        cfg = replace(tiny_config, adaptive_noise=False)
        run_training(cfg, None, tmp_path, pairs=tiny_pairs)
        rows = read_metrics(tmp_path / "metrics.csv")
        expected = ratios(1.0, cfg.alpha, cfg.beta)
        assert {(r["r_rec"], r["r_cls"]) for r in rows} == {expected}


class TestRun:
    def test_outputs_and_columns(self, tiny_config, tiny_pairs, tmp_path):
        tr = run_training(tiny_config, None, tmp_path, pairs=tiny_pairs)
        rows = read_metrics(tmp_path / "metrics.csv")
        assert tuple(rows[0]) == METRIC_FIELDS
        assert [r["step"] for r in rows] == list(range(tr.step))
        assert (tmp_path / "checkpoint.npz").exists() and (tmp_path / "checkpoint_pretrain.npz").exists()
        for r in rows:
            assert all(np.isfinite(v) for k, v in r.items() if k != "stage" and v is not None)
            assert (r["loss_softmax"] is None) == (r["stage"] == "pretrain")
            assert r["gen_grad_norm"] > 0.0

    def test_byte_identical_metrics(self, tiny_config, tiny_pairs, tmp_path):
        run_training(tiny_config, None, tmp_path / "a", pairs=tiny_pairs)
        run_training(tiny_config, None, tmp_path / "b", pairs=tiny_pairs)
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_seed_matters(self, tiny_config, tiny_pairs, tmp_path):
        run_training(tiny_config, None, tmp_path / "a", pairs=tiny_pairs, max_steps=3)
        run_training(replace(tiny_config, seed=1), None, tmp_path / "b", pairs=tiny_pairs, max_steps=3)
        assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()

    @pytest.mark.parametrize("optimizer", ["sgd_momentum", "adam"])
    def test_resume_replays_trajectory(self, tiny_config, tiny_pairs, tmp_path, optimizer):
        cfg = replace(tiny_config, optimizer=optimizer, lr=1e-3 if optimizer == "adam" else tiny_config.lr)
        full = run_training(cfg, None, tmp_path / "full", pairs=tiny_pairs)
        run_training(cfg, None, tmp_path / "part", pairs=tiny_pairs, max_steps=7)
        resumed = run_training(cfg, None, tmp_path / "part", pairs=tiny_pairs, resume=tmp_path / "part/checkpoint.npz")
        assert (tmp_path / "full/metrics.csv").read_bytes() == (tmp_path / "part/metrics.csv").read_bytes()
        for k, v in full.params.items():
            np.testing.assert_array_equal(v.data, resumed.params[k].data)

    def test_callback_can_stop(self, tiny_config, tiny_pairs, tmp_path):
        tr = run_training(tiny_config, None, tmp_path, pairs=tiny_pairs, callback=lambda t, m: m.step == 4)
        assert tr.step == 5 and len(read_metrics(tmp_path / "metrics.csv")) == 5
        assert Trainer.load(tmp_path / "checkpoint.npz").step == 5

    def test_pretrain_only_never_scores_softmax(self, tiny_config, tiny_pairs, tmp_path):
        run_training(replace(tiny_config, epochs_finetune=0), None, tmp_path, pairs=tiny_pairs)
        rows = read_metrics(tmp_path / "metrics.csv")
        assert rows and all(r["loss_softmax"] is None and r["stage"] == "pretrain" for r in rows)

    def test_coupling_holds_every_step(self, tiny_config, tiny_pairs, tmp_path):
        residuals = []
        run_training(tiny_config, None, tmp_path, pairs=tiny_pairs, callback=lambda tr, m: residuals.append(coupling_check(tr.noise)))
        assert len(residuals) == 18 and max(residuals) < 1e-9

    def test_reconstruction_improves(self, tiny_config, tiny_pairs, tmp_path):
        # the desk weight of 1e-3 barely moves a 16x16 generator in 180 steps
        cfg = replace(tiny_config, epochs_pretrain=60, epochs_finetune=0, w_encgen=0.1)
        run_training(cfg, None, tmp_path, pairs=tiny_pairs)
        gen = [r["loss_gen"] for r in read_metrics(tmp_path / "metrics.csv")]
        assert np.mean(gen[-10:]) < 0.8 * np.mean(gen[:10])


class TestCheckpoint:
    @pytest.mark.parametrize("optimizer", ["sgd_momentum", "adam"])
    def test_round_trip(self, tiny_config, tiny_pairs, tmp_path, optimizer):
        tr = Trainer(replace(tiny_config, optimizer=optimizer))
        tr.train_step(tiny_pairs[:4] + tiny_pairs[12:16], "pretrain")
        back = Trainer.load(tr.save(tmp_path / "c.npz"))
        assert back.step == tr.step and back.noise == tr.noise and back.config == tr.config
        for k, v in tr.params.items():
            np.testing.assert_array_equal(v.data, back.params[k].data)
        a, b = tr.optimizer.state_arrays(), back.optimizer.state_arrays()
        assert a.keys() == b.keys() and a
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Trainer.load(tmp_path / "nope.npz")

    def test_not_a_checkpoint(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        with pytest.raises(ValueError, match="not a checkpoint"):
            Trainer.load(tmp_path / "x.npz")


class TestOptimizers:
    def test_sgd_plain(self):
        from gmcml.tensor import Tensor

        p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        p["w"].grad = np.array([0.5, -1.0])
        SGD(0.1).step(p)
        np.testing.assert_allclose(p["w"].data, [0.95, 2.1])

    def test_adam_first_step_is_lr_sized(self):
        from gmcml.tensor import Tensor

        p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
        p["w"].grad = np.array([3.0, -0.01])
        Adam(0.01).step(p)
        np.testing.assert_allclose(p["w"].data, [0.99, -0.99], rtol=1e-6)
