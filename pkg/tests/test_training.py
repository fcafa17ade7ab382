import dataclasses
import hashlib

import numpy as np
import pytest
import torch

from cyclelab import scenes, training
from cyclelab.checkpoint import CorruptCheckpointError
from cyclelab.seeding import torch_gen
from cyclelab.training import (AdamState, ImagePool, RunState, TrainConfig,
                               TrainingDiverged, adam_update, init_run_state,
                               load_run_state, lr_at, replay_sample,
                               save_run_state, train, train_step)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    scenes.generate_dataset("many-to-one", 12, 4, 32, seed=5, out_dir=out)
    return out


def _tiny_cfg(**kw):
    base = dict(defense="none", total_iters=8, seed=0, pool_size=4,
                gen_filters=4, gen_blocks=1, disc_filters=4)
    base.update(kw)
    return TrainConfig(**base)


class TestLrSchedule:
    def test_initial_rate(self):
        cfg = TrainConfig(total_iters=1000)
        assert lr_at(0, cfg) == 2e-4

    def test_zero_at_end(self):
        cfg = TrainConfig(total_iters=1000)
        assert lr_at(1000, cfg) == 0.0

    def test_linear_interpolation(self):
        cfg = TrainConfig(total_iters=1000, decay_start_iter=500)
        assert lr_at(750, cfg) == pytest.approx(1e-4, rel=1e-12)

    def test_out_of_range(self):
        cfg = TrainConfig(total_iters=100)
        with pytest.raises(ValueError):
            lr_at(101, cfg)
        with pytest.raises(ValueError):
            lr_at(-1, cfg)

    def test_non_increasing_and_continuous_at_decay_start(self):
        cfg = TrainConfig(total_iters=200, decay_start_iter=80)
        rates = [lr_at(i, cfg) for i in range(201)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[80] == cfg.lr  # continuity: decay starts exactly at lr

    def test_decay_start_defaults_to_half(self):
        assert TrainConfig(total_iters=1000).decay_start_iter == 500


class TestImagePool:
    def test_zero_capacity_passthrough(self):
        pool = ImagePool(0)
        img = torch.rand(3, 4, 4)
        out = replay_sample(pool, img, torch_gen(0, "p"))
        assert out is img
        assert pool.images == []

    def test_fill_phase_returns_inputs(self):
        pool = ImagePool(5)
        for i in range(5):
            img = torch.full((1, 2, 2), float(i))
            out = replay_sample(pool, img, torch_gen(0, "p", i))
            assert torch.equal(out, img)
        assert len(pool.images) == 5

    def test_post_fill_return_fraction_is_half(self):
        pool = ImagePool(8)
        gen = torch_gen(0, "pool_stats")
        counter = 0
        for i in range(8):
            replay_sample(pool, torch.full((1,), float(counter)), gen)
            counter += 1
        from_pool = 0
        trials = 10_000
        for _ in range(trials):
            img = torch.full((1,), float(counter))
            counter += 1
            out = replay_sample(pool, img, gen)
            if out.item() != img.item():
                from_pool += 1
        assert abs(from_pool / trials - 0.5) <= 0.02


class TestAdam:
    def test_zero_gradients_from_rest_leave_params(self):
        p = torch.tensor([1.0, -2.0])
        st = AdamState.zeros([p])
        before = p.clone()
        adam_update([p], [torch.zeros(2)], st, lr=0.1)
        assert torch.equal(p, before)

    def test_moments_decay_toward_zero_on_zero_gradients(self):
        p = torch.tensor([0.0])
        st = AdamState.zeros([p])
        adam_update([p], [torch.tensor([1.0])], st, lr=0.1)
        m1, v1 = st.m[0].item(), st.v[0].item()
        for _ in range(10):
            adam_update([p], [torch.zeros(1)], st, lr=0.1)
        assert abs(st.m[0].item()) < abs(m1)
        assert abs(st.v[0].item()) < abs(v1)

    def test_first_step_moves_by_lr(self):
        p = torch.tensor([0.0])
        st = AdamState.zeros([p])
        adam_update([p], [torch.tensor([1.0])], st, lr=0.1)
        assert p.item() == pytest.approx(-0.1, rel=1e-6)
        assert st.step == 1

    def test_deterministic(self):
        results = []
        for _ in range(2):
            p = torch.tensor([0.3, -0.7])
            st = AdamState.zeros([p])
            for k in range(5):
                adam_update([p], [torch.tensor([0.1 * k, -0.2])], st, lr=0.01)
            results.append(p.clone())
        assert torch.equal(results[0], results[1])

    def test_non_finite_gradient_aborts_step(self):
        p = torch.tensor([1.0])
        st = AdamState.zeros([p])
        ok = adam_update([p], [torch.tensor([float("nan")])], st, lr=0.1)
        assert not ok
        assert p.item() == 1.0
        assert st.step == 0


def _param_digest(state: RunState, names) -> str:
    h = hashlib.sha256()
    for name in names:
        for _, p in state.nets[name].named_parameters():
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


class TestTrainStep:
    def test_update_isolation(self, tiny_dataset):
        cfg = _tiny_cfg(defense="guess")
        state = init_run_state(cfg)
        ta, tb = training._load_train_tensors(tiny_dataset)

        gen_before = _param_digest(state, ["g_ab", "g_ba"])
        disc_before = _param_digest(state, ["d_a", "d_b", "guess_a", "guess_b"])
        # generator-only step: discriminator params must be untouched
        cfg_gen_only = dataclasses.replace(cfg, disc_steps=1)
        lr = lr_at(0, cfg)
        from cyclelab.losses import assemble_generator_objective
        from cyclelab.seeding import derive_seed
        obj = assemble_generator_objective(
            ta[:1], tb[:1], g_ab=state.nets["g_ab"], g_ba=state.nets["g_ba"],
            d_a=state.nets["d_a"], d_b=state.nets["d_b"], cfg=cfg_gen_only,
            guess_a=state.nets["guess_a"], guess_b=state.nets["guess_b"])
        params = state.parameters("gen")
        grads = torch.autograd.grad(obj.total, params)
        adam_update(params, grads, state.adam["gen"], lr)
        assert _param_digest(state, ["d_a", "d_b", "guess_a", "guess_b"]) \
            == disc_before
        gen_after = _param_digest(state, ["g_ab", "g_ba"])
        assert gen_after != gen_before

        # discriminator step: generator params must be untouched
        training._disc_update(state, "d_a", ta[:1], obj.fake_a, lr)
        training._disc_update(state, "d_b", tb[:1], obj.fake_b, lr)
        assert _param_digest(state, ["g_ab", "g_ba"]) == gen_after
        assert _param_digest(state, ["d_a", "d_b", "guess_a", "guess_b"]) \
            != disc_before

    def test_step_advances_iteration(self, tiny_dataset):
        state = init_run_state(_tiny_cfg())
        ta, tb = training._load_train_tensors(tiny_dataset)
        lr, br = train_step(state, ta, tb, 0)
        assert state.iteration == 1
        assert br.total > 0


class TestTrainRuns:
    def test_zero_iterations(self, tiny_dataset, tmp_path):
        out = train(_tiny_cfg(total_iters=0), tiny_dataset, tmp_path / "run")
        assert (out / "final.cycd").exists()
        assert (out / "config.json").exists()
        lines = (out / "log.csv").read_text().splitlines()
        assert len(lines) == 1  # header only

    def test_byte_identical_reruns(self, tiny_dataset, tmp_path):
        cfg = _tiny_cfg(total_iters=6, defense="noise+guess")
        a = train(cfg, tiny_dataset, tmp_path / "a")
        b = train(cfg, tiny_dataset, tmp_path / "b")
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
        assert (a / "final.cycd").read_bytes() == (b / "final.cycd").read_bytes()

    def test_seed_changes_log(self, tiny_dataset, tmp_path):
        a = train(_tiny_cfg(total_iters=4), tiny_dataset, tmp_path / "a")
        b = train(_tiny_cfg(total_iters=4, seed=1), tiny_dataset, tmp_path / "b")
        assert (a / "log.csv").read_bytes() != (b / "log.csv").read_bytes()

    def test_lock_file_refuses_concurrent_train(self, tiny_dataset, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "lock").touch()
        with pytest.raises(RuntimeError, match="locked"):
            train(_tiny_cfg(), tiny_dataset, out)

    def test_config_recorded(self, tiny_dataset, tmp_path):
        import json
        out = train(_tiny_cfg(total_iters=2, defense="guess"), tiny_dataset,
                    tmp_path / "run")
        doc = json.loads((out / "config.json").read_text())
        assert doc["train_config"]["defense"] == "guess"
        assert doc["train_config"]["lambda_guess"] == 1.0


class TestCheckpointResume:
    def test_round_trip_bit_exact(self, tiny_dataset, tmp_path):
        cfg = _tiny_cfg(total_iters=5)
        out = train(cfg, tiny_dataset, tmp_path / "run")
        state = load_run_state(out / "final.cycd")
        save_run_state(state, tmp_path / "again.cycd")
        assert (out / "final.cycd").read_bytes() \
            == (tmp_path / "again.cycd").read_bytes()

    def test_resume_reproduces_log_tail(self, tiny_dataset, tmp_path):
        cfg = _tiny_cfg(total_iters=10, checkpoint_every=4,
                        defense="noise+guess")
        full = train(cfg, tiny_dataset, tmp_path / "full")
        resumed = train(cfg, tiny_dataset, tmp_path / "resumed",
                        resume_from=full / "ckpt_4.cycd")
        full_rows = (full / "log.csv").read_text().splitlines()
        res_rows = (resumed / "log.csv").read_text().splitlines()
        assert res_rows[0] == full_rows[0]
        assert res_rows[1:] == full_rows[5:]
        assert (resumed / "final.cycd").read_bytes() \
            == (full / "final.cycd").read_bytes()

    def test_truncated_checkpoint_reports_corruption(self, tiny_dataset,
                                                     tmp_path):
        cfg = _tiny_cfg(total_iters=2)
        out = train(cfg, tiny_dataset, tmp_path / "run")
        raw = (out / "final.cycd").read_bytes()
        (tmp_path / "trunc.cycd").write_bytes(raw[:100])
        with pytest.raises(CorruptCheckpointError):
            load_run_state(tmp_path / "trunc.cycd")

    def test_resume_under_different_config_rejected(self, tiny_dataset,
                                                    tmp_path):
        cfg = _tiny_cfg(total_iters=3)
        out = train(cfg, tiny_dataset, tmp_path / "run")
        other = _tiny_cfg(total_iters=3, seed=9)
        with pytest.raises(ValueError, match="different config"):
            train(other, tiny_dataset, tmp_path / "other",
                  resume_from=out / "final.cycd")


class TestDivergenceHandling:
    def test_non_finite_loss_checkpoints_and_aborts(self, tiny_dataset,
                                                    tmp_path):
        cfg = _tiny_cfg(total_iters=4)
        out = train(cfg, tiny_dataset, tmp_path / "run")
        state = load_run_state(out / "final.cycd")
        state.iteration = 0
        with torch.no_grad():
            next(state.nets["g_ab"].parameters())[0, 0, 0, 0] = float("nan")
        save_run_state(state, tmp_path / "poisoned.cycd")
        with pytest.raises(TrainingDiverged, match="non-finite"):
            train(cfg, tiny_dataset, tmp_path / "resume",
                  resume_from=tmp_path / "poisoned.cycd")
        assert (tmp_path / "resume" / "abort_0.cycd").exists()


class TestConfigValidation:
    def test_sigma_range(self):
        with pytest.raises(ValueError, match="sigma"):
            TrainConfig(defense="noise", sigma=1.5, total_iters=10)

    def test_unknown_defense(self):
        with pytest.raises(ValueError, match="defense"):
            TrainConfig(defense="prayer", total_iters=10)

    def test_decay_start_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(total_iters=10, decay_start_iter=11)

    def test_defense_defaults_installed(self):
        cfg = TrainConfig(defense="guess", total_iters=10)
        assert (cfg.lambda_guess, cfg.lambda_a, cfg.lambda_b) == (1.0, 1.0, 2.0)
        cfg = TrainConfig(defense="noise", total_iters=10)
        assert (cfg.sigma, cfg.lambda_a, cfg.lambda_b) == (0.06, 5.0, 3.0)
