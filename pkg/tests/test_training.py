import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmm import numerics as nm
from cmm.model import CmmModel, ModelConfig
from cmm.retrieval import MemorySet
from cmm.training import (
    CheckpointError,
    ConfigError,
    OptimizerState,
    RunConfig,
    TrainExample,
    TrainingError,
    adam_step,
    load_checkpoint,
    load_train_state,
    lr,
    make_batches,
    restore_model,
    save_checkpoint,
    save_train_state,
    train,
)

from conftest import TINY_CFG


class TestRunConfig:
    def test_defaults_match_reference_settings(self):
        run = RunConfig()
        assert run.retrieval.alpha == 0.7
        assert run.retrieval.m_size == 5
        assert run.loss.lam == 1.0
        assert run.loss.tau == 0.1
        assert run.loss.epsilon == 0.1
        assert run.model.label_smoothing == 0.1

    def test_json_round_trip(self):
        run = RunConfig()
        run.retrieval.strategy = "mmr"
        run.optim.max_steps = 77
        again = RunConfig.from_json(run.to_json())
        assert again.to_dict() == run.to_dict()

    def test_unknown_fields_enumerated(self):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict({"model": {"d_modell": 1, "bogus": 2}, "nonsense": 3})
        msg = str(err.value)
        assert "model.bogus" in msg and "model.d_modell" in msg and "nonsense" in msg

    def test_set_by_path(self):
        run = RunConfig()
        run.set_by_path("loss.lam", "0")
        run.set_by_path("model.hga", "off")
        run.set_by_path("retrieval.strategy", "greedy")
        assert run.loss.lam == 0.0
        assert run.model.hga is False
        assert run.retrieval.strategy == "greedy"

    def test_set_by_path_unknown(self):
        with pytest.raises(ConfigError):
            RunConfig().set_by_path("loss.gamma", "1")

    def test_set_by_path_bad_bool(self):
        with pytest.raises(ConfigError):
            RunConfig().set_by_path("model.hga", "maybe")


def example(pair_id, src_len, tgt_len, mem_lens=()):
    mems = MemorySet(
        pair_ids=list(range(100, 100 + len(mem_lens))),
        tgts=[tuple(range(5, 5 + n)) for n in mem_lens],
        sims=[0.5] * len(mem_lens),
        strategy="greedy",
    )
    return TrainExample(
        pair_id=pair_id,
        src=tuple(range(5, 5 + src_len)),
        tgt=tuple(range(5, 5 + tgt_len)),
        memories=mems,
    )


class TestMakeBatches:
    def test_budget_splits(self):
        a = example(0, 2, 1)  # (2+1) + (1+2) = 6 tokens with specials
        b = example(1, 1, 1)  # (1+1) + (1+2) = 5
        assert a.token_cost == 6 and b.token_cost == 5
        assert len(make_batches([a, b], batch_max_tokens=10, seed=0)) == 2
        assert len(make_batches([a, b], batch_max_tokens=11, seed=0)) == 1

    def test_same_seed_same_batches(self):
        exs = [example(i, 2 + i % 3, 2) for i in range(12)]
        a = make_batches(exs, 30, seed=5)
        b = make_batches(exs, 30, seed=5)
        assert [[e.pair_id for e in batch] for batch in a] == [[e.pair_id for e in batch] for batch in b]

    def test_oversized_example_names_id(self):
        with pytest.raises(TrainingError, match="example 7"):
            make_batches([example(7, 50, 50)], batch_max_tokens=10, seed=0)

    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=20), st.integers(0, 5))
    @settings(max_examples=60)
    def test_budget_never_exceeded(self, sizes, seed):
        exs = [example(i, s, t, mem_lens=(2,)) for i, (s, t) in enumerate(sizes)]
        budget = max(e.token_cost for e in exs) + 4
        for batch in make_batches(exs, budget, seed=seed):
            assert sum(e.token_cost for e in batch) <= budget
        flat = [e.pair_id for b in make_batches(exs, budget, seed=seed) for e in b]
        assert sorted(flat) == list(range(len(exs)))


class TestLrSchedule:
    def test_peak_value(self):
        assert lr(400, d_model=64, warmup=400) == pytest.approx(0.00625)

    def test_first_step(self):
        assert lr(1, d_model=64, warmup=400) == pytest.approx(1.5625e-5)

    def test_peaks_exactly_at_warmup(self):
        values = [lr(s, 64, 400) for s in range(1, 1200)]
        assert values.index(max(values)) == 399
        assert all(values[i] <= values[i + 1] for i in range(398))
        assert all(values[i] >= values[i + 1] for i in range(399, len(values) - 1))

    def test_step_zero_rejected(self):
        with pytest.raises(TrainingError):
            lr(0, 64, 400)


class TestAdam:
    def test_scalar_hand_step(self):
        p = nm.Parameter("p", np.array(1.0))
        p.grad[...] = 1.0
        state = OptimizerState.init([p])
        adam_step([p], state, lr_value=0.1)
        assert p.data == pytest.approx(1.0 - 0.1 * 1.0 / (1.0 + 1e-9), abs=1e-12)
        assert p.grad == 0.0

    def test_zero_grad_keeps_parameters(self):
        p = nm.Parameter("p", np.array([1.0, 2.0]))
        state = OptimizerState.init([p])
        adam_step([p], state, lr_value=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(9)
            p = nm.Parameter("p", rng.normal(size=(4, 4)))
            state = OptimizerState.init([p])
            for step in range(10):
                loss = nm.sum_(p.tensor * p.tensor)
                nm.backward(loss)
                adam_step([p], state, lr_value=lr(step + 1, 16, 4))
            return p.data.tobytes()

        assert run() == run()


@pytest.fixture
def tiny_trained(tmp_path):
    cfg = ModelConfig(**TINY_CFG)
    model = CmmModel(cfg, seed=1)
    run = RunConfig()
    run.model = cfg
    return model, run, tmp_path


class TestCheckpoint:
    def test_round_trip_f32(self, tiny_trained):
        model, run, tmp = tiny_trained
        path = tmp / "ckpt.bin"
        save_checkpoint(path, model, run)
        loaded_run, tensors = load_checkpoint(path)
        assert loaded_run.to_dict() == run.to_dict()
        for p in model.parameters():
            np.testing.assert_array_equal(tensors[p.name], p.data.astype(np.float32).astype(np.float64))
        restored = restore_model(loaded_run, tensors)
        assert set(restored.params) == set(model.params)

    def test_version_mismatch_refused(self, tiny_trained):
        model, run, tmp = tiny_trained
        path = tmp / "ckpt.bin"
        save_checkpoint(path, model, run)
        raw = path.read_bytes().replace(b"cmm-ckpt v1", b"cmm-ckpt v2")
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_refused(self, tiny_trained):
        model, run, tmp = tiny_trained
        path = tmp / "ckpt.bin"
        save_checkpoint(path, model, run)
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_parameter_named(self, tiny_trained):
        model, run, tmp = tiny_trained
        path = tmp / "ckpt.bin"
        save_checkpoint(path, model, run)
        loaded_run, tensors = load_checkpoint(path)
        del tensors["copy.w"]
        with pytest.raises(CheckpointError, match="copy.w"):
            restore_model(loaded_run, tensors)

    def test_config_hash_guard(self, tiny_trained):
        model, run, tmp = tiny_trained
        path = tmp / "ckpt.bin"
        save_checkpoint(path, model, run)
        raw = bytearray(path.read_bytes())
        idx = raw.find(b'"seed"')
        raw[idx + 8] ^= 0x01  # corrupt a config byte without resizing
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def write_micro_corpus(tmp_path):
    from cmm.synthgen import SynthSpec, generate, write_corpus

    spec = SynthSpec(
        n_templates=2,
        slots_per_template=2,
        slot_lexicon_size=5,
        cluster_size=2,
        n_train=16,
        n_dev=4,
        n_test=4,
        seed=0,
    )
    out = tmp_path / "corpus"
    write_corpus(generate(spec), out)
    return out


def micro_run(tmp_path, **overrides):
    corpus = write_micro_corpus(tmp_path)
    run = RunConfig.from_dict(
        {
            "model": {
                "d_model": 16,
                "n_heads": 2,
                "d_ffn": 32,
                "n_layers_src": 1,
                "n_layers_mem": 1,
                "n_layers_dec": 1,
                "max_len": 64,
            },
            "retrieval": {"m_size": 2, "k": 8},
            "optim": {"warmup_steps": 10, "max_steps": 8},
            "batch_max_tokens": 400,
            "seed": 1,
            "paths": {"corpus_dir": str(corpus), "out_dir": str(tmp_path / "run")},
        }
    )
    for dotted, value in overrides.items():
        run.set_by_path(dotted, value)
    return run


class TestTrainLoop:
    def test_metrics_log_joint_identity(self, tmp_path):
        run = micro_run(tmp_path)
        result = train(run)
        lines = [json.loads(l) for l in result.metrics_path.read_text().splitlines()]
        assert [l["step"] for l in lines] == list(range(1, 9))
        for l in lines:
            assert l["joint"] == l["ce"] + run.loss.lam * l["mtcl"]
            assert set(l) == {"step", "ce", "mtcl", "joint", "lr", "tokens_per_s"}

    def test_lambda_zero_logs_mtcl_but_joint_is_ce(self, tmp_path):
        run = micro_run(tmp_path, **{"loss.lam": "0"})
        result = train(run)
        lines = [json.loads(l) for l in result.metrics_path.read_text().splitlines()]
        assert all(l["joint"] == l["ce"] for l in lines)
        assert any(l["mtcl"] > 0 for l in lines)

    def test_full_run_determinism(self, tmp_path):
        run1 = micro_run(tmp_path / "a")
        run2 = micro_run(tmp_path / "b")
        r1, r2 = train(run1), train(run2)
        assert r1.final_ckpt.read_bytes() == r2.final_ckpt.read_bytes()
        m1 = [json.loads(l) for l in r1.metrics_path.read_text().splitlines()]
        m2 = [json.loads(l) for l in r2.metrics_path.read_text().splitlines()]
        for a, b in zip(m1, m2):
            a.pop("tokens_per_s")
            b.pop("tokens_per_s")
        assert m1 == m2

    def test_resume_bit_identical(self, tmp_path):
        # uninterrupted 8 steps
        full = train(micro_run(tmp_path / "full"))
        # interrupted at 4, resumed to 8
        short = micro_run(tmp_path / "short", **{"optim.max_steps": "4"})
        train(short)
        resumed_cfg = micro_run(tmp_path / "short2")
        resumed_cfg.paths.out_dir = short.paths.out_dir
        resumed_cfg.paths.corpus_dir = short.paths.corpus_dir
        result = train(resumed_cfg, resume_from=str(tmp_path / "short" / "run" / "trainstate.bin"))
        full_state = (tmp_path / "full" / "run" / "trainstate.bin").read_bytes()
        resumed_state = (tmp_path / "short" / "run" / "trainstate.bin").read_bytes()
        assert full_state == resumed_state

    def test_non_finite_loss_aborts_with_snapshot(self, tmp_path, monkeypatch):
        run = micro_run(tmp_path)
        import cmm.training as tr

        def poisoned(model, ex, run_):
            return nm.Tensor(float("inf")), 1, nm.Tensor(0.0)

        monkeypatch.setattr(tr, "example_losses", poisoned)
        with pytest.raises(TrainingError, match="non-finite"):
            tr.train(run)
        snaps = list((tmp_path / "run").glob("diverged.step*.json"))
        assert len(snaps) == 1
        assert "pair_ids" in json.loads(snaps[0].read_text())

    def test_trainstate_round_trip(self, tmp_path):
        run = micro_run(tmp_path)
        result = train(run)
        model2 = CmmModel(run.model, seed=999)  # different init, then overwritten
        opt2 = OptimizerState.init(model2.parameters())
        step = load_train_state(tmp_path / "run" / "trainstate.bin", model2, opt2, run)
        assert step == result.steps
        for p, q in zip(result.model.parameters(), model2.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_vocab_size_mismatch_rejected(self, tmp_path):
        run = micro_run(tmp_path)
        run.model.vocab_size = 9999
        with pytest.raises(ConfigError, match="vocab"):
            train(run)
