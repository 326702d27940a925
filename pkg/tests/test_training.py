import json
import os

import numpy as np
import pytest

import speechdex.tensor as T
from corpus_utils import small_encoder_cfg, tiny_corpus
from speechdex.errors import ConfigError, DataError, TrainingAborted
from speechdex.model import EncoderParams, init_params, load_checkpoint
from speechdex.training import (
    OptimizerState,
    PairBatch,
    TrainConfig,
    adam_step,
    compose_batch,
    lr_at,
    round_half_up,
    train,
    train_step,
)

PAPER_SCHEDULE = dict(peak_lr=1e-3, warmup_steps=2500, total_steps=100_000)


def short_cfg(**kw):
    base = dict(peak_lr=3e-3, warmup_steps=10, total_steps=40, batch_size=8,
                dropout=0.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_ramp_starts_at_zero():
    assert lr_at(0, TrainConfig(**PAPER_SCHEDULE)) == 0.0


def test_lr_peak_at_warmup_end():
    assert lr_at(2500, TrainConfig(**PAPER_SCHEDULE)) == pytest.approx(1e-3, rel=1e-12)


def test_lr_zero_at_total_steps():
    assert lr_at(100_000, TrainConfig(**PAPER_SCHEDULE)) == pytest.approx(0.0, abs=1e-18)


def test_lr_continuous_at_warmup_and_nonnegative():
    cfg = TrainConfig(**PAPER_SCHEDULE)
    just_before = lr_at(2499, cfg)
    at = lr_at(2500, cfg)
    assert abs(at - just_before) < 2 * cfg.peak_lr / cfg.warmup_steps
    for step in range(0, 100_001, 997):
        assert lr_at(step, cfg) >= 0.0


def test_lr_rejects_out_of_range_step():
    with pytest.raises(ConfigError):
        lr_at(-1, short_cfg())
    with pytest.raises(ConfigError):
        lr_at(41, short_cfg())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def one_param(value):
    return EncoderParams({"w": T.Tensor(np.array(value, dtype=np.float32),
                                        requires_grad=True)})


def test_adam_zero_grads_leave_params_unchanged():
    params = one_param([1.0, -2.0])
    state = OptimizerState(params)
    params["w"].grad = np.zeros(2, dtype=np.float32)
    adam_step(params, state, lr=0.1)
    assert np.array_equal(params["w"].data, np.array([1.0, -2.0], dtype=np.float32))


def test_adam_first_step_hand_computation():
    params = one_param([0.0])
    state = OptimizerState(params)
    params["w"].grad = np.ones(1, dtype=np.float32)
    adam_step(params, state, lr=0.1)
    # bias-corrected m_hat = v_hat = 1 -> step of -lr/(1+eps)
    assert params["w"].data[0] == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1


def test_adam_deterministic_trajectory():
    runs = []
    for _ in range(2):
        params = one_param([0.5, 0.5])
        state = OptimizerState(params)
        rng = np.random.default_rng(7)
        for _ in range(5):
            params["w"].grad = rng.normal(size=2).astype(np.float32)
            adam_step(params, state, lr=0.01)
        runs.append(params["w"].data.copy())
    assert np.array_equal(runs[0], runs[1])


def test_adam_aborts_on_non_finite_grad():
    params = one_param([0.0])
    state = OptimizerState(params)
    params["w"].grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(TrainingAborted, match="w"):
        adam_step(params, state, lr=0.1)


# ---------------------------------------------------------------------------
# batch composition
# ---------------------------------------------------------------------------

def fake_pool(n, task):
    # compose_batch only reads list length and items; sentinels suffice
    return [f"{task}-{i}" for i in range(n)]


def test_round_half_up():
    assert round_half_up(2.0) == 2
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2


def test_compose_quarter_fraction_counts():
    cfg = short_cfg(batch_size=8, mt_fraction=0.25)
    batch = compose_batch(fake_pool(30, "s"), fake_pool(30, "m"), cfg, step=0)
    assert batch.task_mix == {"s2t": 6, "mt": 2}
    assert len(batch.pairs) == 8
    assert sum(1 for p in batch.pairs if p.startswith("m")) == 2


def test_compose_zero_fraction_all_s2t():
    cfg = short_cfg(batch_size=8, mt_fraction=0.0)
    batch = compose_batch(fake_pool(30, "s"), [], cfg, step=3)
    assert batch.task_mix == {"s2t": 8, "mt": 0}
    assert all(p.startswith("s") for p in batch.pairs)


def test_compose_epoch_without_replacement():
    cfg = short_cfg(batch_size=8, mt_fraction=0.0)
    pool = fake_pool(32, "s")  # epoch = 4 steps
    for epoch in range(3):
        seen = []
        for step in range(epoch * 4, epoch * 4 + 4):
            seen += compose_batch(pool, [], cfg, step).pairs
        assert sorted(seen) == sorted(pool)  # each item exactly once per epoch


def test_compose_requires_nonempty_pools():
    cfg = short_cfg(batch_size=8, mt_fraction=0.25)
    with pytest.raises(DataError, match="translation"):
        compose_batch(fake_pool(8, "s"), [], cfg, step=0)
    with pytest.raises(DataError, match="speech"):
        compose_batch([], fake_pool(8, "m"), short_cfg(batch_size=8, mt_fraction=0.5), 0)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="mt_fraction"):
        short_cfg(mt_fraction=1.5).validate()
    with pytest.raises(ConfigError, match="warmup"):
        short_cfg(warmup_steps=100, total_steps=40).validate()
    with pytest.raises(ConfigError, match="batch_size"):
        short_cfg(batch_size=1).validate()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_single_pair_batch_with_zero_spreadout_is_noop(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(enc, seed=0)
    before = {k: t.data.copy() for k, t in params.items()}
    cfg = short_cfg(spreadout_weight=0.0)
    state = OptimizerState(params)
    batch = PairBatch([c["pools"]["s2t"][0]], {"s2t": 1, "mt": 0})
    entry = train_step(params, enc, cfg, state, batch, step=5)
    assert entry["loss"] == 0.0
    for k, t in params.items():
        assert np.array_equal(before[k], t.data), k


def test_training_reduces_loss(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    cfg = short_cfg(total_steps=60, warmup_steps=10, batch_size=8)
    result = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "run"))
    first = np.mean([h["loss"] for h in result.history[:5]])
    last = np.mean([h["loss"] for h in result.history[-5:]])
    assert last < first * 0.7
    assert os.path.exists(result.final_checkpoint)


def test_two_runs_identical_metrics(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"], dropout=0.1)
    cfg = short_cfg(total_steps=12, warmup_steps=4, dropout=0.1)
    r1 = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "a"))
    r2 = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "b"))
    assert open(r1.metrics_path).read() == open(r2.metrics_path).read()
    assert open(r1.final_checkpoint, "rb").read() == open(r2.final_checkpoint, "rb").read()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    cfg = short_cfg(total_steps=20, warmup_steps=5, checkpoint_every=10)
    full = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "full"))
    mid_ckpt = os.path.join(str(tmp_path / "full"), "step_000010.ckpt")
    assert os.path.exists(mid_ckpt)
    resumed = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "resumed"),
                    resume_from=mid_ckpt)
    full_lines = open(full.metrics_path).read().splitlines()
    resumed_lines = open(resumed.metrics_path).read().splitlines()
    assert resumed_lines == full_lines[10:]
    # schedule continuity: the first resumed entry carries lr_at(10)
    entry = json.loads(resumed_lines[0])
    assert entry["step"] == 10
    assert entry["lr"] == lr_at(10, cfg)
    assert open(full.final_checkpoint, "rb").read() \
        == open(resumed.final_checkpoint, "rb").read()


def test_micro_batch_matches_full_batch_gradients(tmp_path):
    # the in-batch softmax needs the full similarity matrix, so chunking
    # applies to encoding only; the joint loss must reproduce the full-batch
    # gradients up to float32 accumulation noise
    from speechdex import losses
    from speechdex.model import encode_batch

    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    batch = c["pools"]["s2t"][:6]
    results = {}
    for micro in (0, 2):
        params = init_params(enc, seed=4)
        tape = T.Tape()
        sides = []
        for seqs in ([p.a for p in batch], [p.b for p in batch]):
            if micro == 0:
                sides.append(encode_batch(params, enc, seqs, tape=tape))
            else:
                chunks = [encode_batch(params, enc, seqs[lo:lo + micro], tape=tape)
                          for lo in range(0, len(seqs), micro)]
                sides.append(T.concat_rows(tape, chunks))
        loss = losses.total_loss(tape, *sides)
        tape.backward(loss)
        results[micro] = (float(loss.data),
                          {k: t.grad_or_zeros().copy() for k, t in params.items()})
    assert results[0][0] == pytest.approx(results[2][0], rel=1e-5)
    gmax = max(np.abs(g).max() for g in results[0][1].values())
    for k in results[0][1]:
        a, b = results[0][1][k], results[2][1][k]
        assert np.abs(a - b).max() <= 1e-5 * gmax + 1e-4 * np.abs(a).max(), k


def test_non_finite_loss_aborts_training(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(enc, seed=0)
    params["proj.w"].data = params["proj.w"].data * np.float32(np.inf)
    state = OptimizerState(params)
    batch = PairBatch(c["pools"]["s2t"][:4], {"s2t": 4, "mt": 0})
    with pytest.raises(TrainingAborted, match="loss"):
        train_step(params, enc, short_cfg(), state, batch, step=0)


def test_mixed_task_training_runs(tmp_path):
    c = tiny_corpus(tmp_path, num_languages=3, mt_pairs=[("syn0", "syn2")],
                    mt_train_pairs=16)
    enc = small_encoder_cfg(c["v"], c["cb"])
    cfg = short_cfg(total_steps=6, warmup_steps=2, mt_fraction=0.25)
    result = train(enc, cfg, c["pools"]["s2t"], c["pools"]["mt"], str(tmp_path / "mt"))
    assert all(h["task_mix"] == {"s2t": 6, "mt": 2} for h in result.history)


def test_train_rejects_dropout_mismatch(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"], dropout=0.2)
    with pytest.raises(ConfigError, match="dropout"):
        train(enc, short_cfg(dropout=0.0), c["pools"]["s2t"], [], str(tmp_path / "x"))


def test_checkpoint_carries_optimizer_state(tmp_path):
    c = tiny_corpus(tmp_path)
    enc = small_encoder_cfg(c["v"], c["cb"])
    cfg = short_cfg(total_steps=4, warmup_steps=2)
    result = train(enc, cfg, c["pools"]["s2t"], [], str(tmp_path / "run"))
    _, _, step, seed, extra, meta = load_checkpoint(result.final_checkpoint)
    assert step == 4 and seed == 0
    assert any(k.startswith("opt.m.") for k in extra)
    assert meta["train_config"]["total_steps"] == 4
