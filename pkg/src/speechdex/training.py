"""Optimization loop: Adam with linear-warmup/cosine-decay, mixed-task
batches (speech-transcript plus translation pairs), JSONL telemetry, and
resumable checkpoints.

Every source of randomness is derived functionally from (seed, step), so
a run is a deterministic function of (config, data, seed) and resuming
from a checkpoint reproduces the exact schedule and loss curve.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

import speechdex.tensor as T
from speechdex import losses
from speechdex.data import ManifestRecord, read_frame_file
from speechdex.errors import ConfigError, DataError, TrainingAborted
from speechdex.kmeans import Codebook, FrameSequence, quantize
from speechdex.model import (
    EncoderConfig,
    EncoderParams,
    encode_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from speechdex.vocab import TextVocab, TokenSequence, build_speech_input, build_text_input

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# sub-stream tags for per-step seeding
_TAG_S2T, _TAG_MT, _TAG_ORDER, _TAG_DROP_A, _TAG_DROP_B = range(5)


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 2500
    total_steps: int = 100_000
    batch_size: int = 64
    dropout: float = 0.1
    spreadout_weight: float = 1.0
    mt_fraction: float = 0.0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    micro_batch: int = 0  # 0 = encode the whole batch at once

    def validate(self) -> None:
        if not 0.0 <= self.mt_fraction <= 1.0:
            raise ConfigError(f"mt_fraction must be in [0, 1], got {self.mt_fraction}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to peak over warmup_steps, then half-cosine to zero."""
    if step < 0 or step > cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    frac = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: EncoderParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, params: EncoderParams, arrays: dict[str, np.ndarray],
                    step: int) -> "OptimizerState":
        state = cls(params)
        for k in state.m:
            state.m[k] = arrays[f"opt.m.{k}"]
            state.v[k] = arrays[f"opt.v.{k}"]
        state.step = step
        return state


def adam_step(params: EncoderParams, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update from the grads accumulated on params."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name} at optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - ADAM_BETA1) * (g - m)
        v += (1.0 - ADAM_BETA2) * (g * g - v)
        mhat = m / c1
        vhat = v / c2
        tensor.data = tensor.data - (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(tensor.data.dtype)


# ---------------------------------------------------------------------------
# batch composition
# ---------------------------------------------------------------------------

@dataclass
class PairExample:
    a: TokenSequence  # speech input, or source-language text for mt
    b: TokenSequence  # transcript, or target-language text
    task: str         # "s2t" | "mt"


@dataclass
class PairBatch:
    pairs: list[PairExample]
    task_mix: dict = field(default_factory=dict)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _epoch_indices(pool_size: int, seed: int, tag: int, start: int, count: int) -> list[int]:
    """Positions [start, start+count) of an infinite stream made of
    per-epoch permutations; within an epoch every item appears once."""
    out = []
    perm_cache: dict[int, np.ndarray] = {}
    for i in range(start, start + count):
        epoch, pos = divmod(i, pool_size)
        if epoch not in perm_cache:
            rng = np.random.default_rng(np.random.SeedSequence((seed, tag, epoch)))
            perm_cache[epoch] = rng.permutation(pool_size)
        out.append(int(perm_cache[epoch][pos]))
    return out


def compose_batch(s2t_pool: list[PairExample], mt_pool: list[PairExample],
                  cfg: TrainConfig, step: int) -> PairBatch:
    """Deterministic mixed batch for one step: round-half-up(mt_fraction*N)
    translation pairs, the rest speech-transcript, order shuffled."""
    n = cfg.batch_size
    n_mt = round_half_up(cfg.mt_fraction * n)
    n_s2t = n - n_mt
    if cfg.mt_fraction > 0.0 and not mt_pool:
        raise DataError("mt_fraction > 0 but the translation pool is empty")
    if cfg.mt_fraction < 1.0 and not s2t_pool:
        raise DataError("mt_fraction < 1 but the speech-transcript pool is empty")

    picks: list[PairExample] = []
    if n_s2t:
        idx = _epoch_indices(len(s2t_pool), cfg.seed, _TAG_S2T, step * n_s2t, n_s2t)
        picks.extend(s2t_pool[i] for i in idx)
    if n_mt:
        idx = _epoch_indices(len(mt_pool), cfg.seed, _TAG_MT, step * n_mt, n_mt)
        picks.extend(mt_pool[i] for i in idx)
    order = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _TAG_ORDER, step))).permutation(len(picks))
    pairs = [picks[i] for i in order]
    return PairBatch(pairs, task_mix={"s2t": n_s2t, "mt": n_mt})


# ---------------------------------------------------------------------------
# manifest -> token pair pools
# ---------------------------------------------------------------------------

def prepare_s2t_pairs(records: list[ManifestRecord], v: TextVocab,
                      cb: Codebook) -> list[PairExample]:
    pairs = []
    for rec in records:
        if rec.task != "s2t":
            continue
        frames, _ = read_frame_file(rec.frames_path)
        tokens = quantize(FrameSequence(frames, rec.id, rec.language), cb)
        speech = build_speech_input(rec.language, tokens, v, a=cb.k, source_id=rec.id)
        text = build_text_input(rec.language, rec.transcript, v, source_id=rec.id)
        pairs.append(PairExample(speech, text, "s2t"))
    return pairs


def prepare_mt_pairs(records: list[ManifestRecord], v: TextVocab) -> list[PairExample]:
    pairs = []
    for rec in records:
        if rec.task != "mt":
            continue
        src = build_text_input(rec.language, rec.transcript, v, source_id=rec.id)
        tgt = build_text_input(rec.translation["target_lang"], rec.translation["text"],
                               v, source_id=rec.id)
        pairs.append(PairExample(src, tgt, "mt"))
    return pairs


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _encode_side(params, enc_cfg, seqs, rng, tape, micro_batch):
    if not micro_batch or micro_batch >= len(seqs):
        return encode_batch(params, enc_cfg, seqs, train_mode=True, rng=rng, tape=tape)
    chunks = []
    for lo in range(0, len(seqs), micro_batch):
        chunks.append(encode_batch(params, enc_cfg, seqs[lo:lo + micro_batch],
                                   train_mode=True, rng=rng, tape=tape))
    return T.concat_rows(tape, chunks)


def train_step(params: EncoderParams, enc_cfg: EncoderConfig, cfg: TrainConfig,
               state: OptimizerState, batch: PairBatch, step: int) -> dict:
    """One optimization step over a composed batch; returns the log entry.

    The in-batch loss needs the full similarity matrix, so micro-batching
    (cfg.micro_batch) chunks only the encoding; the loss joins all chunks.
    """
    rng_a = np.random.default_rng(np.random.SeedSequence((cfg.seed, _TAG_DROP_A, step)))
    rng_b = np.random.default_rng(np.random.SeedSequence((cfg.seed, _TAG_DROP_B, step)))
    tape = T.Tape()
    params.zero_grads()
    xa = _encode_side(params, enc_cfg, [p.a for p in batch.pairs], rng_a, tape, cfg.micro_batch)
    xb = _encode_side(params, enc_cfg, [p.b for p in batch.pairs], rng_b, tape, cfg.micro_batch)
    parts = losses.total_loss_with_parts(tape, xa, xb, cfg.spreadout_weight)
    loss_val = float(parts.total.data)
    if not np.isfinite(loss_val):
        raise TrainingAborted(f"non-finite loss {loss_val} at step {step}")
    tape.backward(parts.total)
    lr = lr_at(step, cfg)
    adam_step(params, state, lr)
    return {
        "step": step,
        "lr": lr,
        "loss": loss_val,
        "contrastive": parts.contrastive,
        "spreadout": parts.spreadout,
        "task_mix": batch.task_mix,
    }


@dataclass
class TrainResult:
    params: EncoderParams
    state: OptimizerState
    final_checkpoint: str
    metrics_path: str
    history: list


def _ckpt_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"step_{step:06d}.ckpt")


def train(enc_cfg: EncoderConfig, cfg: TrainConfig,
          s2t_pool: list[PairExample], mt_pool: list[PairExample],
          out_dir: str, eval_fn=None,
          resume_from: str | None = None) -> TrainResult:
    """Run the optimization loop, writing metrics.jsonl and checkpoints.

    resume_from restarts from a saved checkpoint's params, Adam moments and
    step counter; the remaining steps reproduce an uninterrupted run.
    """
    cfg.validate()
    if enc_cfg.dropout != cfg.dropout:
        raise ConfigError(
            f"encoder dropout {enc_cfg.dropout} != train config dropout {cfg.dropout}")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    if resume_from is not None:
        loaded_cfg, params, start_step, seed, extra, _ = load_checkpoint(
            resume_from, expected_cfg=enc_cfg)
        if seed != cfg.seed:
            raise ConfigError(f"checkpoint seed {seed} != train config seed {cfg.seed}")
        state = OptimizerState.from_arrays(params, extra, start_step)
        mode = "a"
    else:
        params = init_params(enc_cfg, cfg.seed)
        state = OptimizerState(params)
        start_step = 0
        mode = "w"

    history = []
    meta = {"train_config": cfg.to_dict()}
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        for step in range(start_step, cfg.total_steps):
            batch = compose_batch(s2t_pool, mt_pool, cfg, step)
            entry = train_step(params, enc_cfg, cfg, state, batch, step)
            metrics.write(json.dumps(entry, sort_keys=True) + "\n")
            history.append(entry)
            done = step + 1
            if eval_fn is not None and cfg.eval_every and done % cfg.eval_every == 0:
                eval_entry = {"step": done, "eval": eval_fn(params, done)}
                metrics.write(json.dumps(eval_entry, sort_keys=True) + "\n")
                history.append(eval_entry)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 \
                    and done < cfg.total_steps:
                save_checkpoint(_ckpt_path(out_dir, done), enc_cfg, params,
                                step=done, seed=cfg.seed,
                                extra_arrays=state.named_arrays(), extra_meta=meta)

    final = _ckpt_path(out_dir, cfg.total_steps)
    save_checkpoint(final, enc_cfg, params, step=cfg.total_steps, seed=cfg.seed,
                    extra_arrays=state.named_arrays(), extra_meta=meta)
    return TrainResult(params, state, final, metrics_path, history)
