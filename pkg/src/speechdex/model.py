"""The shared encoder: one transformer over the unified text+audio ids.

Speech and text sequences flow through the same parameters; the only
modality information the model sees is the prefix tokens and the id range
of the payload. encode() embeds the ids, runs pre-norm residual blocks,
pools along the sequence, and projects to the retrieval space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

import speechdex.tensor as T
from speechdex.errors import ConfigError, IntegrityError, ShapeError, VocabularyError
from speechdex.vocab import Modality, TokenSequence

log = logging.getLogger(__name__)

_CHECKPOINT_FORMAT = "speechdex-checkpoint-v1"


@dataclass
class EncoderConfig:
    t: int
    a: int
    m: int = 128
    layers: int = 4
    heads: int = 4
    ffn_width: int = 512
    p: int = 128
    dropout: float = 0.1
    attention_mode: str = "causal"  # or "bidirectional"
    max_len: int = 256
    pooling: str = "mean"  # or "last"

    def __post_init__(self):
        if self.m % self.heads != 0:
            raise ConfigError(f"m={self.m} not divisible by heads={self.heads}")
        if self.p < 2:
            raise ConfigError(f"projection dim must be >= 2, got {self.p}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def vocab_size(self) -> int:
        return self.t + self.a

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class EmbeddingVec:
    """A retrieval-space embedding plus the tags of the sequence it encodes."""

    values: np.ndarray  # [p]
    modality: Modality
    language: str
    source_id: str = ""


class EncoderParams:
    """Named parameter tensors in a stable order."""

    def __init__(self, tensors: dict[str, T.Tensor]):
        self._tensors = tensors

    def __getitem__(self, name: str) -> T.Tensor:
        return self._tensors[name]

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def num_params(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def _param_names(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in allocation order."""
    m, ffn = cfg.m, cfg.ffn_width
    out = [
        ("embed.tok", (cfg.vocab_size, m), "embedding"),
        ("embed.pos", (cfg.max_len, m), "embedding"),
    ]
    for i in range(cfg.layers):
        pre = f"layer{i}"
        out += [
            (f"{pre}.ln1.gain", (m,), "ones"),
            (f"{pre}.ln1.bias", (m,), "zeros"),
            (f"{pre}.attn.wq", (m, m), "linear"),
            (f"{pre}.attn.bq", (m,), "zeros"),
            (f"{pre}.attn.wk", (m, m), "linear"),
            (f"{pre}.attn.bk", (m,), "zeros"),
            (f"{pre}.attn.wv", (m, m), "linear"),
            (f"{pre}.attn.bv", (m,), "zeros"),
            (f"{pre}.attn.wo", (m, m), "linear"),
            (f"{pre}.attn.bo", (m,), "zeros"),
            (f"{pre}.ln2.gain", (m,), "ones"),
            (f"{pre}.ln2.bias", (m,), "zeros"),
            (f"{pre}.ffn.w1", (m, ffn), "linear"),
            (f"{pre}.ffn.b1", (ffn,), "zeros"),
            (f"{pre}.ffn.w2", (ffn, m), "linear"),
            (f"{pre}.ffn.b2", (m,), "zeros"),
        ]
    out += [
        ("final_norm.gain", (m,), "ones"),
        ("final_norm.bias", (m,), "zeros"),
        ("proj.w", (m, cfg.p), "linear"),
        ("proj.b", (cfg.p,), "zeros"),
    ]
    return out


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Fresh random parameters: std 0.02 embeddings, 1/sqrt(fan_in) linears."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, T.Tensor] = {}
    for name, shape, kind in _param_names(cfg):
        if kind == "embedding":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif kind == "linear":
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = T.Tensor(arr.astype(dtype), requires_grad=True)
    return EncoderParams(tensors)


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count matching the allocated arrays."""
    m, ffn = cfg.m, cfg.ffn_width
    per_layer = (
        2 * 2 * m                 # two layer norms
        + 4 * (m * m + m)         # q, k, v, o projections with bias
        + (m * ffn + ffn)         # ffn in
        + (ffn * m + m)           # ffn out
    )
    return (
        cfg.vocab_size * m
        + cfg.max_len * m
        + cfg.layers * per_layer
        + 2 * m                   # final norm
        + m * cfg.p + cfg.p       # projection
    )


def _neg_inf_for(dtype) -> float:
    return -1e9 if dtype == np.float32 else -1e30


def _attention_bias(cfg: EncoderConfig, lengths: np.ndarray, pad_len: int,
                    dtype) -> np.ndarray:
    """Additive [B, 1, L, L] score bias: causal mask and/or key padding."""
    neg = _neg_inf_for(dtype)
    batch = lengths.shape[0]
    bias = np.zeros((batch, 1, pad_len, pad_len), dtype=dtype)
    if cfg.attention_mode == "causal":
        upper = np.triu(np.full((pad_len, pad_len), neg, dtype=dtype), k=1)
        bias += upper[None, None, :, :]
    else:
        key_pad = np.arange(pad_len)[None, :] >= lengths[:, None]  # [B, L]
        bias += np.where(key_pad, neg, 0.0).astype(dtype)[:, None, None, :]
    return bias


def encode_batch(params: EncoderParams, cfg: EncoderConfig,
                 seqs: list[TokenSequence], train_mode: bool = False,
                 rng: np.random.Generator | None = None,
                 tape: T.Tape | None = None) -> T.Tensor:
    """Encode a batch of sequences into a [B, p] tensor.

    Right-pads to the longest sequence; padded positions are excluded from
    pooling (and from attention keys in bidirectional mode). Dropout runs
    only in train_mode, drawing masks from the caller's rng.
    """
    if not seqs:
        raise ShapeError("encode_batch needs at least one sequence")
    if train_mode and cfg.dropout > 0.0 and rng is None:
        raise ConfigError("train_mode with dropout needs an rng")
    dtype = params["embed.tok"].data.dtype

    ids_list = []
    for s in seqs:
        ids = s.ids
        if len(ids) == 0:
            raise VocabularyError(f"empty token sequence (id={s.source_id!r})")
        if len(ids) > cfg.max_len:
            log.warning("truncating sequence %r from %d to max_len=%d",
                        s.source_id, len(ids), cfg.max_len)
            ids = ids[:cfg.max_len]
        bad = [i for i in ids if not 0 <= i < cfg.vocab_size]
        if bad:
            raise VocabularyError(f"id {bad[0]} outside vocabulary of size {cfg.vocab_size}")
        ids_list.append(ids)

    lengths = np.array([len(i) for i in ids_list])
    pad_len = int(lengths.max())
    batch = len(ids_list)
    padded = np.zeros((batch, pad_len), dtype=np.int64)
    for b, ids in enumerate(ids_list):
        padded[b, :len(ids)] = ids
    valid = (np.arange(pad_len)[None, :] < lengths[:, None])

    drop = cfg.dropout if train_mode else 0.0
    heads, dh = cfg.heads, cfg.m // cfg.heads
    scale = 1.0 / np.sqrt(dh)

    h = T.embedding_gather(tape, params["embed.tok"], padded)
    pos = T.embedding_gather(tape, params["embed.pos"], np.arange(pad_len))
    h = T.add(tape, h, pos)
    h = T.dropout(tape, h, drop, rng)

    bias = T.Tensor(_attention_bias(cfg, lengths, pad_len, dtype))
    for i in range(cfg.layers):
        pre = f"layer{i}"
        n1 = T.layer_norm(tape, h, params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])

        def head_split(x):
            x = T.reshape(tape, x, (batch, pad_len, heads, dh))
            return T.transpose(tape, x, (0, 2, 1, 3))

        q = head_split(T.add(tape, T.matmul(tape, n1, params[f"{pre}.attn.wq"]),
                             params[f"{pre}.attn.bq"]))
        k = head_split(T.add(tape, T.matmul(tape, n1, params[f"{pre}.attn.wk"]),
                             params[f"{pre}.attn.bk"]))
        vv = head_split(T.add(tape, T.matmul(tape, n1, params[f"{pre}.attn.wv"]),
                              params[f"{pre}.attn.bv"]))

        scores = T.scale(tape, T.matmul(tape, q, T.transpose(tape, k, (0, 1, 3, 2))), scale)
        scores = T.add(tape, scores, bias)
        probs = T.softmax_rows(tape, scores)
        probs = T.dropout(tape, probs, drop, rng)
        ctx = T.matmul(tape, probs, vv)
        ctx = T.transpose(tape, ctx, (0, 2, 1, 3))
        ctx = T.reshape(tape, ctx, (batch, pad_len, cfg.m))
        attn_out = T.add(tape, T.matmul(tape, ctx, params[f"{pre}.attn.wo"]),
                         params[f"{pre}.attn.bo"])
        attn_out = T.dropout(tape, attn_out, drop, rng)
        h = T.add(tape, h, attn_out)

        n2 = T.layer_norm(tape, h, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
        f = T.add(tape, T.matmul(tape, n2, params[f"{pre}.ffn.w1"]), params[f"{pre}.ffn.b1"])
        f = T.gelu(tape, f)
        f = T.add(tape, T.matmul(tape, f, params[f"{pre}.ffn.w2"]), params[f"{pre}.ffn.b2"])
        f = T.dropout(tape, f, drop, rng)
        h = T.add(tape, h, f)

    h = T.layer_norm(tape, h, params["final_norm.gain"], params["final_norm.bias"])
    if cfg.pooling == "mean":
        pooled = T.masked_mean_rows(tape, h, valid.astype(dtype))
    else:
        pooled = T.select_rows(tape, h, lengths - 1)
    return T.add(tape, T.matmul(tape, pooled, params["proj.w"]), params["proj.b"])


def encode(params: EncoderParams, cfg: EncoderConfig, seq: TokenSequence,
           train_mode: bool = False, step_seed: int = 0) -> EmbeddingVec:
    """Encode one sequence; eval mode is a pure function of (params, seq)."""
    rng = np.random.default_rng(step_seed) if train_mode else None
    out = encode_batch(params, cfg, [seq], train_mode=train_mode, rng=rng)
    return EmbeddingVec(out.data[0].copy(), seq.modality, seq.language, seq.source_id)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest line + named little-endian float32 blocks
# ---------------------------------------------------------------------------

def config_hash(cfg: EncoderConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(path: str, cfg: EncoderConfig, params: EncoderParams,
                    step: int, seed: int,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None) -> None:
    """Atomic write: manifest line, then each named array as <f4 bytes."""
    arrays = dict(params.named_arrays())
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ConfigError(f"extra arrays clash with params: {sorted(overlap)}")
        arrays.update(extra_arrays)
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "step": step,
        "seed": seed,
        "meta": extra_meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str, expected_cfg: EncoderConfig | None = None):
    """Returns (cfg, params, step, seed, extra_arrays, meta)."""
    with open(path, "rb") as f:
        try:
            manifest = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"bad checkpoint manifest in {path}: {exc}") from exc
        if manifest.get("format") != _CHECKPOINT_FORMAT:
            raise IntegrityError(f"{path} is not a checkpoint file")
        blob = f.read()
    cfg = EncoderConfig.from_dict(manifest["config"])
    if config_hash(cfg) != manifest["config_hash"]:
        raise IntegrityError("checkpoint config hash mismatch")
    if expected_cfg is not None and config_hash(expected_cfg) != manifest["config_hash"]:
        raise IntegrityError(
            "checkpoint was written under a different config than expected")

    arrays = {}
    offset = 0
    for spec in manifest["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = n * 4
        if offset + nbytes > len(blob):
            raise IntegrityError(f"checkpoint truncated while reading {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=offset).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise IntegrityError(f"checkpoint has {len(blob) - offset} trailing bytes")

    param_names = {name for name, _, _ in _param_names(cfg)}
    tensors = {}
    for name, shape, _ in _param_names(cfg):
        if name not in arrays:
            raise IntegrityError(f"checkpoint missing parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise IntegrityError(f"parameter {name} has shape {arrays[name].shape}, "
                                 f"expected {shape}")
        tensors[name] = T.Tensor(arrays[name], requires_grad=True)
    extra = {k: v for k, v in arrays.items() if k not in param_names}
    return (cfg, EncoderParams(tensors), manifest["step"], manifest["seed"],
            extra, manifest.get("meta", {}))
