"""Manifests, frame files, and the synthetic multilingual corpus.

Manifests are JSON lines; each record carries one training/eval example
for one of three roles: speech+transcript pairs (s2t), parallel text
(mt), or speech+translation test items (s2tt). Frame files hold one
utterance's feature frames as a JSON header line plus a little-endian
float32 block.

The synthetic generator builds sentences as sequences of shared concept
ids. Each language renders a concept as its own pseudo-word (text side)
and as feature frames around a concept base vector plus a per-language
shift (speech side), so cross-lingual structure exists for retrieval
transfer experiments without any real corpora.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from speechdex.errors import DataError, IntegrityError

_FRAME_FORMAT = "speechdex-frames-v1"

TASKS = ("s2t", "mt", "s2tt")


@dataclass
class ManifestRecord:
    id: str
    language: str
    task: str
    frames_path: str | None = None
    transcript: str | None = None
    translation: dict | None = None  # {"target_lang": code, "text": str}
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"record {self.id!r}: unknown task {self.task!r}")
        if self.task == "s2t" and not (self.frames_path and self.transcript is not None):
            raise DataError(f"record {self.id!r}: s2t needs frames_path and transcript")
        if self.task == "mt" and not (self.transcript is not None and self.translation):
            raise DataError(f"record {self.id!r}: mt needs transcript and translation")
        if self.task == "s2tt" and not (self.frames_path and self.translation):
            raise DataError(f"record {self.id!r}: s2tt needs frames_path and translation")
        if self.translation is not None:
            if not isinstance(self.translation, dict) \
                    or "target_lang" not in self.translation \
                    or "text" not in self.translation:
                raise DataError(
                    f"record {self.id!r}: translation must carry target_lang and text")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v not in (None, {}) or k == "id"}
        return d


def load_manifest(path: str) -> list[ManifestRecord]:
    """Parse and validate a JSON-lines manifest; errors carry line numbers."""
    records = []
    seen_ids = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                rec = ManifestRecord(
                    id=raw["id"], language=raw["language"], task=raw["task"],
                    frames_path=raw.get("frames_path"),
                    transcript=raw.get("transcript"),
                    translation=raw.get("translation"),
                    meta=raw.get("meta", {}))
                rec.validate()
            except (KeyError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen_ids.add(rec.id)
            records.append(rec)
    return records


def save_manifest(records: list[ManifestRecord], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for rec in records:
            rec.validate()
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# frame files
# ---------------------------------------------------------------------------

def write_frame_file(path: str, frames: np.ndarray, frame_rate_hz: float = 25.0) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise DataError(f"frames must be 2-D, got shape {frames.shape}")
    header = {
        "format": _FRAME_FORMAT,
        "dim": frames.shape[1],
        "frame_rate_hz": frame_rate_hz,
        "count": frames.shape[0],
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(frames.tobytes())
    os.replace(tmp, path)


def read_frame_file(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"bad frame file header in {path}: {exc}") from exc
        if header.get("format") != _FRAME_FORMAT:
            raise IntegrityError(f"{path} is not a frame file")
        blob = f.read()
    count, dim = header["count"], header["dim"]
    expected = count * dim * 4
    if len(blob) != expected:
        raise IntegrityError(
            f"{path}: frame block is {len(blob)} bytes, expected {expected} "
            f"for count={count} dim={dim}")
    frames = np.frombuffer(blob, dtype="<f4").reshape(count, dim).copy()
    return frames, header["frame_rate_hz"]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_languages: int = 2
    concept_vocab: int = 64
    concepts_min: int = 3
    concepts_max: int = 6
    frames_per_concept: int = 4
    frame_dim: int = 16
    noise_std: float = 0.1
    language_shift_std: float = 0.05
    train_pairs_per_lang: int = 512
    test_pairs_per_lang: int = 128
    mt_pairs: list = field(default_factory=list)        # [(src_code, tgt_code)]
    mt_train_pairs: int = 0
    s2tt_pairs: list = field(default_factory=list)      # [(speech_code, text_code)]
    s2tt_test_pairs: int = 0
    frame_rate_hz: float = 25.0
    seed: int = 0

    def languages(self) -> list[str]:
        return [f"syn{i}" for i in range(self.num_languages)]

    def validate(self) -> None:
        if self.num_languages < 1 or self.num_languages > 16:
            raise DataError("num_languages must be in [1, 16]")
        if not 1 <= self.concepts_min <= self.concepts_max:
            raise DataError("need 1 <= concepts_min <= concepts_max")
        n_seq = sum(self.concept_vocab ** n
                    for n in range(self.concepts_min, self.concepts_max + 1))
        total = self.num_languages * (self.train_pairs_per_lang + self.test_pairs_per_lang) \
            + len(self.mt_pairs) * self.mt_train_pairs \
            + len(self.s2tt_pairs) * self.s2tt_test_pairs
        if total > n_seq // 2:
            raise DataError(
                f"concept vocabulary too small: {total} unique sentences requested "
                f"but only ~{n_seq} short sequences exist")
        known = set(self.languages())
        for src, tgt in list(self.mt_pairs) + list(self.s2tt_pairs):
            if src not in known or tgt not in known:
                raise DataError(f"language pair ({src}, {tgt}) outside generated languages")


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n_syll = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syll))
        if word not in used:
            used.add(word)
            return word


class _SentenceSampler:
    """Draws globally unique concept-id sequences."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.used: set[tuple] = set()

    def draw(self) -> list[int]:
        while True:
            n = int(self.rng.integers(self.spec.concepts_min, self.spec.concepts_max + 1))
            seq = tuple(int(c) for c in self.rng.integers(self.spec.concept_vocab, size=n))
            if seq not in self.used:
                self.used.add(seq)
                return list(seq)


def _render_frames(spec: SyntheticSpec, bases, shifts, lang_idx: int,
                   concepts: list[int], rng: np.random.Generator) -> np.ndarray:
    rows = []
    for c in concepts:
        center = bases[c] + shifts[lang_idx]
        noise = rng.normal(scale=spec.noise_std,
                           size=(spec.frames_per_concept, spec.frame_dim)) \
            if spec.noise_std > 0 else np.zeros((spec.frames_per_concept, spec.frame_dim))
        rows.append(center[None, :] + noise)
    return np.concatenate(rows).astype(np.float32)


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir: str) -> dict[str, str]:
    """Write frame files and manifests under out_dir; returns manifest paths.

    Deterministic for a fixed spec (byte-identical files). S2TT test items
    pair speech in one language with text in another over the same concept
    sequence; manifests record the concepts in meta for bookkeeping.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    langs = spec.languages()
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    bases = rng.normal(size=(spec.concept_vocab, spec.frame_dim))
    shifts = rng.normal(scale=spec.language_shift_std,
                        size=(spec.num_languages, spec.frame_dim))
    used_words: set[str] = set()
    words = {lang: [_pseudo_word(rng, used_words) for _ in range(spec.concept_vocab)]
             for lang in langs}
    sampler = _SentenceSampler(spec, rng)

    def render_text(lang, concepts):
        return " ".join(words[lang][c] for c in concepts)

    def emit_frames(rec_id, lang, concepts):
        path = os.path.join(frames_dir, f"{rec_id}.frames")
        frames = _render_frames(spec, bases, shifts, langs.index(lang), concepts, rng)
        write_frame_file(path, frames, spec.frame_rate_hz)
        return path

    paths: dict[str, str] = {}

    train_s2t, test_s2t = [], []
    for lang in langs:
        for split, count, bucket in (("train", spec.train_pairs_per_lang, train_s2t),
                                     ("test", spec.test_pairs_per_lang, test_s2t)):
            for i in range(count):
                concepts = sampler.draw()
                rec_id = f"s2t-{split}-{lang}-{i:05d}"
                bucket.append(ManifestRecord(
                    id=rec_id, language=lang, task="s2t",
                    frames_path=emit_frames(rec_id, lang, concepts),
                    transcript=render_text(lang, concepts),
                    meta={"concepts": concepts}))
    paths["train_s2t"] = os.path.join(out_dir, "train_s2t.jsonl")
    save_manifest(train_s2t, paths["train_s2t"])
    paths["test_s2t"] = os.path.join(out_dir, "test_s2t.jsonl")
    save_manifest(test_s2t, paths["test_s2t"])

    if spec.mt_pairs:
        train_mt = []
        for src, tgt in spec.mt_pairs:
            for i in range(spec.mt_train_pairs):
                concepts = sampler.draw()
                train_mt.append(ManifestRecord(
                    id=f"mt-train-{src}-{tgt}-{i:05d}", language=src, task="mt",
                    transcript=render_text(src, concepts),
                    translation={"target_lang": tgt, "text": render_text(tgt, concepts)},
                    meta={"concepts": concepts}))
        paths["train_mt"] = os.path.join(out_dir, "train_mt.jsonl")
        save_manifest(train_mt, paths["train_mt"])

    if spec.s2tt_pairs:
        test_s2tt = []
        for speech_lang, text_lang in spec.s2tt_pairs:
            for i in range(spec.s2tt_test_pairs):
                concepts = sampler.draw()
                rec_id = f"s2tt-test-{speech_lang}-{text_lang}-{i:05d}"
                test_s2tt.append(ManifestRecord(
                    id=rec_id, language=speech_lang, task="s2tt",
                    frames_path=emit_frames(rec_id, speech_lang, concepts),
                    translation={"target_lang": text_lang,
                                 "text": render_text(text_lang, concepts)},
                    meta={"concepts": concepts}))
        paths["test_s2tt"] = os.path.join(out_dir, "test_s2tt.jsonl")
        save_manifest(test_s2tt, paths["test_s2tt"])

    spec_path = os.path.join(out_dir, "synthetic_spec.json")
    with open(spec_path + ".tmp", "w", encoding="utf-8") as f:
        json.dump(asdict(spec), f, indent=1, sort_keys=True)
    os.replace(spec_path + ".tmp", spec_path)
    paths["spec"] = spec_path
    return paths


def collect_training_frames(records: list[ManifestRecord],
                            max_utterances: int | None = None) -> np.ndarray:
    """Stack frames from speech records (codebook fitting input)."""
    chunks = []
    for rec in records:
        if rec.frames_path is None:
            continue
        frames, _ = read_frame_file(rec.frames_path)
        chunks.append(frames)
        if max_utterances is not None and len(chunks) >= max_utterances:
            break
    if not chunks:
        raise DataError("no speech records with frames found")
    return np.concatenate(chunks)
