"""Retrieval index and metrics.

Speech-to-text evaluation retrieves, for every speech query, the best
transcript from the candidate pool of its language (all transcripts of
that language's test split) by raw dot product. Reported numbers: recall
at 1, word error rate between the gold transcript and the top-1 retrieved
text, and for translation retrieval a 4-gram corpus BLEU of the top-1
retrieved translations against the references. Language aggregates are
unweighted means.
"""

from __future__ import annotations

import json
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from speechdex import backend
from speechdex.data import ManifestRecord, read_frame_file
from speechdex.errors import DataError, ShapeError
from speechdex.kmeans import Codebook, FrameSequence, quantize
from speechdex.model import EncoderConfig, EncoderParams, encode_batch
from speechdex.vocab import TextVocab, TokenSequence, build_speech_input, build_text_input


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray          # [M, p]
    texts: list[str]
    languages: list[str]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ShapeError(f"index needs [M>=1, p] embeddings, got {self.embeddings.shape}")
        if len(self.texts) != self.embeddings.shape[0]:
            raise ShapeError("index texts misaligned with embeddings")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def retrieve_top_k(query: np.ndarray, index: RetrievalIndex, k: int) -> list[int]:
    """Candidate indices by descending dot product; ties by ascending index."""
    query = np.asarray(query)
    if query.shape != (index.embeddings.shape[1],):
        raise ShapeError(f"query dim {query.shape} does not match index "
                         f"dim {index.embeddings.shape[1]}")
    if not 1 <= k <= index.size:
        raise ShapeError(f"k={k} outside [1, {index.size}]")
    scores = index.embeddings @ query
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def _top1_batch(queries: np.ndarray, index: RetrievalIndex) -> np.ndarray:
    scores = queries @ index.embeddings.T  # [Q, M]
    return scores.argmax(axis=1)  # argmax takes the lowest index on ties


def recall_at_1(queries: np.ndarray, gold_ids: list[int], index: RetrievalIndex) -> float:
    """Fraction of queries whose top-1 candidate is the gold one."""
    gold = np.asarray(gold_ids)
    if gold.size and (gold.min() < 0 or gold.max() >= index.size):
        raise DataError("gold id outside the candidate index")
    top1 = _top1_batch(np.asarray(queries), index)
    return float((top1 == gold).mean())


# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------

def wer(reference: list[str], hypothesis: list[str]) -> float:
    """(substitutions + deletions + insertions) / len(reference); can exceed 1."""
    if len(reference) == 0:
        raise DataError("WER needs a non-empty reference")
    ids: dict[str, int] = {}
    ref = np.fromiter((ids.setdefault(w, len(ids)) for w in reference), dtype=np.int32)
    hyp = np.fromiter((ids.setdefault(w, len(ids)) for w in hypothesis),
                      dtype=np.int32, count=len(hypothesis))
    return backend.levenshtein_ids(ref, hyp) / len(reference)


# ---------------------------------------------------------------------------
# corpus BLEU (4-gram, unsmoothed)
# ---------------------------------------------------------------------------

_BLEU_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def bleu_tokenize(s: str) -> list[str]:
    """Split on whitespace with punctuation broken out; case preserved."""
    return _BLEU_TOKEN.findall(s)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str]) -> float:
    """Corpus-level geometric mean of clipped 1..4-gram precisions times the
    brevity penalty, scaled to [0, 100]; 0 if any order has no matches."""
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not any(references):
        raise DataError("corpus BLEU needs at least one non-empty reference")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = bleu_tokenize(hyp)
        r = bleu_tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            h_counts = _ngrams(h, n)
            if not h_counts:
                continue
            r_counts = _ngrams(r, n)
            totals[n - 1] += sum(h_counts.values())
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0 or any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_precision = sum(np.log(m / t) for m, t in zip(matches, totals)) / 4.0
    brevity = min(0.0, 1.0 - ref_len / hyp_len)
    return float(100.0 * np.exp(log_precision + brevity))


# ---------------------------------------------------------------------------
# evaluation harnesses
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    per_language: dict
    aggregate: dict
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        for lang, row in self.per_language.items():
            if not 0.0 <= row["r_at_1"] <= 1.0:
                raise DataError(f"{lang}: R@1 out of range")
            if row.get("wer") is not None and row["wer"] < 0:
                raise DataError(f"{lang}: negative WER")
            if row.get("bleu") is not None and not 0.0 <= row["bleu"] <= 100.0:
                raise DataError(f"{lang}: BLEU out of range")

    def to_json(self, path: str) -> None:
        doc = {"task": self.task, "per_language": self.per_language,
               "aggregate": self.aggregate, "provenance": self.provenance}
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, path: str) -> "EvalReport":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        return cls(doc["task"], doc["per_language"], doc["aggregate"],
                   doc.get("provenance", {}))


def encode_sequences(params: EncoderParams, cfg: EncoderConfig,
                     seqs: list[TokenSequence], batch_size: int = 128) -> np.ndarray:
    """Eval-mode embeddings for a list of sequences, in chunks."""
    outs = []
    for lo in range(0, len(seqs), batch_size):
        outs.append(encode_batch(params, cfg, seqs[lo:lo + batch_size]).data)
    return np.concatenate(outs)


def speech_sequence(rec: ManifestRecord, v: TextVocab, cb: Codebook) -> TokenSequence:
    frames, _ = read_frame_file(rec.frames_path)
    tokens = quantize(FrameSequence(frames, rec.id, rec.language), cb)
    return build_speech_input(rec.language, tokens, v, a=cb.k, source_id=rec.id)


def _aggregate(per_language: dict, keys: tuple[str, ...]) -> dict:
    agg = {k: float(np.mean([row[k] for row in per_language.values()])) for k in keys}
    agg["languages"] = len(per_language)
    agg["queries"] = int(sum(row["count"] for row in per_language.values()))
    return agg


def evaluate_s2t(params: EncoderParams, cfg: EncoderConfig,
                 records: list[ManifestRecord], v: TextVocab, cb: Codebook,
                 batch_size: int = 128, provenance: dict | None = None) -> EvalReport:
    """Per-language transcription retrieval: R@1 and retrieval WER."""
    by_lang: dict[str, list[ManifestRecord]] = defaultdict(list)
    for rec in records:
        if rec.task == "s2t":
            by_lang[rec.language].append(rec)
    if not by_lang:
        raise DataError("no s2t records to evaluate")

    per_language = {}
    for lang, recs in sorted(by_lang.items()):
        cand_seqs = [build_text_input(lang, r.transcript, v, source_id=r.id) for r in recs]
        index = RetrievalIndex(encode_sequences(params, cfg, cand_seqs, batch_size),
                               [r.transcript for r in recs], [lang] * len(recs),
                               [r.id for r in recs])
        queries = encode_sequences(params, cfg,
                                   [speech_sequence(r, v, cb) for r in recs], batch_size)
        top1 = _top1_batch(queries, index)
        gold = np.arange(len(recs))
        r1 = float((top1 == gold).mean())
        wers = [wer(r.transcript.split(), index.texts[t].split())
                for r, t in zip(recs, top1)]
        per_language[lang] = {"r_at_1": r1, "wer": float(np.mean(wers)), "count": len(recs)}

    report = EvalReport("s2t", per_language,
                        _aggregate(per_language, ("r_at_1", "wer")),
                        provenance or {})
    report.validate()
    return report


def evaluate_s2tt(params: EncoderParams, cfg: EncoderConfig,
                  records: list[ManifestRecord], v: TextVocab, cb: Codebook,
                  batch_size: int = 128, provenance: dict | None = None) -> EvalReport:
    """Cross-lingual translation retrieval: R@1 and corpus BLEU of top-1."""
    by_lang: dict[str, list[ManifestRecord]] = defaultdict(list)
    for rec in records:
        if rec.task == "s2tt":
            by_lang[rec.language].append(rec)
    if not by_lang:
        raise DataError("no s2tt records to evaluate")

    per_language = {}
    for lang, recs in sorted(by_lang.items()):
        cand_seqs = [build_text_input(r.translation["target_lang"], r.translation["text"],
                                      v, source_id=r.id) for r in recs]
        index = RetrievalIndex(encode_sequences(params, cfg, cand_seqs, batch_size),
                               [r.translation["text"] for r in recs],
                               [r.translation["target_lang"] for r in recs],
                               [r.id for r in recs])
        queries = encode_sequences(params, cfg,
                                   [speech_sequence(r, v, cb) for r in recs], batch_size)
        top1 = _top1_batch(queries, index)
        gold = np.arange(len(recs))
        r1 = float((top1 == gold).mean())
        bleu = corpus_bleu([index.texts[t] for t in top1],
                           [r.translation["text"] for r in recs])
        per_language[lang] = {"r_at_1": r1, "bleu": bleu, "count": len(recs)}

    report = EvalReport("s2tt", per_language,
                        _aggregate(per_language, ("r_at_1", "bleu")),
                        provenance or {})
    report.validate()
    return report


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def report_table(report: EvalReport) -> str:
    """Plain-text table: one row per language plus the aggregate."""
    metric = "wer" if report.task == "s2t" else "bleu"
    lines = [f"task: {report.task}",
             f"{'language':<12} {'R@1':>8} {metric.upper():>8} {'count':>7}"]
    for lang, row in sorted(report.per_language.items()):
        lines.append(f"{lang:<12} {row['r_at_1']:>8.3f} {row[metric]:>8.3f} {row['count']:>7d}")
    agg = report.aggregate
    lines.append(f"{'ALL':<12} {agg['r_at_1']:>8.3f} {agg[metric]:>8.3f} {agg['queries']:>7d}")
    return "\n".join(lines)


def write_csv(report: EvalReport, path: str) -> None:
    metric = "wer" if report.task == "s2t" else "bleu"
    with open(path + ".tmp", "w", encoding="utf-8") as f:
        f.write(f"language,r_at_1,{metric},count\n")
        for lang, row in sorted(report.per_language.items()):
            f.write(f"{lang},{row['r_at_1']:.6f},{row[metric]:.6f},{row['count']}\n")
        agg = report.aggregate
        f.write(f"ALL,{agg['r_at_1']:.6f},{agg[metric]:.6f},{agg['queries']}\n")
    os.replace(path + ".tmp", path)


def write_tsv(report: EvalReport, path: str) -> None:
    """Plot-ready per-language rows."""
    metric = "wer" if report.task == "s2t" else "bleu"
    with open(path + ".tmp", "w", encoding="utf-8") as f:
        f.write(f"language\tr_at_1\t{metric}\n")
        for lang, row in sorted(report.per_language.items()):
            f.write(f"{lang}\t{row['r_at_1']:.6f}\t{row[metric]:.6f}\n")
    os.replace(path + ".tmp", path)
