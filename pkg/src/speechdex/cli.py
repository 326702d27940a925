"""Command-line surface.

Subcommands cover the full pipeline: generate a synthetic corpus, fit the
audio-token codebook, quantize frames, train the dual encoder, evaluate
transcription/translation retrieval, dump embeddings, and render reports.
A --config JSON file supplies defaults per section; explicit flags win.
All randomness is controlled by --seed. Exit codes: 0 success, 1 runtime
failure (one machine-parsable "ERROR <Class>: <msg>" line on stderr),
2 usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from speechdex import evaluation
from speechdex.data import (
    SyntheticSpec,
    collect_training_frames,
    generate_synthetic_corpus,
    load_manifest,
    read_frame_file,
)
from speechdex.errors import ConfigError, SpeechdexError
from speechdex.kmeans import FrameSequence, fit_codebook, load_codebook, quantize, save_codebook
from speechdex.model import EncoderConfig, config_hash, load_checkpoint
from speechdex.training import TrainConfig, prepare_mt_pairs, prepare_s2t_pairs, train
from speechdex.vocab import TextVocab, load_vocab, save_vocab, train_subword_merges

log = logging.getLogger(__name__)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _merge(args: argparse.Namespace, section: dict, fields: dict) -> dict:
    """Flag value if given, else config-section value, else default."""
    out = {}
    for name, default in fields.items():
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
        elif name in section:
            out[name] = section[name]
        else:
            out[name] = default
    return out


def _vocab_for_eval(args, cb) -> tuple[TextVocab, int]:
    if getattr(args, "vocab", None):
        return load_vocab(args.vocab)
    return TextVocab(), cb.k


def _load_eval_inputs(args):
    cb = load_codebook(args.codebook)
    v, a = _vocab_for_eval(args, cb)
    cfg, params, step, _, _, _ = load_checkpoint(args.checkpoint)
    if cfg.t != v.t:
        raise ConfigError(f"checkpoint text vocab t={cfg.t} != vocab t={v.t}")
    if cfg.a != cb.k or a != cb.k:
        raise ConfigError(f"checkpoint audio vocab a={cfg.a} != codebook k={cb.k}")
    records = load_manifest(args.manifest)
    provenance = {"checkpoint": args.checkpoint, "step": step,
                  "config_hash": config_hash(cfg)}
    return cfg, params, records, v, cb, provenance


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_fit_codebook(args) -> int:
    records = load_manifest(args.manifest)
    frames = collect_training_frames(records, max_utterances=args.max_utterances)
    cb = fit_codebook(frames, k=args.k, max_iters=args.iters, seed=args.seed)
    save_codebook(cb, args.out)
    print(f"codebook k={cb.k} dim={cb.dim} distortion={cb.fit_history[-1]:.6f} -> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    cb = load_codebook(args.codebook)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        if args.frames:
            frames, _ = read_frame_file(args.frames)
            tokens = quantize(FrameSequence(frames, args.frames, ""), cb)
            out.write(json.dumps({"id": os.path.basename(args.frames),
                                  "tokens": tokens}) + "\n")
        else:
            for rec in load_manifest(args.manifest):
                if rec.frames_path is None:
                    continue
                frames, _ = read_frame_file(rec.frames_path)
                tokens = quantize(FrameSequence(frames, rec.id, rec.language), cb)
                out.write(json.dumps({"id": rec.id, "tokens": tokens}) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def cmd_gen_synthetic(args) -> int:
    section = _load_config_file(args.config).get("synthetic", {})
    fields = _merge(args, section, dict(
        num_languages=2, concept_vocab=64, concepts_min=3, concepts_max=6,
        frames_per_concept=4, frame_dim=16, noise_std=0.1, language_shift_std=0.05,
        train_pairs_per_lang=512, test_pairs_per_lang=128,
        mt_train_pairs=0, s2tt_test_pairs=0, seed=0))
    pairs = {"mt_pairs": args.mt_pairs, "s2tt_pairs": args.s2tt_pairs}
    for key, raw in pairs.items():
        raw = raw if raw is not None else section.get(key, [])
        if isinstance(raw, str):
            raw = [p.split(":") for p in raw.split(",") if p]
        fields[key] = [tuple(p) for p in raw]
    spec = SyntheticSpec(**fields)
    paths = generate_synthetic_corpus(spec, args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return 0


def cmd_train(args) -> int:
    doc = _load_config_file(args.config)
    cb = load_codebook(args.codebook)
    s2t_records = load_manifest(args.train_s2t)

    merges = []
    if args.subword_merges:
        corpus = [r.transcript for r in s2t_records if r.transcript]
        merges = train_subword_merges(corpus, args.subword_merges)
    v = TextVocab(merges=merges)

    enc_fields = _merge(args, doc.get("encoder", {}), dict(
        m=128, layers=4, heads=4, ffn_width=512, p=128,
        attention_mode="causal", max_len=256, pooling="mean"))
    train_fields = _merge(args, doc.get("train", {}), dict(
        peak_lr=1e-3, warmup_steps=2500, total_steps=100_000, batch_size=64,
        dropout=0.1, spreadout_weight=1.0, mt_fraction=None, seed=0,
        eval_every=0, checkpoint_every=0, micro_batch=0))

    mt_pool = []
    if args.train_mt:
        mt_pool = prepare_mt_pairs(load_manifest(args.train_mt), v)
    if train_fields["mt_fraction"] is None:
        train_fields["mt_fraction"] = 0.25 if mt_pool else 0.0

    steps = train_fields["total_steps"]
    if train_fields["warmup_steps"] > steps:
        log.info("clamping warmup_steps to total_steps=%d", steps)
        train_fields["warmup_steps"] = steps

    enc_cfg = EncoderConfig(t=v.t, a=cb.k, dropout=train_fields["dropout"], **enc_fields)
    train_cfg = TrainConfig(**train_fields)

    eval_fn = None
    if args.eval_s2t:
        eval_records = load_manifest(args.eval_s2t)

        def eval_fn(params, step):
            report = evaluation.evaluate_s2t(params, enc_cfg, eval_records, v, cb)
            return {"r_at_1": report.aggregate["r_at_1"], "wer": report.aggregate["wer"]}

    os.makedirs(args.out, exist_ok=True)
    save_vocab(os.path.join(args.out, "vocab.json"), v, cb.k)
    s2t_pool = prepare_s2t_pairs(s2t_records, v, cb)
    result = train(enc_cfg, train_cfg, s2t_pool, mt_pool, args.out,
                   eval_fn=eval_fn, resume_from=args.resume_from)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _run_eval(args, evaluate, metric_key: str) -> int:
    cfg, params, records, v, cb, provenance = _load_eval_inputs(args)
    report = evaluate(params, cfg, records, v, cb, provenance=provenance)
    print(evaluation.report_table(report))
    agg = report.aggregate
    print(f"aggregate R@1 {agg['r_at_1']:.3f} {metric_key.upper()} {agg[metric_key]:.3f}")
    if args.out:
        report.to_json(args.out)
    if args.csv:
        evaluation.write_csv(report, args.csv)
    if args.tsv:
        evaluation.write_tsv(report, args.tsv)
    return 0


def cmd_eval_s2t(args) -> int:
    return _run_eval(args, evaluation.evaluate_s2t, "wer")


def cmd_eval_s2tt(args) -> int:
    return _run_eval(args, evaluation.evaluate_s2tt, "bleu")


def cmd_embed(args) -> int:
    cfg, params, records, v, cb, _ = _load_eval_inputs(args)
    seqs, ids, langs = [], [], []
    for rec in records:
        if args.side == "speech":
            if rec.frames_path is None:
                continue
            seqs.append(evaluation.speech_sequence(rec, v, cb))
        else:
            if rec.transcript is None:
                continue
            from speechdex.vocab import build_text_input
            seqs.append(build_text_input(rec.language, rec.transcript, v, source_id=rec.id))
        ids.append(rec.id)
        langs.append(rec.language)
    embs = evaluation.encode_sequences(params, cfg, seqs)
    np.savez(args.out, ids=np.array(ids), languages=np.array(langs), embeddings=embs)
    print(f"wrote {len(ids)} embeddings of dim {embs.shape[1]} -> {args.out}")
    return 0


def cmd_report(args) -> int:
    for path in args.reports:
        report = evaluation.EvalReport.from_json(path)
        print(evaluation.report_table(report))
        print()
        if args.csv:
            evaluation.write_csv(report, args.csv)
        if args.tsv:
            evaluation.write_tsv(report, args.tsv)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _int(p, *names, **kw):
    for n in names:
        p.add_argument(n, type=int, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speechdex",
                                     description="speech-text retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-codebook", help="fit the k-means audio codebook")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--iters", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-utterances", type=int, default=None)
    p.set_defaults(fn=cmd_fit_codebook)

    p = sub.add_parser("quantize", help="frames -> audio tokens")
    p.add_argument("--codebook", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--frames")
    group.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _int(p, "--num-languages", "--concept-vocab", "--concepts-min", "--concepts-max",
         "--frames-per-concept", "--frame-dim", "--train-pairs-per-lang",
         "--test-pairs-per-lang", "--mt-train-pairs", "--s2tt-test-pairs", "--seed")
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--language-shift-std", type=float, default=None)
    p.add_argument("--mt-pairs", default=None, help="e.g. syn0:syn2,syn1:syn2")
    p.add_argument("--s2tt-pairs", default=None, help="e.g. syn1:syn2")
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--train-s2t", required=True)
    p.add_argument("--train-mt")
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume-from")
    p.add_argument("--eval-s2t", help="manifest for periodic retrieval eval")
    p.add_argument("--subword-merges", type=int, default=0)
    _int(p, "--m", "--layers", "--heads", "--ffn-width", "--p", "--max-len",
         "--warmup-steps", "--batch-size", "--seed", "--eval-every",
         "--checkpoint-every", "--micro-batch")
    p.add_argument("--steps", dest="total_steps", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--spreadout-weight", type=float, default=None)
    p.add_argument("--mt-fraction", type=float, default=None)
    p.add_argument("--attention-mode", choices=["causal", "bidirectional"], default=None)
    p.add_argument("--pooling", choices=["mean", "last"], default=None)
    p.set_defaults(fn=cmd_train)

    for name, fn in (("eval-s2t", cmd_eval_s2t), ("eval-s2tt", cmd_eval_s2tt)):
        p = sub.add_parser(name, help=f"{name} retrieval evaluation")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--codebook", required=True)
        p.add_argument("--vocab")
        p.add_argument("--out")
        p.add_argument("--csv")
        p.add_argument("--tsv")
        p.set_defaults(fn=fn)

    p = sub.add_parser("embed", help="dump embeddings for one side of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--vocab")
    p.add_argument("--side", choices=["speech", "text"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("report", help="render eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv")
    p.add_argument("--tsv")
    p.set_defaults(fn=cmd_report)

    return parser


def cli(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except SpeechdexError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
