"""Command-line entry point: ``icl-ser <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import INSTRUCTION, CorpusFormatError, by_speaker, generate_corpus, load_corpus, read_jsonl, write_corpus
from .evaluation import derive_seed, rows_to_csv, run_experiment
from .inference import exact_match, infer_icl
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import load_config, load_corpus_spec, run_pipeline
from .selection import SelectionError, SelectionSetting, select_procedure
from .training import DivergenceError, load_speech_lm, meta_train, train_classifier, train_stage1

log = logging.getLogger("icl_ser")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the seed of this command's stage")


def _train_args(p: argparse.ArgumentParser, needs: str | None) -> None:
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    if needs:
        p.add_argument(f"--{needs}", type=Path, required=True, help=f"{needs} checkpoint")
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--workdir", type=Path, help="keep best/last checkpoints here for resuming")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--metrics", type=Path, help="step-indexed metrics CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icl-ser", description="Speaker-personalized SER via in-context learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus as JSONL")
    _common(p)
    p.add_argument("--spec", type=Path, help="corpus spec (bare table or full config)")
    p.add_argument("--out", type=Path, required=True)

    _train_args(sub.add_parser("train-classifier", help="train the emotion classifier"), None)
    _train_args(sub.add_parser("train-stage1", help="fine-tune the speech LM without enrollment"), "classifier")
    _train_args(sub.add_parser("meta-train", help="MetaICL on enrollment episodes"), "stage1")

    p = sub.add_parser("infer", help="ICL inference on one utterance or a JSONL batch")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="JSONL of target utterances")
    p.add_argument("--pool", type=Path, help="JSONL enrollment pool (defaults to --input)")
    p.add_argument("--uid", help="only this target utterance")
    p.add_argument("-k", type=int, default=0)
    p.add_argument("--setting", default="TU+LD")
    p.add_argument("--beam", type=int)
    p.add_argument("--out", type=Path, help="prediction JSONL (stdout when omitted)")

    p = sub.add_parser("eval", help="metrics table over (k, setting) cells")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="metrics CSV (stdout when omitted)")
    p.add_argument("--predictions", type=Path)
    p.add_argument("--tag", help="model column value")

    p = sub.add_parser("gradcheck", help="finite-difference suite over every op and a toy model")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pipeline", help="gen-data through eval in one go")
    _common(p)
    p.add_argument("--workdir", type=Path, required=True)
    return parser


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _train(args, stage: str) -> None:
    cfg = load_config(args.config)
    tcfg = getattr(cfg, stage)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    corpus = load_corpus(_require(args.data, "data directory"))
    kw = dict(workdir=args.workdir, resume=args.resume, metrics_path=args.metrics)
    if stage == "classifier":
        ckpt = train_classifier(corpus, cfg.model, tcfg, **kw)
    elif stage == "stage1":
        ckpt = train_stage1(corpus, cfg.model, tcfg, load_checkpoint(_require(args.classifier, "checkpoint")), **kw)
    else:
        ckpt = meta_train(corpus, tcfg, load_checkpoint(_require(args.stage1, "checkpoint")), **kw)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, ckpt)
    print(f"{stage}: best valid {ckpt.meta['valid_score']:.4f} at step {ckpt.step} -> {args.out}")


def _infer(args) -> None:
    cfg = load_config(args.config)
    seed = cfg.eval.seed if args.seed is None else args.seed
    model = load_speech_lm(load_checkpoint(_require(args.checkpoint, "checkpoint")))
    targets = read_jsonl(_require(args.input, "input"))
    pool = by_speaker(read_jsonl(_require(args.pool, "pool")) if args.pool else targets)
    if args.uid is not None:
        targets = [u for u in targets if u.uid == args.uid]
        if not targets:
            raise KeyError(f"no utterance with uid {args.uid!r} in {args.input}")
    setting = SelectionSetting.parse(args.setting)
    instruction = model.vocab.tokenize(INSTRUCTION)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for u in targets:
            rng = np.random.default_rng(derive_seed(seed, str(setting), args.k, u.speaker_id, u.uid))
            enrollment = select_procedure(u, args.k, pool.get(u.speaker_id, []), setting, rng)
            pred = infer_icl(model, u, enrollment, instruction, args.beam or cfg.eval.beam_size, cfg.eval.max_len)
            rec = {"utterance_ref": u.uid, "k": args.k, "setting": str(setting), "predicted": pred.text,
                   "reference": u.label_word, "match": exact_match(pred.text, u.label_word)}
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def _eval(args) -> None:
    cfg = load_config(args.config)
    ecfg = cfg.eval
    if args.seed is not None:
        ecfg = replace(ecfg, seed=args.seed)
    if args.tag:
        ecfg = replace(ecfg, model_tag=args.tag)
    model = load_speech_lm(load_checkpoint(_require(args.checkpoint, "checkpoint")))
    corpus = load_corpus(_require(args.data, "data directory"))
    rows = run_experiment(model, corpus.split(ecfg.split), ecfg, args.predictions)
    text = rows_to_csv(rows)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)


def _gen_data(args) -> None:
    spec = load_corpus_spec(args.spec or args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    for path in write_corpus(generate_corpus(spec), args.out):
        print(path)


def _pipeline(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.corpus = replace(cfg.corpus, seed=args.seed)
    result = run_pipeline(cfg, args.workdir)
    sys.stdout.write(result.metrics_csv.read_text())
    print("timings " + " ".join(f"{k}={v:.0f}s" for k, v in result.timings.items()), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen-data":
            _gen_data(args)
        elif args.command == "train-classifier":
            _train(args, "classifier")
        elif args.command == "train-stage1":
            _train(args, "stage1")
        elif args.command == "meta-train":
            _train(args, "metaicl")
        elif args.command == "infer":
            _infer(args)
        elif args.command == "eval":
            _eval(args)
        elif args.command == "gradcheck":
            from .gradsuite import main as gradcheck
            return 0 if gradcheck(args.points, args.seed) else 1
        elif args.command == "pipeline":
            _pipeline(args)
    except (FileNotFoundError, CheckpointError, CorpusFormatError, SelectionError, DivergenceError,
            ValueError, KeyError) as exc:
        print(f"icl-ser {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
