"""Command line entry point: ``tsextract <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import dataset, evaluation, synthetic, trainer
from .audio import AudioError


def _synth_data(args):
    records = dataset.synth_dataset(args.corpus, args.out, args.n, args.seed, workers=args.workers)
    print(f"wrote {len(records)} examples to {args.out}/manifest.tsv")


def _synth_corpus(args):
    synthetic.write_corpus(args.out, args.speakers, args.utts, args.seconds, args.seed)
    print(f"wrote {args.speakers} x {args.utts} utterances to {args.out}")


def _train(args):
    if args.config:
        cfg = trainer.load_config(args.config, seed=args.seed, toy=True if args.toy else None)
    else:
        cfg = trainer.TrainConfig(seed=args.seed or 0, toy=args.toy)
    best = trainer.fit(cfg, args.train_manifest, args.val_manifest, args.out)
    print(f"best checkpoint: {best}")


def _eval(args):
    report = evaluation.evaluate(args.manifest, args.checkpoint, args.out)
    print(evaluation.render_table(report))


def _extract(args):
    evaluation.extract_file(args.mix, args.ref, args.checkpoint, args.out)


def _report(args):
    print(evaluation.render_table(evaluation.EvalReport.load(args.input)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsextract", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="mix a per-speaker WAV corpus into a training manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_synth_data)

    p = sub.add_parser("synth-corpus", help="write a toy harmonic-voice corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=10)
    p.add_argument("--utts", type=int, default=4)
    p.add_argument("--seconds", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_synth_corpus)

    p = sub.add_parser("train")
    p.add_argument("--config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--toy", action="store_true")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_eval)

    p = sub.add_parser("extract")
    p.add_argument("--mix", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_extract)

    p = sub.add_parser("report")
    p.add_argument("--in", dest="input", required=True)
    p.set_defaults(func=_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (AudioError, trainer.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"tsextract {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
