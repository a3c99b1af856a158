"""Command-line entry point: ``acmix <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else. Run directories go under ``$ACMIX_RUN_ROOT``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .arpa import read_arpa, write_arpa
from .config import ExperimentConfig, load_config, override
from .corpus import admit_supervised, load_utterances, read_manifest, write_manifest
from .encoder import FeatureConfig, load_encoder, save_encoder
from .eval import compare, report_from_dict, report_to_dict, wer
from .exceptions import ACMixError, ConfigError, DataError
from .train import decode_all, load_asr, log_posteriors, save_asr

logger = logging.getLogger("acmix")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(base_dir=Path.cwd())
    return override(cfg, args.set or []).validate()


def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    if cfg.corpus.kind != "synthetic":
        raise ConfigError("gen-corpus needs corpus.kind = synthetic")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = pipeline.prepare_corpus(cfg)
    wav = out / "wav"
    write_manifest(out / "source.jsonl", data.source, wav)
    write_manifest(out / "train.jsonl", data.target_train, wav)
    write_manifest(out / "valid.jsonl", data.valid, wav)
    write_manifest(out / "test.jsonl", data.load_test(None, "gen-corpus"), wav)
    write_arpa(pipeline.build_lm(cfg, data), out / "lm.arpa")
    print(out)
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    data = pipeline.prepare_corpus(cfg)
    adapter = pipeline.make_adapter(cfg, args.alpha).fit(data.source + data.target_train)
    extra = adapter.spin_head_.state_arrays()
    extra.update(adapter.optim_.arrays())
    path = save_encoder(args.out, adapter.encoder_, extra,
                        {"stage": "adapt", "alpha": adapter.alpha, "strategy": adapter.strategy})
    adapter.loss_trace_.write_csv(Path(path).with_suffix(".trace.csv"))
    print(path)
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    data = pipeline.prepare_corpus(cfg)
    enc = load_encoder(args.encoder)[0] if args.encoder else pipeline.base_encoder(cfg)
    rec = pipeline.make_recognizer(cfg, enc, pipeline.vocabulary_for(cfg, data), args.subset)
    pool = data.target_train
    if args.subset != "full":
        pool = pipeline.nested_subsets(admit_supervised(pool, cfg.corpus.min_duration_s), [args.subset], cfg.seed,
                                       absolute_hours=cfg.corpus.kind == "manifest")[args.subset]
    rec.fit(pool)
    path = save_asr(args.out, rec.encoder_, rec.head_, rec.alphabet_,
                    {"stage": cfg.experiment.finetune_mode, "subset": args.subset}, rec.optim_)
    rec.loss_trace_.write_csv(Path(path).with_suffix(".trace.csv"))
    print(path)
    return 0


def cmd_decode(args) -> int:
    enc, head, alphabet, _ = load_asr(args.model)
    utts = load_utterances(read_manifest(args.manifest))
    lm = read_arpa(args.arpa) if args.arpa else None
    lp = log_posteriors(enc, head, utts, FeatureConfig(n_mels=enc.n_mels))
    out = decode_all(lp, alphabet, lm, args.beam, args.lm_weight, args.word_bonus)
    pipeline.write_hyps(Path(args.out), utts, out)
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    refs = pipeline.references(load_utterances(read_manifest(args.manifest)))
    hyps = pipeline.read_hyps(args.hyps)
    report = wer(refs, {k: hyps.get(k, []) for k in refs}, args.system, args.condition, args.lm)
    extra = sorted(set(hyps) - set(refs))
    if extra:
        logger.warning("%d hypothesis id(s) have no reference and are ignored", len(extra))
    Path(args.out).write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    print(f"{args.system or 'system'}: WER {100 * report.wer:.1f}%")
    return 0


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        path = Path(p)
        if not path.exists():
            raise DataError(f"report not found: {path}")
        reports.append(report_from_dict(json.loads(path.read_text())))
    table = compare(reports, args.baseline)
    md = table.to_markdown()
    if args.out:
        Path(args.out).write_text(md)
        Path(args.out).with_suffix(".csv").write_text(table.to_csv())
    sys.stdout.write(md)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _config(args)
    alphas = args.alphas if args.alphas is not None else cfg.experiment.sweep_alphas
    run_dir = pipeline.make_run_dir(f"{cfg.experiment.name}-sweep")
    (run_dir / "config.ini").write_text(cfg.to_text())
    res = pipeline.sweep_alpha(cfg, alphas, run_dir=run_dir)
    for a, w in sorted(res.valid_wer.items()):
        print(f"alpha {a!r}: validation WER {100 * w:.1f}%")
    print(f"chosen alpha {res.chosen_alpha!r}" + (f" ({res.note})" if res.note else ""))
    print(run_dir)
    return 0


def cmd_ablate(args) -> int:
    run_dir = pipeline.subset_ablation(_config(args))
    sys.stdout.write((run_dir / "report.md").read_text())
    print(run_dir)
    return 0


def cmd_run(args) -> int:
    run_dir = pipeline.run_pipeline(_config(args))
    sys.stdout.write((run_dir / "report.md").read_text())
    print(run_dir)
    return 0


def _alphas(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acmix", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="experiment config (INI); defaults are used when omitted")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key; may be repeated")
        return p

    p = with_config(sub.add_parser("gen-corpus", help="write the synthetic corpus as WAV files and manifests"))
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = with_config(sub.add_parser("adapt", help="AC-Mix adaptation of the encoder (stage 1)"))
    p.add_argument("-o", "--out", required=True, help="checkpoint path (.npz + .json)")
    p.add_argument("--alpha", type=float, help="override mixup.alpha")
    p.set_defaults(func=cmd_adapt)

    p = with_config(sub.add_parser("finetune", help="CTC fine-tuning (stage 2)"))
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--encoder", help="adapted encoder checkpoint; a fresh encoder when omitted")
    p.add_argument("--subset", default="full", choices=["full", "5h", "1h", "10min"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="decode a manifest with a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--arpa", help="ARPA language model; greedy decoding when omitted")
    p.add_argument("--beam", type=int, default=16)
    p.add_argument("--lm-weight", type=float, default=1.0)
    p.add_argument("--word-bonus", type=float, default=0.0)
    p.add_argument("-o", "--out", required=True, help="hypotheses JSONL")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score hypotheses against a reference manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--system", default="")
    p.add_argument("--condition", default="")
    p.add_argument("--lm", action="store_true", help="mark the report as an LM-decoding result")
    p.add_argument("-o", "--out", required=True, help="WER report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render WER reports as a comparison table")
    p.add_argument("reports", nargs="+", help="WER report JSON files")
    p.add_argument("--baseline", action="append", help="baseline system name; may be repeated")
    p.add_argument("-o", "--out", help="write Markdown here and CSV next to it")
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("sweep-alpha", help="select alpha on the validation split"))
    p.add_argument("--alphas", type=_alphas, help="comma-separated alphas (default: experiment.sweep_alphas)")
    p.set_defaults(func=cmd_sweep_alpha)

    p = with_config(sub.add_parser("ablate", help="supervised-subset ablation grid"))
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("run", help="full two-step pipeline with report"))
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except pipeline.StageError as exc:
        print(f"acmix: {exc}", file=sys.stderr)
        return exc.exit_code
    except ACMixError as exc:
        print(f"acmix: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
