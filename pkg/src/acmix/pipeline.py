"""Experiment orchestration: the two-step pipeline, the alpha sweep and the
supervised-subset ablation.

Every run writes into its own directory under ``$ACMIX_RUN_ROOT`` (default
``./runs``): the resolved config, loss traces, checkpoints, hypotheses,
per-system WER reports and the rendered tables. The test split is loaded by
a single decode invocation per run, which is recorded in ``access.log``.
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .arpa import ArpaLm, estimate_arpa, read_arpa, write_arpa
from .config import SUBSET_HOURS, SUBSET_LABELS, ExperimentConfig
from .corpus import (Utterance, admit_supervised, grammar_sentences, load_utterances, read_manifest,
                     synth_corpus)
from .encoder import Encoder, save_encoder, set_trainable
from .estimators import ACMixAdapter, CTCRecognizer
from .eval import WerReport, compare, report_to_dict, wer
from .exceptions import ACMixError, ConfigError, DataError
from .train import decode_all, save_asr

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "ACMIX_RUN_ROOT"
SYSTEM_LABELS = {"none": "none", "acmix": "AC-Mix"}


# --------------------------------------------------------------------------
# run directories and bookkeeping


def run_root(root=None) -> Path:
    return Path(root or os.environ.get(RUN_ROOT_ENV) or "runs")


def make_run_dir(name: str, root=None) -> Path:
    """Create a fresh ``<root>/<name>-<timestamp>[-k]`` directory."""
    base = run_root(root)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for k in range(1000):
        path = base / (f"{name}-{stamp}" if k == 0 else f"{name}-{stamp}-{k}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"could not create a run directory under {base}")


class AccessLog:
    """Append-only record of which stage read which split."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def record(self, split: str, consumer: str) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{split}\t{consumer}\n")

    def entries(self) -> list[tuple[str, str]]:
        if not self.path.exists():
            return []
        return [tuple(line.rstrip("\n").split("\t", 1)) for line in self.path.read_text().splitlines() if line]


class StageError(ACMixError):
    """Wraps a failure with the name of the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@contextlib.contextmanager
def stage(name: str, run_dir: Path | None = None):
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        if run_dir is not None:
            (run_dir / "FAILED").write_text(f"{name}\n{type(exc).__name__}: {exc}\n")
        raise StageError(name, exc) from exc


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _progress(stage_name: str, step: int, loss: float) -> None:
    logger.info("%s step %d loss %.4f", stage_name, step, loss)


# --------------------------------------------------------------------------
# data


@dataclass
class CorpusData:
    """Source pool, labelled target splits and a deferred test loader."""

    source: list[Utterance]
    target_train: list[Utterance]
    valid: list[Utterance]
    _test_loader: Callable[[], list[Utterance]]
    lm_text: list[list[str]] = field(default_factory=list)

    def load_test(self, log: AccessLog | None, consumer: str) -> list[Utterance]:
        if log is not None:
            log.record("test", consumer)
        return self._test_loader()


def prepare_corpus(cfg: ExperimentConfig) -> CorpusData:
    """Generate or ingest the corpus named by the config.

    The test split is only materialised through :meth:`CorpusData.load_test`.
    """
    c = cfg.corpus
    if c.kind == "synthetic":
        spec = c.synth_spec()
        source = synth_corpus(spec, "source", c.source_count)
        train = synth_corpus(spec, "target", c.target_train)
        valid = synth_corpus(spec, "target", c.target_valid, offset=c.target_train)
        off = c.target_train + c.target_valid
        lm_text = grammar_sentences(spec, cfg.decode.lm_sentences)
        return CorpusData(source, train, valid, lambda: synth_corpus(spec, "target", c.target_test, offset=off), lm_text)

    def load(key: str, split: str) -> list[Utterance]:
        return load_utterances(read_manifest(cfg.resolve(getattr(c, key)), split))

    source = load("source_manifest", "train")
    train = load("train_manifest", "train")
    valid = load("valid_manifest", "validation")
    lm_text = [list(u.transcript) for u in train if u.transcript]
    return CorpusData(source, train, valid, lambda: load("test_manifest", "test"), lm_text)


def build_lm(cfg: ExperimentConfig, data: CorpusData, run_dir: Path | None = None) -> ArpaLm:
    """Load the configured ARPA file, or estimate one and round-trip it through disk."""
    if cfg.decode.arpa:
        return read_arpa(cfg.resolve(cfg.decode.arpa))
    if not data.lm_text:
        raise DataError("no text available to estimate a language model")
    lm = estimate_arpa(data.lm_text, cfg.decode.lm_order)
    if run_dir is None:
        return lm
    path = run_dir / "lm.arpa"
    write_arpa(lm, path)
    return read_arpa(path)


def references(utts: Sequence[Utterance]) -> dict[str, list[str]]:
    refs = {u.id: list(u.transcript) for u in utts if u.transcript}
    if len(refs) < len(utts):
        logger.warning("%d utterance(s) without a reference transcript are not scored", len(utts) - len(refs))
    return refs


# --------------------------------------------------------------------------
# model building blocks


def base_encoder(cfg: ExperimentConfig) -> Encoder:
    """The starting encoder shared by every system of a run."""
    e = cfg.encoder
    enc = Encoder(e.n_mels, e.d_model, e.n_layers, e.n_heads, e.ffn_mult, seed=cfg.seed)
    return set_trainable(enc, e.last_n)


def make_adapter(cfg: ExperimentConfig, alpha: float | None = None, encoder: Encoder | None = None) -> ACMixAdapter:
    m, s, a, e = cfg.mixup_config(alpha), cfg.spin, cfg.adapt, cfg.encoder
    run = cfg.adapt_train()
    return ACMixAdapter(
        strategy=m.strategy, alpha=m.alpha, rms_match=m.rms_match, last_n=e.last_n, n_layers=e.n_layers,
        d_model=e.d_model, n_heads=e.n_heads, n_mels=e.n_mels, K=s.K, proj_dim=s.proj_dim, temp=s.temp,
        sinkhorn_eps=s.sinkhorn_eps, sinkhorn_iters=s.sinkhorn_iters, steps=a.steps, batch_size=a.batch_size,
        peak_lr=a.peak_lr, final_lr=a.final_lr, warmup_steps=a.warmup_steps, clip_norm=a.clip_norm,
        encoder=encoder if encoder is not None else base_encoder(cfg), random_state=cfg.seed,
        train_seed=run.seed, progress=_progress,
    )


def make_recognizer(cfg: ExperimentConfig, encoder: Encoder, vocab: list[str] | None,
                    subset: str = "full") -> CTCRecognizer:
    run, f, d = cfg.finetune_train(subset), cfg.finetune, cfg.decode
    return CTCRecognizer(
        mode=cfg.experiment.finetune_mode, encoder=encoder, steps=run.steps, batch_size=run.batch_size,
        peak_lr=run.peak_lr, final_lr=run.final_lr, warmup_steps=run.warmup_steps, clip_norm=run.clip_norm,
        head_hidden=f.head_hidden, min_duration_s=cfg.corpus.min_duration_s, vocabulary=vocab, beam=d.beam,
        lm_weight=d.lm_weight, word_bonus=d.word_bonus, random_state=cfg.seed, train_seed=run.seed,
        progress=_progress,
    )


def vocabulary_for(cfg: ExperimentConfig, data: CorpusData) -> list[str]:
    """Output vocabulary: every word in the supervised data, validation and LM text."""
    words = {t for u in data.target_train + data.valid for t in u.transcript}
    words.update(w for s in data.lm_text for w in s)
    return sorted(words)


def write_hyps(path: Path, utts: Sequence[Utterance], decoded: Sequence[tuple[list[str], float]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u, (words, score) in zip(utts, decoded):
            f.write(json.dumps({"id": u.id, "hyp_text": " ".join(words), "score": round(float(score), 6)}) + "\n")


def read_hyps(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"hypothesis file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = str(rec["hyp_text"]).split()
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed hypothesis line ({exc})") from None
    return out


# --------------------------------------------------------------------------
# alpha sweep


@dataclass
class SweepResult:
    valid_wer: dict[float, float]
    chosen_alpha: float
    note: str = ""
    models: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"valid_wer": {repr(a): w for a, w in self.valid_wer.items()}, "chosen_alpha": self.chosen_alpha,
                "note": self.note}


def choose_alpha(valid_wer: dict[float, float]) -> tuple[float, str]:
    """Argmin of validation WER, ties broken toward the smaller alpha."""
    if not valid_wer:
        raise ConfigError("alpha sweep needs at least one alpha")
    best = min(valid_wer.values())
    tied = sorted(a for a, w in valid_wer.items() if w == best)
    note = ""
    if len(tied) > 1:
        note = f"alphas {', '.join(repr(a) for a in tied)} tie at validation WER {100 * best:.1f}%; chose the smallest"
    return tied[0], note


def sweep_alpha(cfg: ExperimentConfig, alphas: Sequence[float] | None = None, data: CorpusData | None = None,
                run_dir: Path | None = None) -> SweepResult:
    """Adapt, fine-tune and decode the validation split once per alpha.

    The test split is never touched. The fine-tuned model of every alpha is
    kept on the result so the caller can reuse the chosen one.
    """
    alphas = list(cfg.experiment.sweep_alphas if alphas is None else alphas)
    if not alphas:
        raise ConfigError("alpha sweep needs at least one alpha")
    for a in alphas:
        cfg.mixup_config(a)
    if data is None:
        with stage("ingest", run_dir):
            data = prepare_corpus(cfg)
    vocab = vocabulary_for(cfg, data)
    refs = references(data.valid)
    scored = [u for u in data.valid if u.id in refs]
    valid_wer, models = {}, {}
    for a in alphas:
        with stage(f"adapt[alpha={a}]", run_dir):
            adapter = make_adapter(cfg, a).fit(data.source + data.target_train)
        with stage(f"finetune[alpha={a}]", run_dir):
            rec = make_recognizer(cfg, adapter.encoder_, vocab).fit(data.target_train)
        with stage(f"validate[alpha={a}]", run_dir):
            decoded = rec.decode(scored, lm=None)
            report = wer(refs, {u.id: w for u, (w, _) in zip(scored, decoded)}, "acmix", f"alpha={a}")
        valid_wer[a] = report.wer
        models[a] = (adapter, rec)
        logger.info("alpha %s: validation WER %.2f%%", a, 100 * report.wer)
        if run_dir is not None:
            tag = f"alpha{a:.1f}"
            adapter.loss_trace_.write_csv(run_dir / f"trace_adapt_{tag}.csv")
            rec.loss_trace_.write_csv(run_dir / f"trace_finetune_{tag}.csv")
            partial = {repr(k): v for k, v in valid_wer.items()}
            _write_json(run_dir / "sweep.json", {"valid_wer": partial, "done": len(valid_wer), "total": len(alphas)})
    chosen, note = choose_alpha(valid_wer)
    if note:
        logger.info(note)
    result = SweepResult(valid_wer, chosen, note, models)
    if run_dir is not None:
        _write_json(run_dir / "sweep.json", result.to_dict())
    return result


# --------------------------------------------------------------------------
# pipelines


@dataclass
class _System:
    name: str
    recognizer: CTCRecognizer
    condition: str = ""


def _adapt_once(cfg: ExperimentConfig, data: CorpusData, run_dir: Path) -> tuple[ACMixAdapter, SweepResult | None]:
    if cfg.experiment.sweep_alphas:
        sweep = sweep_alpha(cfg, data=data, run_dir=run_dir)
        return sweep.models[sweep.chosen_alpha][0], sweep
    with stage("adapt", run_dir):
        adapter = make_adapter(cfg).fit(data.source + data.target_train)
        adapter.loss_trace_.write_csv(run_dir / "trace_adapt.csv")
    return adapter, None


@dataclass
class FusionChoice:
    lm_weight: float
    word_bonus: float
    valid_wer: dict[tuple[float, float], float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lm_weight": self.lm_weight, "word_bonus": self.word_bonus,
                "valid_wer": [[w, b, e] for (w, b), e in self.valid_wer.items()]}


def tune_fusion(cfg: ExperimentConfig, recognizer: CTCRecognizer, valid: Sequence[Utterance],
                lm: ArpaLm) -> FusionChoice:
    """Pick lm_weight and word_bonus by LM-decoding the validation split.

    The grid is ``decode.sweep_lm_weights x decode.sweep_word_bonuses``; an
    empty list falls back to the single configured value. Ties go to the
    earliest grid point.
    """
    d = cfg.decode
    weights = list(d.sweep_lm_weights) or [d.lm_weight]
    bonuses = list(d.sweep_word_bonuses) or [d.word_bonus]
    if len(weights) * len(bonuses) == 1:
        return FusionChoice(weights[0], bonuses[0])
    refs = references(valid)
    scored = [u for u in valid if u.id in refs]
    lp = recognizer.predict_log_proba(scored)
    grid = {}
    for w in weights:
        for b in bonuses:
            out = decode_all(lp, recognizer.alphabet_, lm, d.beam, w, b)
            grid[(w, b)] = wer(refs, {u.id: h for u, (h, _) in zip(scored, out)}).wer
    best = min(grid, key=lambda k: grid[k])
    return FusionChoice(best[0], best[1], grid)


def _decode_and_score(cfg: ExperimentConfig, data: CorpusData, systems: list[_System], lm: ArpaLm,
                      run_dir: Path, log: AccessLog) -> tuple[list[WerReport], dict[str, FusionChoice]]:
    """The one place that loads the test split; decodes every system with and without the LM."""
    fusion = {}
    with stage("tune-fusion", run_dir):
        for s in systems:
            tag = "_".join(x for x in (s.name, s.condition) if x)
            fusion[tag] = tune_fusion(cfg, s.recognizer, data.valid, lm)
            logger.info("%s: lm_weight %s, word_bonus %s", tag, fusion[tag].lm_weight, fusion[tag].word_bonus)
        _write_json(run_dir / "fusion.json", {k: v.to_dict() for k, v in fusion.items()})
    with stage("decode", run_dir):
        test = data.load_test(log, "decode")
        refs = references(test)
        test = [u for u in test if u.id in refs]
        hyp_dir = run_dir / "hyps"
        hyp_dir.mkdir(exist_ok=True)
        decoded = {}
        for s in systems:
            lp = s.recognizer.predict_log_proba(test)
            f = fusion["_".join(x for x in (s.name, s.condition) if x)]
            for use_lm in (False, True):
                out = decode_all(lp, s.recognizer.alphabet_, lm if use_lm else None, cfg.decode.beam,
                                 f.lm_weight, f.word_bonus)
                tag = "_".join(x for x in (s.name, s.condition, "lm" if use_lm else "") if x)
                write_hyps(hyp_dir / f"{tag}.jsonl", test, out)
                decoded[(s.name, s.condition, use_lm)] = out
    with stage("evaluate", run_dir):
        reports = []
        for (name, cond, use_lm), out in decoded.items():
            hyps = {u.id: w for u, (w, _) in zip(test, out)}
            reports.append(wer(refs, hyps, SYSTEM_LABELS.get(name, name), cond, use_lm))
        _write_json(run_dir / "wer_reports.json", [report_to_dict(r) for r in reports])
    return reports, fusion


def _render_report(cfg: ExperimentConfig, reports: list[WerReport], sweep: SweepResult | None,
                   title: str, fusion: dict[str, FusionChoice] | None = None) -> tuple[str, str]:
    baseline = SYSTEM_LABELS.get(cfg.experiment.baseline, cfg.experiment.baseline)
    table = compare(reports, baseline if baseline in {r.system for r in reports} else None)
    lines = [f"# {cfg.experiment.name}: {title}", "", table.to_markdown().rstrip("\n"), ""]
    if sweep is not None:
        cells = ", ".join(f"{a!r}: {100 * w:.1f}" for a, w in sorted(sweep.valid_wer.items()))
        lines.append(f"Alpha sweep, validation WER [%] without LM: {cells}. Chosen alpha: {sweep.chosen_alpha!r}.")
        if sweep.note:
            lines.append(f"Note: {sweep.note}.")
        lines.append("")
    if fusion:
        cells = "; ".join(f"{k}: lm_weight {v.lm_weight!r}, word_bonus {v.word_bonus!r}" for k, v in fusion.items())
        lines.append(f"LM fusion weights chosen on validation: {cells}.")
        lines.append("")
    return "\n".join(lines), table.to_csv()


def _start(cfg: ExperimentConfig, root) -> tuple[Path, AccessLog]:
    cfg.validate()
    run_dir = make_run_dir(cfg.experiment.name, root)
    (run_dir / "config.ini").write_text(cfg.to_text())
    logger.info("run directory %s", run_dir)
    return run_dir, AccessLog(run_dir / "access.log")


def run_pipeline(cfg: ExperimentConfig, root=None) -> Path:
    """Ingest, adapt (AC-Mix only), fine-tune, decode, evaluate and report.

    Returns the run directory. ``report.md`` and ``report.csv`` depend only on
    the config, so rerunning from the frozen ``config.ini`` reproduces them.
    """
    run_dir, log = _start(cfg, root)
    with stage("ingest", run_dir):
        data = prepare_corpus(cfg)
    with stage("lm", run_dir):
        lm = build_lm(cfg, data, run_dir)
    vocab = vocabulary_for(cfg, data)
    systems, sweep = [], None
    for name in cfg.experiment.systems:
        if name == "acmix":
            adapter, sweep = _adapt_once(cfg, data, run_dir)
            if sweep is not None:
                rec = sweep.models[sweep.chosen_alpha][1]
            else:
                with stage("finetune[acmix]", run_dir):
                    rec = make_recognizer(cfg, adapter.encoder_, vocab).fit(data.target_train)
            save_encoder(run_dir / "ckpt" / "adapted", adapter.encoder_, adapter.spin_head_.state_arrays(),
                         {"stage": "adapt", "alpha": adapter.alpha})
        else:
            with stage(f"finetune[{name}]", run_dir):
                rec = make_recognizer(cfg, base_encoder(cfg), vocab).fit(data.target_train)
        rec.loss_trace_.write_csv(run_dir / f"trace_finetune_{name}.csv")
        save_asr(run_dir / "ckpt" / f"asr_{name}", rec.encoder_, rec.head_, rec.alphabet_,
                 {"stage": cfg.experiment.finetune_mode, "system": name})
        systems.append(_System(name, rec))
    reports, fusion = _decode_and_score(cfg, data, systems, lm, run_dir, log)
    with stage("report", run_dir):
        md, csv_text = _render_report(cfg, reports, sweep, "test WER", fusion)
        (run_dir / "report.md").write_text(md)
        (run_dir / "report.csv").write_text(csv_text)
    return run_dir


def nested_subsets(utts: Sequence[Utterance], subsets: Sequence[str], seed: int,
                   absolute_hours: bool = False) -> dict[str, list[Utterance]]:
    """Nested supervised subsets drawn along one seeded permutation.

    Each subset is the shortest prefix of the permutation whose duration
    reaches its target, so smaller subsets are prefixes of larger ones. By
    default targets are fractions of the pool (hours / full-set hours);
    with ``absolute_hours`` they are real hours of audio.
    """
    utts = list(utts)
    if not utts:
        raise DataError("no supervised utterances to draw subsets from")
    order = np.random.default_rng([seed, 17]).permutation(len(utts))
    dur = np.cumsum([utts[i].duration_s for i in order])
    total = float(dur[-1])
    out = {}
    for s in subsets:
        if s not in SUBSET_HOURS:
            raise ConfigError(f"unknown subset {s!r}")
        if s == "full":
            out[s] = [utts[i] for i in order]
            continue
        need = SUBSET_HOURS[s] * 3600.0 if absolute_hours else total * SUBSET_HOURS[s] / SUBSET_HOURS["full"]
        if need > total + 1e-9:
            raise ConfigError(f"subset {s} needs {need / 3600:.2f} h of supervised audio, only {total / 3600:.2f} h available")
        k = int(np.searchsorted(dur, need - 1e-9)) + 1
        out[s] = [utts[i] for i in order[: min(k, len(utts))]]
    return out


def subset_ablation(cfg: ExperimentConfig, root=None) -> Path:
    """Fine-tune every system on nested supervised subsets and emit the subset grid.

    Adaptation runs once (with the alpha sweep if configured) and is reused
    across subsets. Fine-tuning budgets follow the 150:75:15:2.5 ratios.
    """
    run_dir, log = _start(cfg, root)
    with stage("ingest", run_dir):
        data = prepare_corpus(cfg)
        pool = admit_supervised(data.target_train, cfg.corpus.min_duration_s)
        order = [s for s in SUBSET_HOURS if s in cfg.experiment.subsets]
        subsets = nested_subsets(pool, order, cfg.seed, absolute_hours=cfg.corpus.kind == "manifest")
        _write_json(run_dir / "subsets.json", {s: [u.id for u in v] for s, v in subsets.items()})
    with stage("lm", run_dir):
        lm = build_lm(cfg, data, run_dir)
    vocab = vocabulary_for(cfg, data)
    start = {}
    sweep = None
    for name in cfg.experiment.systems:
        if name == "acmix":
            adapter, sweep = _adapt_once(cfg, data, run_dir)
            start[name] = adapter.encoder_
        else:
            start[name] = base_encoder(cfg)
    systems = []
    for s in order:
        label = SUBSET_LABELS[s]
        for name in cfg.experiment.systems:
            with stage(f"finetune[{name}, {s}]", run_dir):
                rec = make_recognizer(cfg, start[name], vocab, s).fit(subsets[s])
                rec.loss_trace_.write_csv(run_dir / f"trace_finetune_{name}_{s}.csv")
            systems.append(_System(name, rec, label))
    reports, fusion = _decode_and_score(cfg, data, systems, lm, run_dir, log)
    with stage("report", run_dir):
        md, csv_text = _render_report(cfg, reports, sweep, "test WER by amount of supervised data", fusion)
        (run_dir / "report.md").write_text(md)
        (run_dir / "report.csv").write_text(csv_text)
    return run_dir
