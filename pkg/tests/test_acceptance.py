"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in
the terminal summary. The desk-scale experiment (criterion 9) takes hours
on a single core and is skipped when ``ACMIX_SKIP_DESK=1``.
"""

import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import log_softmax

from acmix import pipeline
from acmix.ctc import ctc_loss, min_frames
from acmix.encoder import Encoder, FeatureConfig, set_trainable
from acmix.eval import align_counts, compare, compare_reports, mapsswe, wer
from acmix.ctc import LabelAlphabet
from acmix.mixup import MixupConfig
from acmix.spin import SpinConfig, SpinHead, assign_codes, column_residual, swapped_loss
from acmix.train import Schedule, TrainConfig, adapt, finetune, lr_at
from conftest import desk_enabled, tiny_config
from gradcheck import spin_gradient_check
from invariants import fuzz_strategy
from oracles import central_diff, ctc_enum_nll, edit_distance, mapsswe_direct, max_rel_error
from table_fixture import BASELINES, grid_reports

RESULTS: list[str] = []
GOLDEN = Path(__file__).parent / "golden"


def record(number, name, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}")
    assert ok, detail


def test_01_ctc_matches_enumeration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, cases, infeasible = 0.0, 0, 0
    for T, n_lab, C in itertools.product(range(1, 7), range(0, 4), range(1, 4)):
        if n_lab and C < 2:
            continue
        for _ in range(20):
            lp = log_softmax(rng.normal(size=(T, C)) * 2, axis=1)
            labels = [int(x) for x in rng.integers(1, C, size=n_lab)] if n_lab else []
            got, ref = ctc_loss(lp, labels)[0], ctc_enum_nll(lp, labels)
            cases += 1
            if math.isinf(ref):
                infeasible += 1
                assert T < min_frames(labels)
                worst = max(worst, 0.0 if math.isinf(got) else math.inf)
            else:
                worst = max(worst, abs(got - ref))
    secs = time.perf_counter() - t0
    record(1, "CTC = path enumeration", worst <= 1e-10 and secs < 60,
           f"{cases} cases ({infeasible} infeasible), max |diff| {worst:.2e} (tol 1e-10), {secs:.1f} s (< 60 s)")


def test_02_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    sw = 0.0
    for _ in range(10):
        N, K = rng.integers(2, 9), rng.integers(2, 9)
        S1, S2 = rng.normal(size=(N, K)), rng.normal(size=(N, K))
        cfg = SpinConfig(K=int(K))
        q1, q2 = assign_codes(rng.uniform(-1, 1, (N, K)), cfg), assign_codes(rng.uniform(-1, 1, (N, K)), cfg)
        _, g1, g2 = swapped_loss(S1, S2, q1, q2)
        sw = max(sw, max_rel_error(g1, central_diff(lambda s: swapped_loss(s, S2, q1, q2)[0], S1)),
                 max_rel_error(g2, central_diff(lambda s: swapped_loss(S1, s, q1, q2)[0], S2)))
    e2e, names = spin_gradient_check(d_model=8, n_layers=2, last_n=2)
    ctc = 0.0
    for T, C, n in ((6, 4, 3), (10, 5, 4), (8, 3, 2), (12, 6, 5)):
        logits = rng.normal(size=(T, C))
        labels = [int(x) for x in rng.integers(1, C, size=n)]
        _, g = ctc_loss(log_softmax(logits, axis=1), labels)
        ctc = max(ctc, max_rel_error(g, central_diff(lambda z: ctc_loss(log_softmax(z, axis=1), labels)[0], logits)))
    secs = time.perf_counter() - t0
    ok = max(sw, e2e, ctc) < 1e-4 and secs < 300 and "frontend.weight" in names
    record(2, "float64 gradient checks", ok,
           f"swapped_loss {sw:.1e}, spin end-to-end over {len(names)} tensors {e2e:.1e}, ctc_loss {ctc:.1e} "
           f"(tol 1e-4), {secs:.1f} s (< 300 s)")


def test_03_sinkhorn_equipartition():
    rng = np.random.default_rng(0)
    row_err = col_ratio = worst_rise = rise_at = 0.0
    monotone = True
    for _ in range(100):
        N, K = int(rng.integers(2, 257)), int(rng.integers(2, 65))
        z = rng.normal(size=(N, 64))
        c = rng.normal(size=(K, 64))
        cos = (z / np.linalg.norm(z, axis=1, keepdims=True)) @ (c / np.linalg.norm(c, axis=1, keepdims=True)).T
        # float64 summation bound for the K column sums of N entries in [0, 1]
        rounding = (N - 1) * N * np.finfo(np.float64).eps
        prev = math.inf
        for it in range(1, 51):
            r = column_residual(assign_codes(cos, SpinConfig(K=K, sinkhorn_iters=it)))
            if r > prev:
                worst_rise, rise_at = max(worst_rise, r - prev), max(rise_at, prev)
                monotone &= r - prev <= rounding
            prev = r
        q = assign_codes(cos, SpinConfig(K=K, sinkhorn_iters=50))
        row_err = max(row_err, float(np.abs(q.sum(1) - 1).max()))
        col_ratio = max(col_ratio, float(np.abs(q.sum(0) - N / K).max()) / (1e-3 * N / K))
    ok = row_err <= 1e-6 and col_ratio <= 1.0 and monotone
    record(3, "Sinkhorn equipartition", ok,
           f"max row error {row_err:.1e} (tol 1e-6), max column error {col_ratio:.2e} x 1e-3*N/K (tol 1), "
           f"residual non-increasing up to float64 summation error: {monotone} "
           f"(largest rise {worst_rise:.1e}, only once the residual was <= {rise_at:.1e})")


def test_04_lr_anchors():
    large, base = Schedule(2500, 1e-5, 1e-7, 10_000), Schedule(200, 1e-4, 1e-6, 2000)
    got = [lr_at(large, 0), lr_at(large, 2500), lr_at(large, 10_000), lr_at(base, 200), lr_at(base, 2000)]
    want = [0.0, 1e-5, 1e-7, 1e-4, 1e-6]
    record(4, "lr schedule anchors", got == want, f"got {got}, want {want} (exact)")


def test_05_wer_and_mapsswe():
    rng = np.random.default_rng(0)
    words = ["a", "b", "c", "d"]
    mismatches = 0
    for i in range(1000):
        ref = list(rng.choice(words, size=rng.integers(1, 9)))
        hyp = list(rng.choice(words, size=rng.integers(0, 9)))
        rep = wer({"u": ref}, {"u": hyp})
        mismatches += sum(align_counts(ref, hyp)) != edit_distance(ref, hyp) or rep.scores[0].n_err != edit_distance(ref, hyp)
    d = [2, 1, 3, 0, 2, 1, 2, 1]
    res = mapsswe(d, [0] * len(d))
    z, p = mapsswe_direct(d)
    same = mapsswe([3, 1, 4, 1, 5], [3, 1, 4, 1, 5])
    ok = mismatches == 0 and abs(res.z - z) <= 1e-9 and abs(res.p_two_tailed - p) <= 1e-9 \
        and same.z == 0.0 and same.p_two_tailed == 1.0
    record(5, "WER and MAPSSWE", ok,
           f"{mismatches}/1000 edit-distance mismatches; Z {res.z:.12f} vs {z:.12f}, p {res.p_two_tailed:.3e} vs "
           f"{p:.3e} (tol 1e-9); identical systems Z={same.z}, p={same.p_two_tailed}")


def _groups_changed(before, after):
    return sorted({k.split("/")[0] for k in before if not np.array_equal(before[k], after[k])})


def test_06_freezing(tiny_pools):
    fc = FeatureConfig(n_mels=8)
    enc = set_trainable(Encoder(n_mels=8, d_model=16, n_layers=4, n_heads=2, seed=0), 2)
    before = enc.state_arrays()
    res = adapt(enc, SpinHead(16, SpinConfig(K=8, proj_dim=8)), MixupConfig(0.3, "Mixup3"), *tiny_pools,
                TrainConfig(200, 4, 0, 1e-3, 1e-5, 20), fc)
    adapted = _groups_changed(before, res.encoder.state_arrays())
    utts = tiny_pools[1]
    alphabet = LabelAlphabet(sorted({w for u in utts for w in u.transcript}))
    start = res.encoder.state_arrays()
    ft = finetune(res.encoder, "head_ft", utts, alphabet, TrainConfig(50, 4, 0, 1e-3, 1e-4, 5), fc, head_hidden=8)
    head_ft = _groups_changed(start, ft.encoder.state_arrays())
    ok = adapted == ["layer2", "layer3"] and head_ft == []
    record(6, "freezing", ok, f"200-step adapt (L=4, last_n=2) changed {adapted} (frontend, layer0, layer1 "
           f"bit-identical); head_ft changed {head_ft or 'nothing'}")


def test_07_mixup_fuzz():
    counts = {}
    for strategy in ("Mixup1", "Mixup2", "Mixup3", "Mixup4"):
        bad, n = fuzz_strategy(strategy, 1000, seed=7)
        counts[strategy] = (len(bad), n)
    ok = all(v == 0 for v, _ in counts.values())
    record(7, "mixup fuzz", ok, ", ".join(f"{s}: {v} violations in 1000 batches / {n} pairs" for s, (v, n) in counts.items()))


def test_08_pipeline_reproducible(tmp_path):
    a = pipeline.run_pipeline(tiny_config(), root=tmp_path / "a")
    b = pipeline.run_pipeline(tiny_config(), root=tmp_path / "b")
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in ("report.md", "report.csv")}
    record(8, "byte-identical reruns", all(same.values()), f"{same}")


@pytest.mark.slow
@pytest.mark.skipif(not desk_enabled(), reason="ACMIX_SKIP_DESK is set")
def test_09_desk_run(tmp_path):
    from desk import run_desk

    res = run_desk(Path(os.environ.get("ACMIX_DESK_DIR", tmp_path)))
    acmix, base = res.median("AC-Mix"), res.median("none")
    acmix_lm, base_lm = res.median("AC-Mix", True), res.median("none", True)
    ok = acmix <= base and res.wall_s < 7200
    record(9, "desk run", ok,
           f"median test WER over 3 seeds: AC-Mix {100 * acmix:.2f}% vs none {100 * base:.2f}% "
           f"(+LM: {100 * acmix_lm:.2f}% vs {100 * base_lm:.2f}%); "
           f"wall {res.wall_s / 3600:.2f} h (< 2 h) on {os.cpu_count()} core(s)")


def test_10_table_golden():
    reports = grid_reports()
    table = compare(reports, BASELINES)
    md, csv = table.to_markdown(), table.to_csv()
    header = md.splitlines()[0].strip("|").split("|")
    by_key = {(r.system, r.condition, r.lm): r for r in reports}
    marks_ok = True
    for (system, cond, lm), r in by_key.items():
        if system in BASELINES:
            continue
        want = ",".join("†" if compare_reports(r, by_key[(b, cond, lm)]).p_two_tailed < 0.01 else "−" for b in BASELINES)
        marks_ok &= f"{100 * r.wer:.1f}<sup>{want}</sup>" in md
    shape_ok = len(header) == 1 + 8 and len([x for x in md.splitlines() if x.startswith("| ")]) == 1 + 3
    golden_ok = md == (GOLDEN / "subset_grid.md").read_text() and csv == (GOLDEN / "subset_grid.csv").read_text()
    record(10, "subset grid table", shape_ok and marks_ok and golden_ok,
           f"4 subsets x 2 columns: {shape_ok}; superscripts match p < 0.01: {marks_ok}; golden match: {golden_ok}")
