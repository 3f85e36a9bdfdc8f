"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines print even
under output capture).
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from duet.classify import ClassifierHead, FinetuneConfig, finetune_loss_and_grads
from duet.corpus import TokenSequence, build_vocab
from duet.encoder import EncoderConfig, checkpoint_bytes, init_params, read_checkpoint, save_checkpoint
from duet.evaluation import dbi, export_embeddings, labels_path_for, macro_metrics
from duet.experiment import compare
from duet.io import matrix_bytes
from duet.miner import (
    embed_corpus,
    load_index,
    mine_lcc_pools,
    mine_ldm_pools,
    topk_retrieve,
    train_miner_classifier,
)
from duet.cli import run
from duet.objective import ContrastiveInstance, RowInstance, info_nce, row_info_nce
from duet.synth import SynthConfig, generate
from duet.trainer import BatchItem, lcc_candidates, ldm_candidates

import gradcheck
import oracles

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "synthetic.ini"


def report(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def test_criterion_1_gradient_fidelity(capsys):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    for name, views in (("lcc", ("lcc",)), ("ldm", ("ldm",)), ("sum", ("lcc", "ldm"))):
        worst[name] = max(gradcheck.pretrain_gradient_error(rng, views) for _ in range(100))
    worst["finetune"] = max(gradcheck.finetune_gradient_error(rng) for _ in range(100))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(capsys, 1, ok, f"max relative error over 4x100 instances: {detail}; {elapsed:.1f}s (limit 1e-4, 10s)")


def test_criterion_2_uniform_logits(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        K = int(rng.choice([1, 2, 15, 63, 94]))
        d = int(rng.integers(2, 9))
        tau = float(rng.choice([0.05, 0.1, 1.0]))
        u = rng.normal(size=d)
        anchor = rng.normal(size=d)
        # candidates are positive multiples of one direction, so every cosine is tied
        cands = [u * s for s in rng.uniform(0.1, 10.0, size=K + 1)]
        loss = info_nce(ContrastiveInstance(anchor, cands[0], cands[1:], tau)).value
        rows, _, _ = row_info_nce(anchor[None], np.vstack(cands), [RowInstance(0, list(range(K + 1)))], tau)
        worst = max(worst, abs(loss - math.log(K + 1)), abs(float(rows[0]) - math.log(K + 1)))
    for C in (2, 3, 11, 119):
        model = init_params(EncoderConfig(6, 3, 4, seed=C))
        heads = {"charges": ClassifierHead(np.zeros((4, C)), np.full(C, 0.7), list(range(C)))}
        seqs = [TokenSequence(np.array([2, 3, 4])), TokenSequence(np.array([2, 5]))]
        loss = finetune_loss_and_grads(model, heads, seqs, {"charges": np.array([0, C - 1])}, None, None)
        worst = max(worst, abs(loss["charges"] - math.log(C)))
    report(capsys, 2, worst <= 1e-9, f"max |loss - ln(K+1)| and |loss - ln C| = {worst:.1e} (limit 1e-9)")


def test_criterion_3_pool_invariants(capsys):
    cases, cat = generate(SynthConfig(per_charge=200))
    pick = np.random.default_rng(0).permutation(len(cases))[:1000]
    cases = [cases[i] for i in sorted(pick)]
    vocab = build_vocab(cases, cat, 5000)
    enc = EncoderConfig(len(vocab))
    lcc = mine_lcc_pools(embed_corpus(init_params(enc), cases, vocab))
    labels = {c.case_id: c.labels() for c in cases}
    lcc_ok = sum(
        labels[p.positive_id] == labels[p.anchor_id] and p.positive_id != p.anchor_id
        and len(set(p.negative_ids)) == 15 and p.anchor_id not in p.negative_ids
        and all(labels[n] != labels[p.anchor_id] for n in p.negative_ids)
        for p in lcc.pools
    )
    clf = train_miner_classifier(cases, cat, vocab, enc,
                                 FinetuneConfig(epochs=1, learning_rate=3e-3, tasks=("articles", "charges")))
    ldm = mine_ldm_pools(clf, cases)
    ldm_ok = sum(len(set(p.decision_negative_ids)) == 15 and len(p.decision_negative_ids) == 15
                 and labels[p.anchor_id] not in p.decision_negative_ids for p in ldm)
    counts_ok = True
    for b in (2, 8, 32):
        batch = [BatchItem(f"f{i}", f"p{i}", f"n{i}", (i, i), (i, -i - 1)) for i in range(b)]
        counts_ok &= all(len(n) == 3 * b - 2 for _, _, n in lcc_candidates(batch))
        counts_ok &= all(len(n) == 2 * b - 1 for _, _, n in ldm_candidates(batch, collapse=False)[0])
    ok = (lcc_ok == len(lcc.pools) == 1000 and not lcc.skipped and ldm_ok == len(ldm) == 1000 and counts_ok)
    report(capsys, 3, ok, f"LCC {lcc_ok}/{len(lcc.pools)} valid ({len(lcc.skipped)} skipped), "
                          f"LDM {ldm_ok}/{len(ldm)} valid, batch counts 3b-2/2b-1 {'ok' if counts_ok else 'wrong'}")


def test_criterion_4_oracles(capsys):
    from duet.miner import CorpusIndex
    rng = np.random.default_rng(99)
    topk_bad = 0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        M = rng.normal(size=(n, int(rng.integers(1, 9))))
        if rng.random() < 0.3:  # force exact ties
            M[int(rng.integers(n))] = M[0]
        ids = [f"c{i:03d}" for i in rng.permutation(n)]
        idx = CorpusIndex(ids, M, [(0, 0)] * n)
        anchor, k = ids[int(rng.integers(n))], int(rng.integers(1, n + 2))
        topk_bad += topk_retrieve(idx, anchor, k) != oracles.topk_oracle(ids, M, anchor, k)
    macro_err = 0.0
    for _ in range(100):
        C, n = int(rng.integers(1, 8)), int(rng.integers(1, 60))
        gold, pred = rng.integers(0, C, size=n).tolist(), rng.integers(0, C, size=n).tolist()
        avg = str(rng.choice(["present", "all"]))
        r, want = macro_metrics(gold, pred, C, averaging=avg), oracles.macro_oracle(gold, pred, C, avg)
        macro_err = max(macro_err, *(abs(getattr(r, k) - want[k]) for k in ("acc", "mp", "mr", "f1")))
    dbi_err = 0.0
    for _ in range(100):
        k, dim = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        n = int(rng.integers(k, 60))
        X = rng.normal(size=(n, dim)) * rng.uniform(0.1, 10)
        lab = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        got, want = dbi(X, lab, list(range(k))).dbi, oracles.dbi_oracle(X, lab, range(k))
        dbi_err = max(dbi_err, float(np.max(np.abs(got - np.array(want)) / np.maximum(1.0, np.abs(want)))))
    ok = topk_bad == 0 and macro_err <= 1e-9 and dbi_err <= 1e-9
    report(capsys, 4, ok, f"topk mismatches {topk_bad}/200, macro max err {macro_err:.1e}, "
                          f"DBI max err {dbi_err:.1e} (limit 1e-9)")


def test_criterion_5_synthetic_end_to_end(tmp_path, capsys):
    shutil.copy(CONFIG, tmp_path / "synthetic.ini")
    start = time.perf_counter()
    result = compare(tmp_path / "synthetic.ini")
    elapsed = time.perf_counter() - start
    b, p = result.baseline, result.pretrained
    positive = sum(v > 0 for v in result.dbi_reduction.values())
    ok = p.charge_f1 >= b.charge_f1 and p.charge_ce <= b.charge_ce and positive >= 4 and elapsed < 300
    report(capsys, 5, ok, f"charge F1 {b.charge_f1:.4f} -> {p.charge_f1:.4f}, mean CE {b.charge_ce:.4f} -> "
                          f"{p.charge_ce:.4f}, DBI reduced for {positive}/6 charges; {elapsed:.0f}s (limit 300s)")


ARTIFACTS = ("init.duet", "lcc_pools.jsonl", "ldm_pools.jsonl", "run/epoch-5.duet", "run/loss.csv",
             "finetuned.duet", "predictions.jsonl", "reports/eval.json", "reports/entropy.csv",
             "reports/entropy_summary.json", "reports/dbi.json")


def test_criterion_6_determinism(tmp_path, capsys):
    outputs = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        shutil.copy(CONFIG, root / "synthetic.ini")
        for command in ("synth-data", "ingest", "build-vocab", "embed", "mine-lcc", "mine-ldm", "pretrain",
                        "finetune", "predict", "eval", "entropy", "dbi"):
            assert run(command, root / "synthetic.ini") == 0, command
        outputs.append({a: (root / "work" / a).read_bytes() for a in ARTIFACTS})
    differ = [a for a in ARTIFACTS if outputs[0][a] != outputs[1][a]]
    report(capsys, 6, not differ, f"{len(ARTIFACTS) - len(differ)}/{len(ARTIFACTS)} checkpoints and reports "
                                  f"byte-identical across two runs" + (f"; differ: {differ}" if differ else ""))


def test_criterion_7_round_trips(tmp_path, capsys):
    failures = []
    rng = np.random.default_rng(3)
    for share in (True, False):
        model = init_params(EncoderConfig(50, 8, 12, seed=4, share_heads=share))
        extra = {"head.charges.W": rng.normal(size=(12, 5)).astype(np.float32).astype(np.float64)}
        save_checkpoint(model, tmp_path / "m.duet", extra, {"heads": {"charges": [0, 1, 2, 3, 4]}})
        back, extra_back, meta = read_checkpoint(tmp_path / "m.duet")
        same = all(np.array_equal(v, back.parameters()[k]) for k, v in model.parameters().items())
        same &= np.array_equal(extra_back["head.charges.W"], extra["head.charges.W"])
        same &= checkpoint_bytes(back, extra_back, meta) == (tmp_path / "m.duet").read_bytes()
        if not same:
            failures.append(f"checkpoint share_heads={share}")
    cases, _ = generate(SynthConfig(per_charge=20))
    vocab = build_vocab(cases, None, 500)
    model = init_params(EncoderConfig(len(vocab), 8, 12))
    export_embeddings(model, cases, vocab, tmp_path / "e.bin")
    idx = load_index(tmp_path / "e.bin", labels_path_for(tmp_path / "e.bin"))
    if matrix_bytes(idx.embeddings) != (tmp_path / "e.bin").read_bytes():
        failures.append("embedding matrix")
    if idx.case_ids != [c.case_id for c in cases] or idx.labels != [c.labels() for c in cases]:
        failures.append("embedding labels")
    report(capsys, 7, not failures, "checkpoint save/load and embedding export/import bitwise"
                                    + (f"; failed: {failures}" if failures else ""))
