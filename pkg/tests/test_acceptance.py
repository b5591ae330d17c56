"""The eight acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary (see conftest.py) and when this file is run directly with
``python3 tests/test_acceptance.py``.

Artifacts (training history, ablation CSVs) are written under
``artifacts/acceptance`` in the repository root for inspection.
"""
from __future__ import annotations

import csv
import io
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402
from semiopen_vqa import tensor as T  # noqa: E402
from semiopen_vqa.checkpoint import dumps_checkpoint, loads_checkpoint  # noqa: E402
from semiopen_vqa.data import encode_dataset, generate_dataset  # noqa: E402
from semiopen_vqa.experiments import (ABLATION_HEADER, MEDIAN_HEADER, ablate, ablation_config,  # noqa: E402
                                      ablation_medians, ablation_trend, reference_config, write_csv)
from semiopen_vqa.gradcheck import _tiny_model_config, run_suite  # noqa: E402
from semiopen_vqa.model import VqaModel, asymmetric_loss, one_hot  # noqa: E402
from semiopen_vqa.train import EpochRecord, TrainState, evaluate, train  # noqa: E402

ARTIFACTS = Path(__file__).resolve().parent.parent / "artifacts" / "acceptance"
RESULTS: dict[int, tuple[bool, str]] = {}
NAMES = {
    1: "gradient fidelity",
    2: "equation fidelity",
    3: "loss unit values",
    4: "learnability",
    5: "ablation trend",
    6: "dataset soundness",
    7: "determinism & persistence",
    8: "chance-level sanity",
}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    print(summary_lines([n])[0])
    assert ok, f"criterion {n} ({NAMES[n]}) failed: {detail}"


def summary_lines(which=None) -> list[str]:
    out = []
    for n in sorted(which or RESULTS):
        ok, detail = RESULTS[n]
        out.append(f"[{'PASS' if ok else 'FAIL'}] {n}. {NAMES[n]}: {detail}")
    return out


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EpochRecord.HEADER)
    for rec in history:
        w.writerow(rec.row())
    return buf.getvalue()


def encoded(cfg, n, seed):
    samples, vocab = generate_dataset(n, grid_size=4, seed=seed)
    return encode_dataset(samples, vocab, cfg.model.max_question_tokens), vocab


# ---------------------------------------------------------------------------- 1

def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    reports = run_suite(h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and elapsed < 60.0
    record(1, ok, f"{len(reports)} checks, worst rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)"
           + (f"; failed: {failed}" if failed else ""))


# ---------------------------------------------------------------------------- 2

def test_2_equation_fidelity():
    worst = 0.0
    for seed, kw in enumerate([{}, {"answer_embed_dim": 6}, {"num_heads": 1, "fusion_layers": 1}]):
        cfg = _tiny_model_config(plain_eq2=True, decoder_layers=2, activation="gelu", seed=10 + seed, **kw)
        model = VqaModel(cfg)
        rng = np.random.default_rng(seed)
        for _ in range(3):
            image = rng.integers(0, 2, size=(cfg.num_image_tokens, cfg.cell_features)).astype(float)
            qids = rng.integers(0, cfg.question_vocab_size, size=cfg.max_question_tokens)
            got = T.sigmoid(model.logits(image, qids)).data
            ref = np.asarray(oracles.model_probs(model, image, qids))
            worst = max(worst, float(np.abs(got - ref).max()))
    record(2, worst <= 1e-9, f"max abs error {worst:.2e} vs explicit-loop oracle (tol 1e-9), L=2")


# ---------------------------------------------------------------------------- 3

def test_3_loss_unit_values():
    pos = asymmetric_loss(T.Tensor([0.8]), [1.0], 1.0, 4.0).item()
    neg = asymmetric_loss(T.Tensor([0.2]), [0.0], 1.0, 4.0).item()
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(16, 7))
    y = one_hot(rng.integers(0, 7, 16), 7)
    bce = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())
    asl0 = asymmetric_loss(T.Tensor(p), y, 0.0, 0.0).item()
    ok = abs(pos - 0.0446287) <= 1e-6 and abs(neg - 0.000357) <= 1e-6 and abs(asl0 - bce) <= 1e-12 * bce
    record(3, ok, f"positive {pos:.7f} (0.0446287), negative {neg:.7f} (0.000357), "
                  f"gamma=0 vs BCE diff {abs(asl0 - bce):.1e}")


# ---------------------------------------------------------------------------- 4

def test_4_learnability():
    cfg = reference_config()
    train_set, vocab = encoded(cfg, 5000, seed=1)
    val_set, _ = encoded(cfg, 1000, seed=2)
    cfg = cfg.fitted_to(vocab, 4)
    model = VqaModel(cfg.model)
    state = TrainState(lr=cfg.lr, seed=cfg.shuffle_seed)
    history = []
    t0 = time.perf_counter()
    reached = None
    # one epoch per call is identical to a single multi-epoch call (state carries the epoch counter)
    for _ in range(cfg.epochs):
        history += train(model, train_set, val_set, 1, cfg.batch_size, state).history
        if history[-1].val.overall_acc >= 0.95:
            reached = history[-1]
            break
    elapsed = time.perf_counter() - t0
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    (ARTIFACTS / "learnability_history.csv").write_text(history_csv(history))
    best = max(r.val.overall_acc for r in history)
    ok = reached is not None and elapsed < 600
    where = f"epoch {reached.epoch}" if reached else f"not reached in {cfg.epochs} epochs"
    record(4, ok, f"val overall {best:.4f} (>= 0.95) at {where}, {elapsed:.0f}s (< 600s), "
                  f"C={cfg.model.num_answer_classes}")


# ---------------------------------------------------------------------------- 5

def test_5_ablation_trend():
    cfg = ablation_config()
    train_set, vocab = encoded(cfg, 3000, seed=11)
    val_set, _ = encoded(cfg, 1000, seed=12)
    cfg = cfg.fitted_to(vocab, 4)
    t0 = time.perf_counter()
    rows = ablate(cfg, train_set, val_set, seeds=range(5))
    medians = ablation_medians(rows)
    ARTIFACTS.mkdir(parents=True, exist_ok=True)
    write_csv(ARTIFACTS / "ablation.csv", ABLATION_HEADER, rows)
    write_csv(ARTIFACTS / "ablation_medians.csv", MEDIAN_HEADER, medians)
    cfg.save(ARTIFACTS / "ablation_config.json")
    checks = ablation_trend(medians)
    held = sum(ok for _, ok in checks)
    cells = ", ".join(f"#{m['row']} {float(m['median_overall_acc']):.3f}" for m in medians)
    record(5, held >= 4 and len(rows) == 30,
           f"{held}/6 comparisons hold (need 4); medians {cells}; {time.perf_counter() - t0:.0f}s")


# ---------------------------------------------------------------------------- 6

def test_6_dataset_soundness():
    samples, _ = generate_dataset(10_000, grid_size=4, seed=2024)
    agree = sum(oracles.answer_from_grid(s.image.to_codes(), 4, s.question_text) == s.answer for s in samples)
    yn = Counter(s.answer for s in samples if s.qtype == "closed")
    imbalance = abs(yn["yes"] - yn["no"]) / (yn["yes"] + yn["no"])
    ok = agree == len(samples) and imbalance <= 0.05
    record(6, ok, f"oracle agreement {agree}/{len(samples)}; yes {yn['yes']} / no {yn['no']} "
                  f"(imbalance {imbalance:.3f} <= 0.05)")


# ---------------------------------------------------------------------------- 7

def test_7_determinism_and_persistence():
    cfg = reference_config().with_overrides(feature_dim=32, answer_embed_dim=32, num_heads=2, fusion_layers=1,
                                            decoder_layers=1, dtype="float64")
    train_set, vocab = encoded(cfg, 600, seed=5)
    val_set, _ = encoded(cfg, 500, seed=6)
    cfg = cfg.fitted_to(vocab, 4)

    def run():
        model = VqaModel(cfg.model)
        state = TrainState(lr=cfg.lr, seed=7)
        result = train(model, train_set, val_set, 3, cfg.batch_size, state)
        return model, state, history_csv(result.history)

    m1, s1, h1 = run()
    _, _, h2 = run()
    before = evaluate(m1, val_set)
    loaded, _ = loads_checkpoint(dumps_checkpoint(m1, s1))
    after = evaluate(loaded, val_set)
    same_params = all(loaded.state_dict()[k].tobytes() == v.tobytes() for k, v in m1.state_dict().items())
    same_eval = (after.correct_open, after.correct_closed, after.confusion.tobytes()) == \
        (before.correct_open, before.correct_closed, before.confusion.tobytes())
    ok = h1 == h2 and same_params and same_eval
    record(7, ok, f"history CSVs identical: {h1 == h2}; checkpoint params bit-exact: {same_params}; "
                  f"evaluation identical after reload: {same_eval}")


# ---------------------------------------------------------------------------- 8

def test_8_chance_level():
    cfg = reference_config()
    ds, vocab = encoded(cfg, 2000, seed=3)
    cfg = cfg.fitted_to(vocab, 4)
    n_open_classes = len(vocab.open_classes)
    rep = evaluate(VqaModel(cfg.model), ds)
    target_open = 1.0 / n_open_classes
    ok = abs(rep.closed_acc - 0.5) <= 0.1 and abs(rep.open_acc - target_open) <= 0.05
    record(8, ok, f"closed {rep.closed_acc:.3f} (0.5 +/- 0.1), open {rep.open_acc:.3f} "
                  f"(1/{n_open_classes} = {target_open:.3f} +/- 0.05), n={len(ds)}")


if __name__ == "__main__":
    # the pass/fail lines are printed by the terminal-summary hook in conftest.py
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
