import json
import math

import numpy as np
import pytest

from builders import random_table, tiny_config, tiny_model
from hcsc.data import Document, SynthSpec, synth_dataset
from hcsc.metrics import (EvalReport, accuracy, bucket_of, buckets_csv, confusion, dump_attention,
                          per_frequency_accuracy, rmse, timing_csv, timing_report, to_jsonl, variant_config,
                          weibull_curve, weibull_curve_csv)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([2, 2], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 1]) == 0.75


def test_rmse_examples():
    assert rmse([4, 2], [4, 2]) == 0.0
    assert rmse([3, 3], [1, 5]) == 2.0
    assert rmse([2], [3]) == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        accuracy([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def test_metrics_match_definitions_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, c = int(rng.integers(1, 200)), int(rng.integers(2, 11))
        preds, golds = rng.integers(1, c + 1, size=n), rng.integers(1, c + 1, size=n)
        hits = sum(1 for p, g in zip(preds.tolist(), golds.tolist()) if p == g)
        sq = sum((p - g) ** 2 for p, g in zip(preds.tolist(), golds.tolist()))
        assert accuracy(preds, golds) == hits / n
        assert rmse(preds, golds) == math.sqrt(sq / n)


def test_confusion_counts():
    m = confusion([1, 2, 2], [1, 1, 2], 3)
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 0]]


def test_bucket_rule():
    assert bucket_of(0) == bucket_of(9) == 0
    assert bucket_of(10) == 1
    assert bucket_of(100) == bucket_of(250) == 10


def test_buckets_single_frequency():
    rows = per_frequency_accuracy([1, 2, 1], [1, 1, 1], [5, 5, 5])
    assert len(rows) == 11
    assert rows[0].n == 3 and rows[0].accuracy == pytest.approx(2 / 3)
    assert all(r.n == 0 and r.accuracy is None for r in rows[1:])
    assert rows[-1].label == "100+" and rows[0].label == "0-9"


def test_bucket_weighted_accuracy_equals_overall():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 300))
        preds, golds = rng.integers(1, 6, size=n), rng.integers(1, 6, size=n)
        freqs = rng.integers(0, 300, size=n)
        rows = per_frequency_accuracy(preds, golds, freqs)
        assert sum(r.n for r in rows) == n
        weighted = sum(r.n * r.accuracy for r in rows if r.n) / n
        assert abs(weighted - accuracy(preds, golds)) < 1e-12


def test_eval_report_and_csv():
    report = EvalReport.build([1, 2, 3, 3], [1, 2, 3, 1], 3, user_freqs=[0, 15, 15, 120], prod_freqs=[1, 1, 1, 1])
    assert report.summary() == {"n": 4, "accuracy": 0.75, "rmse": 1.0}
    text = buckets_csv(report.user_buckets, "user", comment="seed = 1")
    lines = text.splitlines()
    assert lines[0] == "# seed = 1"
    assert lines[1] == "side,bucket,low,high,n,accuracy"
    assert "user,10-19,10,20,2,1.0" in lines
    assert "user,100+,100,,1,0.0" in lines


def test_perfect_and_constant_predictors():
    golds = np.repeat(np.arange(1, 6), 20)
    assert EvalReport.build(golds, golds, 5).summary()["rmse"] == 0.0
    assert accuracy(np.full(100, 3), golds) == 0.2


# --- Weibull curve ----------------------------------------------------------------


def test_weibull_curve_values():
    rng = np.random.default_rng(2)
    table = random_table(rng, 3, 4)
    table.shape_k.values[:] = 1.0
    table.scale_lam.values[:] = 1.0
    curve = dict(weibull_curve(table, [0.0, 1.0, 2.0]))
    assert curve[0.0] == 0.0
    assert curve[1.0] == pytest.approx(0.632121, abs=1e-6)


def test_weibull_curve_is_monotone_and_bounded():
    rng = np.random.default_rng(3)
    table = random_table(rng, 3, 6)
    table.shape_k.values = rng.normal(size=6)  # includes non-positive entries
    grid = np.linspace(0, 20, 200)
    g = np.array([v for _, v in weibull_curve(table, grid)])
    assert np.all(np.diff(g) >= 0) and np.all((g >= 0) & (g <= 1))
    text = weibull_curve_csv({"user": weibull_curve(table, grid[:3])})
    assert text.splitlines()[0] == "side,frequency,gate"
    with pytest.raises(ValueError):
        weibull_curve(table, [1.0, 0.5])


# --- attention dump ---------------------------------------------------------------------


def test_dump_attention_records():
    model, _, corpus = tiny_model()
    cold = Document("stranger", corpus.documents[0].product_id, 2, ("t1", "t2", "t3"))
    docs = [cold] + corpus.documents[:3]
    records = dump_attention(model, docs, batch_size=2)
    assert len(records) == 4
    assert records[0]["gate_user"] == 0.0 and records[0]["user_frequency"] == 0
    assert records[1]["gate_user"] > 0.0
    for rec, doc in zip(records, docs):
        assert len(rec["tokens"]) == len(doc.tokens)
        for key in ("attn_d_user", "attn_s_user", "attn_d_prod", "attn_s_prod"):
            assert len(rec[key]) == len(doc.tokens)
            assert abs(sum(rec[key]) - 1.0) < 1e-6
        assert 1 <= rec["predicted"] <= 3 and rec["gold"] == doc.label
    lines = to_jsonl(records, header={"seed": 3}).splitlines()
    assert json.loads(lines[0]) == {"header": {"seed": 3}}
    assert json.loads(lines[1])["user"] == "stranger"


# --- timing ------------------------------------------------------------------------------


def test_variant_config_keeps_dimension():
    cfg = tiny_config()
    for mode in ("cnn-only", "rnn-only", "hybrid"):
        assert variant_config(cfg, mode).hidden_dim == cfg.hidden_dim


def test_timing_report_shape():
    train, _, _ = synth_dataset(SynthSpec(docs=12, seed=0))
    rows = timing_report(tiny_config(num_classes=4), train, n_batches=1)
    assert [r.mode for r in rows] == ["cnn-only", "rnn-only", "hybrid"]
    assert all(r.seconds > 0 and r.batches == 1 for r in rows)
    assert timing_csv(rows).splitlines()[0] == "mode,batches,seconds,batches_per_second,seconds_per_batch"
    with pytest.raises(ValueError):
        timing_report(tiny_config(), train, n_batches=0)
