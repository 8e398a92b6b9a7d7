import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from nowcast.constants import PRECIP_MAX_MM, VARIABLES
from nowcast.evaluation import (
    ContingencyCounts,
    MetricReport,
    ablate_variables,
    ablation_row,
    accumulate,
    binarize,
    contribution,
    evaluate_model,
    evaluate_predictions,
    score,
    to_rate,
)
from nowcast.models import Persistence
from nowcast.training import ArrayData
from oracles import confusion, scores

counts_st = st.tuples(*[st.integers(0, 10**6)] * 4)


def make_counts(tp, fp, tn, fn):
    return ContingencyCounts(0.5, tp, fp, tn, fn)


# ---------------------------------------------------------------- binarize


def test_binarize_examples():
    assert binarize(np.array([0.6]), 0.5)[0]
    assert not binarize(np.array([0.5]), 0.5)[0]
    with pytest.raises(ValueError):
        binarize(np.zeros(2), -0.1)


def test_binarize_random_map_oracle():
    m = np.random.default_rng(0).uniform(0, 1, (8, 8))
    mask = binarize(m, 0.5)
    for i in range(8):
        for j in range(8):
            assert mask[i, j] == (m[i, j] > 0.5)


def test_to_rate_units():
    assert to_rate(np.array([1.0]))[0] == pytest.approx(PRECIP_MAX_MM * 12)
    assert to_rate(np.array([-0.2]))[0] == 0.0


# -------------------------------------------------------------- accumulate


def test_accumulate_examples():
    ones, zeros = np.ones((2, 2), bool), np.zeros((2, 2), bool)
    assert accumulate(ones, ones, ContingencyCounts(0.5)).tp == 4
    c = accumulate(ones, zeros, ContingencyCounts(0.5))
    assert (c.fp, c.tp, c.tn, c.fn) == (4, 0, 0, 0)
    with pytest.raises(ValueError):
        accumulate(ones, np.ones((2, 3), bool), ContingencyCounts(0.5))


def test_accumulation_order_independent():
    rng = np.random.default_rng(1)
    pairs = [(rng.random((16, 16)) > 0.5, rng.random((16, 16)) > 0.4) for _ in range(50)]
    a, b = ContingencyCounts(0.5), ContingencyCounts(0.5)
    for p, t in pairs:
        a.accumulate(p, t)
    for i in rng.permutation(50):
        b.accumulate(*pairs[i])
    assert a == b
    assert a.total == 50 * 256
    # split, score in parts and merge
    halves = [ContingencyCounts(0.5), ContingencyCounts(0.5)]
    for i, (p, t) in enumerate(pairs):
        halves[i % 2].accumulate(p, t)
    assert halves[0] + halves[1] == a


# ------------------------------------------------------------------- score


def test_hand_case():
    s = score(make_counts(3, 1, 4, 2))
    assert (s["f1"], s["csi"], s["hss"], s["mcc"]) == pytest.approx((0.666667, 0.5, 0.4, 0.408248), abs=1e-6)
    assert s["undefined"] == []


def test_perfect_and_degenerate():
    s = score(make_counts(5, 0, 7, 0))
    assert [s[k] for k in ("f1", "csi", "hss", "mcc")] == [1.0, 1.0, 1.0, 1.0]
    d = score(make_counts(0, 0, 9, 0))
    assert d["f1"] == d["csi"] == d["mcc"] == 0.0
    assert {"f1", "csi", "mcc"} <= set(d["undefined"])


def test_brute_force_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(200):
        p = rng.random((16, 16)) > rng.uniform(0, 1)
        t = rng.random((16, 16)) > rng.uniform(0, 1)
        c = ContingencyCounts(0.5).accumulate(p, t)
        ref = scores(*confusion(p, t))
        got = score(c)
        for k in ref:
            assert abs(got[k] - ref[k]) <= 1e-12


@given(counts_st)
def test_score_ranges(c):
    s = score(make_counts(*c))
    assert 0 <= s["csi"] <= 1 and 0 <= s["f1"] <= 1
    assert s["hss"] <= 1 + 1e-12 and -1 - 1e-12 <= s["mcc"] <= 1 + 1e-12
    tp, fp, tn, fn = c
    if tp + fp + fn > 0:
        assert s["csi"] <= s["f1"] + 1e-15


@given(counts_st)
def test_swap_symmetry(c):
    tp, fp, tn, fn = c
    a, b = score(make_counts(tp, fp, tn, fn)), score(make_counts(tp, fn, tn, fp))
    assert a["mcc"] == pytest.approx(b["mcc"], abs=1e-12)
    assert a["hss"] == pytest.approx(b["hss"], abs=1e-12)


def test_aggregate_then_score_equals_concatenated():
    rng = np.random.default_rng(3)
    preds = rng.uniform(0, 0.05, (6, 1, 64, 64))
    targets = rng.uniform(0, 0.05, (6, 1, 64, 64))
    whole = evaluate_predictions(preds, targets, (0.5, 10.0))
    parts = [evaluate_predictions(preds[i : i + 2], targets[i : i + 2], (0.5, 10.0)) for i in range(0, 6, 2)]
    for t in (0.5, 10.0):
        merged = ContingencyCounts(t)
        for r in parts:
            merged = merged + ContingencyCounts(t, **{k: v for k, v in r.counts[t].items()})
        assert merged.tp == whole.counts[t]["tp"] and merged.total == 6 * 64 * 64
        assert score(merged)["f1"] == whole.scores[t]["f1"]


def test_report_roundtrip_and_rows():
    rng = np.random.default_rng(4)
    r = evaluate_predictions(rng.uniform(0, 0.1, (2, 1, 64, 64)), rng.uniform(0, 0.1, (2, 1, 64, 64)), model="m")
    back = MetricReport.from_dict(r.to_dict())
    assert back == r
    rows = r.table_rows()
    assert [row["threshold_mmh"] for row in rows] == ["0.5", "10", "20"]
    assert rows[0]["mse"] != "-" and rows[1]["mse"] == rows[2]["mse"] == "-"


def test_persistence_perfect_when_target_is_last_input():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 0.1, (3, 12, 64, 64)).astype(np.float32)
    data = ArrayData(x, x[:, -1:])
    r = evaluate_model(Persistence(), data)
    assert r.mse == 0.0
    for t in r.thresholds:
        s = r.scores[t]
        if not s["undefined"]:
            assert [s[k] for k in ("f1", "csi", "hss", "mcc")] == [1.0] * 4


# ---------------------------------------------------------------- ablation


def test_contribution_arithmetic():
    d, pct = contribution(0.80, 0.76)
    assert d == pytest.approx(0.04) and pct == pytest.approx(5.0)
    d, pct = contribution(0.7808, 0.7638)
    assert round(d, 4) == 0.0170 and round(pct, 2) == 2.18
    row = ablation_row("humidity", 0.7808, 0.6, 0.7638, 0.58).row()
    assert row["f1_contribution"] == "2.18%" and row["delta_f1"] == "0.0170"


class StubFusion(nn.Module):
    """Adds a weighted mean of each station variable to the last frame; humidity weight is zero."""

    needs_station = True
    needs_krige = False

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([0.02, 0.0, 0.01, 0.03, 0.0, 0.0, 0.01, 0.02]))

    def forward(self, precip, station):
        bias = (station.mean(dim=(1, 3)) * self.w).sum(dim=1)
        return precip[:, -1:] + bias[:, None, None, None]


def test_dead_input_gives_exact_zero_delta():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 0.05, (4, 12, 64, 64)).astype(np.float32)
    data = ArrayData(x, x[:, -1:] * 1.1, rng.normal(1.0, 1.0, (4, 22, 8, 12)))
    rows = ablate_variables(StubFusion(), data, 0.5)
    assert rows[0].variable is None and rows[0].delta_f1 is None
    by_name = {r.variable: r for r in rows[1:]}
    assert set(by_name) == set(VARIABLES)
    assert by_name["humidity"].delta_f1 == 0.0 and by_name["humidity"].delta_csi == 0.0
    deltas = [r.delta_f1 for r in rows[1:]]
    assert deltas == sorted(deltas, reverse=True)


def test_ablation_rejects_bad_inputs():
    data = ArrayData(np.zeros((1, 12, 64, 64)), np.zeros((1, 1, 64, 64)), np.zeros((1, 22, 8, 12)))
    with pytest.raises(ValueError):
        ablate_variables(StubFusion(), data, 0.5, ("rainbow",))
    with pytest.raises(ValueError):
        ablate_variables(Persistence(), data)
