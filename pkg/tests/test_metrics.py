import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtaffect.gradcheck import check_gradients
from mtaffect.metrics import EPS, REGIONS, ccc, ccc_loss, mse, pcc, regional_mse, score, write_report
from mtaffect.tensor import Tensor, parameter, precision


# Pure-python two-pass oracles: first pass for means, second for centred moments.
def _moments(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return mx, my, vx, vy, cxy


def ccc_oracle(x, y):
    mx, my, vx, vy, cxy = _moments(x, y)
    return 2 * cxy / (vx + vy + (mx - my) ** 2 + EPS)


def pcc_oracle(x, y):
    _, _, vx, vy, cxy = _moments(x, y)
    return cxy / (math.sqrt(vx * vy) + EPS)


def mse_oracle(x, y):
    return sum((a - b) ** 2 for a, b in zip(x, y)) / len(x)


def random_pairs(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 300))
        x = rng.normal(rng.uniform(-1, 1), rng.uniform(0.01, 2), size=n)
        y = rng.uniform(-0.5, 0.5) * x + rng.normal(rng.uniform(-1, 1), rng.uniform(0.01, 2), size=n)
        yield x.tolist(), y.tolist()


def test_metrics_match_two_pass_oracles():
    for x, y in random_pairs():
        assert abs(ccc(x, y) - ccc_oracle(x, y)) < 1e-9
        assert abs(pcc(x, y) - pcc_oracle(x, y)) < 1e-9
        assert abs(mse(x, y) - mse_oracle(x, y)) < 1e-9


def test_ccc_of_identical_vectors_is_one():
    # with the stabiliser the exact value is 2v / (2v + EPS)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.normal(size=50)
        v = float(np.var(x))
        assert abs(ccc(x, x) - 1.0) <= EPS / (2 * v) + 1e-15
    assert ccc([0.0, 10.0], [0.0, 10.0]) == 50.0 / (50.0 + EPS)


def test_anticorrelated_hand_case():
    # unit variances: -2 / (2 + EPS) and -1 / (1 + EPS)
    assert ccc([-1.0, 1.0], [1.0, -1.0]) == -2.0 / (2.0 + EPS)
    assert pcc([-1.0, 1.0], [1.0, -1.0]) == -1.0 / (1.0 + EPS)
    assert ccc([-1.0, 1.0], [1.0, -1.0]) == pytest.approx(-1.0, abs=1e-8)


def test_hand_case_with_offset():
    # x = (0, 2), y = (1, 3): cov 1, var 1 each, mean gap 1 -> 2 / 3
    assert ccc([0.0, 2.0], [1.0, 3.0]) == pytest.approx(2.0 / (3.0 + EPS), abs=1e-15)
    assert pcc([0.0, 2.0], [1.0, 3.0]) == pytest.approx(1.0, abs=1e-8)


def test_degenerate_inputs_return_zero():
    assert ccc([0.5] * 10, [0.5] * 10) == 0.0
    assert ccc([0.5] * 10, [0.2] * 10) == 0.0
    assert pcc([1.0] * 4, [1.0, 2.0, 3.0, 4.0]) == 0.0
    assert ccc(np.linspace(0, 1, 10), np.full(10, 0.3)) == 0.0
    assert ccc([0.4] * 6, [0.4] * 6) == 0.0


def test_input_validation():
    with pytest.raises(ValueError):
        ccc([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        ccc([1.0], [1.0])
    with pytest.raises(ValueError):
        mse([], [])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-5, 5)),
       st.floats(0.1, 10), st.floats(-3, 3))
def test_ccc_properties(x, scale, shift):
    y = x * 0.5 + 0.1
    c = ccc(x, y)
    p = pcc(x, y)
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
    assert abs(c) <= abs(p) + 1e-9
    assert ccc(x, y) == pytest.approx(ccc(y, x), abs=1e-12)
    # pcc is invariant to positive affine maps and ccc to a joint one, up to the EPS term
    vx = float(np.var(x))
    if vx > 1e-6:
        vy = float(np.var(y))
        tol = 4 * EPS / (min(scale, 1.0) ** 2 * math.sqrt(vx * vy)) + 1e-12
        assert pcc(x, scale * y + shift) == pytest.approx(p, abs=tol)
        tol = 4 * EPS / (min(scale, 1.0) ** 2 * (vx + vy)) + 1e-12
        assert ccc(scale * x + shift, scale * y + shift) == pytest.approx(c, abs=tol)


def test_ccc_loss_value_and_gradient():
    rng = np.random.default_rng(2)
    labels = np.stack([rng.uniform(-1, 1, 30), rng.uniform(0, 1, 30)], axis=1)
    with precision("float64"):
        pred = parameter(labels + rng.normal(0, 0.3, size=labels.shape), "pred")
        loss = ccc_loss(labels, pred)
        expected = 1.0 - 0.5 * (ccc(labels[:, 0], pred.data[:, 0]) + ccc(labels[:, 1], pred.data[:, 1]))
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        errs = check_gradients(lambda: ccc_loss(labels, pred), [pred], h=1e-6, max_entries=None)
    assert errs["pred"] < 1e-6


def test_ccc_loss_perfect_prediction_is_zero():
    labels = np.array([[0.1, 0.2], [0.5, 0.9], [-0.4, 0.3]])
    loss = ccc_loss(labels, Tensor(labels.copy(), dtype=np.float64))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-7)


def test_regional_mse_assignment_and_empty_regions():
    labels = np.array([[0.5, 0.2], [0.5, 0.7], [-0.5, 0.2], [1.0, 1.0]])
    preds = labels + np.array([[0.1, 0.0], [0.0, 0.2], [0.3, 0.3], [0.0, 0.0]])
    rows = {r["region"]: r for r in regional_mse(labels, preds)}
    assert [r["region"] for r in regional_mse(labels, preds)] == [r[0] for r in REGIONS]
    assert rows["V[0,1] A[0,0.5)"]["count"] == 1
    assert rows["V[0,1] A[0,0.5)"]["mse_v"] == pytest.approx(0.01)
    assert rows["V[0,1] A[0.5,1]"]["count"] == 2   # 1.0 / 1.0 sits on the closed upper edge
    assert rows["V[-1,0) A[0.5,1]"] == {"region": "V[-1,0) A[0.5,1]", "count": 0, "mse_v": None, "mse_a": None}
    assert rows["V[-1,1] A[0,1]"]["count"] == 4


def test_score_and_report(tmp_path):
    labels = np.array([[0.1, 0.2], [0.5, 0.9], [-0.4, 0.3], [0.0, 0.5]])
    preds = labels * 0.8
    s = score(labels, preds)
    assert s.mean_ccc == pytest.approx((s.ccc_v + s.ccc_a) / 2)
    write_report(tmp_path / "r.json", s, model="x")
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["ccc_v"] == s.ccc_v and payload["model"] == "x" and len(payload["regional"]) == 5
