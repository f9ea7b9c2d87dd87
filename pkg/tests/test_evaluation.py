import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import full_sort_recall
from slidecap.encoders import normalize
from slidecap.errors import InvalidKError, ShapeError
from slidecap.evaluation import (
    IMAGE_TO_TEXT,
    TEXT_TO_IMAGE,
    RecallReport,
    format_cell,
    mean_and_stderr,
    parse_report_json,
    recall_at_k,
    render_report,
    similarity_matrix,
)


def test_identity_embeddings_recall_everything():
    e = np.eye(6)
    sim = similarity_matrix(e, e)
    assert recall_at_k(sim, 1) == 1.0


def test_random_orthonormal_pairs():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(10, 10)))
    sim = similarity_matrix(q, q)
    for k in (1, 3, 10):
        assert recall_at_k(sim, k) == 1.0


def test_direction_transposes():
    rng = np.random.default_rng(1)
    a, b = normalize(rng.normal(size=(7, 4))), normalize(rng.normal(size=(7, 4)))
    i2t = similarity_matrix(a, b, IMAGE_TO_TEXT)
    t2i = similarity_matrix(a, b, TEXT_TO_IMAGE)
    np.testing.assert_array_equal(i2t.values, t2i.values.T)
    for k in range(1, 8):
        assert recall_at_k(t2i, k) == full_sort_recall(i2t.values.T, k)


def test_four_by_four_example():
    # each true match is ranked exactly second
    values = np.array([
        [0.5, 0.9, 0.1, 0.0],
        [0.1, 0.5, 0.9, 0.0],
        [0.0, 0.1, 0.5, 0.9],
        [0.9, 0.0, 0.1, 0.5],
    ])
    assert recall_at_k(values, 1) == 0.0
    assert recall_at_k(values, 2) == 1.0


def test_ties_go_to_lower_index():
    values = np.ones((3, 3))
    # row i's true match is preceded by the i equal columns to its left
    assert recall_at_k(values, 1) == pytest.approx(1 / 3)
    assert recall_at_k(values, 2) == pytest.approx(2 / 3)
    assert recall_at_k(values, 3) == 1.0


def test_invalid_k_and_shapes():
    with pytest.raises(InvalidKError):
        recall_at_k(np.eye(3), 0)
    with pytest.raises(InvalidKError):
        recall_at_k(np.eye(3), 4)
    with pytest.raises(ShapeError):
        similarity_matrix(np.eye(3), np.eye(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1), st.booleans())
def test_recall_matches_full_sort(n, seed, coarse):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n, n))
    if coarse:
        values = np.round(values)  # plenty of ties
    previous = 0.0
    for k in range(1, n + 1):
        r = recall_at_k(values, k)
        assert r == full_sort_recall(values, k)
        assert r >= previous
        previous = r
    assert recall_at_k(values, n) == 1.0


def test_scale_invariance():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(12, 12))
    for k in (1, 4):
        assert recall_at_k(values * 3.5, k) == recall_at_k(values, k)


# -- statistics ---------------------------------------------------------------

def test_stats_example():
    mean, se = mean_and_stderr([0.070, 0.072, 0.068, 0.071, 0.069])
    assert mean == pytest.approx(0.070, abs=1e-12)
    assert se == pytest.approx(math.sqrt(5e-7), abs=1e-12)
    assert round(se, 6) == 0.000707


def test_stats_single_value_and_constant():
    assert mean_and_stderr([0.4]) == (0.4, 0.0)
    assert mean_and_stderr([0.2] * 4) == pytest.approx((0.2, 0.0))
    with pytest.raises(ValueError):
        mean_and_stderr([])


def test_format_cell():
    assert format_cell(0.17, 0.0035) == "17.0±0.35"


def _report():
    return RecallReport(dataset="toy", direction=IMAGE_TO_TEXT, k_values=[1, 5], seeds=[0, 1, 2],
                        sample_size=30, per_seed={1: [0.1, 0.2, 0.3], 5: [0.5, 0.6, 0.7]},
                        metadata={"split": "test"})


def test_report_stats_and_json_round_trip():
    r = _report()
    assert r.means[1] == pytest.approx(0.2)
    assert r.stderrs[1] == pytest.approx(0.1 / math.sqrt(3))
    text = render_report(r, "json")
    data = json.loads(text)
    assert [e["k"] for e in data["per_k"]] == [1, 5]
    back = parse_report_json(text)
    assert back == r


def test_table_has_reference_rows():
    table = render_report(_report(), "table")
    assert "20.0±5.77" in table
    assert "17±0.35" in table
    assert "29±0.43" in table
    assert "17±" not in render_report(_report(), "table", references=False)


def test_report_validation():
    with pytest.raises(ValueError):
        RecallReport("x", IMAGE_TO_TEXT, [1], [0, 1], 5, {1: [0.1]})
