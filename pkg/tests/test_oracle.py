import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from motifrl.errors import ConfigError, KindMismatch
from motifrl.molgraph import parse_smiles
from motifrl.oracle import (
    TaskSpec,
    discrepancy,
    evaluate,
    fit_normalization,
    label,
    load_registry,
    save_registry,
    shape,
    tasks_from_obj,
)

REG = TaskSpec(0, "rings", mean=1.0, std=2.0, sigma=0.5)
CLS = TaskSpec(1, "ringy", kind="classification", descriptor="ring_count", threshold=1.0, slope=2.0)


def test_evaluate_examples():
    assert evaluate(parse_smiles("CCCC"), REG) == 0.0
    assert evaluate(parse_smiles("C1CC1"), TaskSpec(0, "s", descriptor="size_score")) == 5.0
    assert evaluate(parse_smiles("CO"), TaskSpec(0, "h", descriptor="heteroatom_fraction")) == 0.5
    assert evaluate(parse_smiles("C1CC1"), CLS) == 0.5


def test_label_rounds_classification():
    assert label(parse_smiles("C1CC1C1CC1"), CLS) == 1.0
    assert label(parse_smiles("CC"), CLS) == 0.0
    assert label(parse_smiles("C1CC1"), REG) == 1.0


def test_discrepancy_examples():
    assert discrepancy(3.0, 3.0, REG) == 0.0
    assert discrepancy(3.0, 1.0, REG) == 1.0
    assert abs(discrepancy(0.9, 1, CLS) - 0.1) < 1e-15


def test_discrepancy_errors():
    with pytest.raises(KindMismatch):
        discrepancy(0.5, 1, CLS, kind="regression")
    with pytest.raises(KindMismatch):
        discrepancy(0.5, 0.5, CLS)


def test_shape_examples():
    assert shape(0.0, REG) == 1.0
    assert abs(shape(0.5, REG) - math.exp(-1)) < 1e-15
    assert shape(1.0, CLS) == 0.0


@given(st.floats(0, 50), st.floats(0, 50))
def test_regression_shape_is_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert 0.0 <= shape(hi, REG) <= shape(lo, REG) <= 1.0
    if hi - lo > 1e-6 and shape(hi, REG) > 0:
        assert shape(hi, REG) < shape(lo, REG)


@given(st.floats(0, 1), st.sampled_from([0, 1]))
def test_classification_reward_is_label_probability(p, y):
    r = shape(discrepancy(p, y, CLS), CLS)
    assert abs(r - (p if y == 1 else 1 - p)) < 1e-15


def test_task_validation():
    with pytest.raises(ConfigError):
        TaskSpec(0, "x", std=0.0)
    with pytest.raises(ConfigError):
        TaskSpec(0, "x", sigma=-1.0)
    with pytest.raises(ConfigError):
        TaskSpec(0, "x", descriptor="logp")
    with pytest.raises(ConfigError):
        TaskSpec(0, "x", kind="ranking")


def test_fit_normalization():
    corpus = [parse_smiles(s) for s in ("CC", "C1CC1", "C1CC1C1CC1", "C1CC1C1CC1")]
    task = fit_normalization(TaskSpec(0, "rings"), corpus)
    assert task.mean == 1.25 and abs(task.std - math.sqrt(0.6875)) < 1e-15
    flat = fit_normalization(TaskSpec(0, "rings"), corpus[:1])
    assert flat.std == 1.0


def test_registry_roundtrip(tmp_path):
    path = tmp_path / "tasks.json"
    save_registry([REG, CLS], path)
    assert load_registry(path) == [REG, CLS]
    with pytest.raises(ConfigError):
        tasks_from_obj([{"task_id": 1, "name": "a"}])
