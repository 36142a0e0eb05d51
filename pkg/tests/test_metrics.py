import numpy as np
import pytest

from basis_transformer.metrics import DatasetScore, aggregate, format_report, nnse, r2


def test_r2_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert r2(y, y) == 1.0
    assert r2(y, np.full(3, y.mean())) == 0.0
    assert r2(y, [3.0, 2.0, 1.0]) == -3.0


def test_r2_errors():
    with pytest.raises(ValueError):
        r2([2.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        r2([1.0], [1.0])
    with pytest.raises(ValueError):
        r2([1.0, 2.0], [1.0, 2.0, 3.0])


def test_nnse_examples_and_monotone():
    assert nnse(1.0) == 1.0
    assert nnse(0.0) == 0.5
    assert nnse(-3.0) == 0.2
    xs = np.linspace(-20, 1, 200)
    assert np.all(np.diff([nnse(x) for x in xs]) > 0)
    with pytest.raises(ValueError):
        nnse(1.5)


def test_aggregate_examples():
    single = aggregate([DatasetScore("a", [0.4])])
    assert single == {"median": 0.4, "iqr": 0.0, "mean": 0.4, "std": 0.0}
    scores = [DatasetScore(str(v), [v]) for v in (1.0, 2.0, 3.0, 4.0)]
    assert aggregate(scores)["median"] == 2.5
    assert aggregate(scores)["iqr"] == 1.5
    assert aggregate(scores) == aggregate(scores[::-1])


def test_dataset_score_sample_std():
    s = DatasetScore("d", [1.0, 2.0, 3.0])
    assert s.mean == 2.0 and s.std == 1.0


def test_r2_affine_invariance():
    rng = np.random.default_rng(0)
    for _ in range(200):
        y, yh = rng.normal(size=20), rng.normal(size=20)
        a = rng.uniform(0.1, 10) * rng.choice([-1, 1])
        b = rng.normal() * 100
        assert r2(a * y + b, a * yh + b) == pytest.approx(r2(y, yh), rel=1e-9, abs=1e-12)


def test_format_report_columns():
    text = format_report({"model": {"median": 0.241, "iqr": 0.5, "mean": 0.1, "std": float("nan")}})
    assert text.splitlines()[0].split()[1:] == ["Median", "IQR", "Mean", "Std"]
    assert "0.241" in text and "nan" in text
