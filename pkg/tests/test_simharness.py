import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from pqps import simharness
from pqps.sampler import MCMCConfig
from pqps.simharness import DesignSpec, coverage, generate, replicate_seeds, rmise, run_study

TINY = MCMCConfig(iters1=1000, iters2=800, burnin=200, thin=4, chunk=200)


@pytest.mark.parametrize("design", [1, 2, 3, 4])
def test_truth_is_normal_quantile_of_generator(design):
    spec = DesignSpec(design, n=200_000)
    data, truth = generate(spec, np.random.default_rng(design))
    # the empirical tau-quantile of the standardised residuals is Phi^{-1}(tau)
    e = (data.y - spec.mean(data.x)) / spec.sd(data.x)
    for tau in (0.1, 0.5, 0.9):
        assert np.quantile(e, tau) == pytest.approx(norm.ppf(tau), abs=0.015)
    x = np.array([0.2, 0.7])
    np.testing.assert_allclose(truth(x, 0.9), spec.mean(x) + spec.sd(x) * norm.ppf(0.9))
    assert truth(x, np.array([0.5, 0.9])).shape == (2, 2)


def test_design_formulas_at_points():
    x = np.array([0.0, 0.25, 1.0])
    wave = 0.5 + 2 * x + np.sin(2 * np.pi * x - 0.5)
    np.testing.assert_allclose(DesignSpec(1).mean(x), wave)
    np.testing.assert_allclose(DesignSpec(1).sd(x), 1.0)
    np.testing.assert_allclose(DesignSpec(2).mean(x), 3 * x)
    np.testing.assert_allclose(DesignSpec(2).sd(x), wave)
    sk = 0.1 + x / 10 + x ** 2 / 10
    for d, s in ((3, 0.1), (4, 0.05)):
        bumps = norm.pdf(x, 0.15, s) / 4 + norm.pdf(x, 0.6, 0.2) / 4
        np.testing.assert_allclose(DesignSpec(d).mean(x), bumps)
        np.testing.assert_allclose(DesignSpec(d).sd(x), sk)
    assert DesignSpec(4).re_family == "cauchy"
    assert DesignSpec(1).re_family == "normal"


def test_design_validation():
    with pytest.raises(ValueError):
        DesignSpec(5)
    with pytest.raises(ValueError):
        DesignSpec(1, n=3)


def test_generate_is_seeded_and_on_unit_interval():
    a, _ = generate(DesignSpec(3, n=50), np.random.default_rng(7))
    b, _ = generate(DesignSpec(3, n=50), np.random.default_rng(7))
    np.testing.assert_array_equal(a.y, b.y)
    assert np.all((a.x >= 0) & (a.x <= 1))
    np.testing.assert_array_equal(a.to_original(a.x), a.x)


def test_rmise_oracle():
    est = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    truth = np.array([[1.0, 2.0], [4.0, 4.0], [5.0, 8.0]])
    np.testing.assert_allclose(rmise(est, truth), [math.sqrt(1 / 3), math.sqrt(4 / 3)])
    assert rmise(np.zeros(4), np.full(4, 2.0)) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        rmise(np.zeros(3), np.zeros(4))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(-3, 3))
def test_rmise_of_constant_shift(values, c):
    t = np.array(values)
    assert rmise(t + c, t) == pytest.approx(abs(c), abs=1e-12)


def test_coverage_oracle():
    lo = np.array([0.0, 0.0, 0.0, 0.0])
    hi = np.array([1.0, 1.0, 1.0, 1.0])
    assert coverage(lo, hi, np.array([0.5, 1.0, 1.5, -0.1])) == pytest.approx(0.5)
    two = coverage(np.zeros((2, 2)), np.ones((2, 2)), np.array([[0.5, 2.0], [0.5, 0.5]]))
    np.testing.assert_allclose(two, [1.0, 0.5])
    with pytest.raises(ValueError):
        coverage(hi, lo, lo)


def test_replicate_seeds_are_distinct_and_reproducible():
    a = [np.random.default_rng(s).random() for s in replicate_seeds(5, 4)]
    b = [np.random.default_rng(s).random() for s in replicate_seeds(5, 4)]
    assert a == b
    assert len(set(a)) == 4


def test_study_report_csv_schema_and_aggregation():
    report = run_study(DesignSpec(1, n=40), 2, TINY, levels=(0.5, 0.9), K=3, R=1, seed=1)
    rows = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert [r["tau"] for r in rows] == ["0.5", "0.9"]
    assert set(rows[0]) == {"tau", "rmise_x100", "coverage", "replicates"}
    assert all(int(r["replicates"]) == 2 for r in rows)
    per = np.array([o.rmise for o in report.outcomes])
    np.testing.assert_allclose(report.rmise_x100, 100 * per.mean(axis=0))
    reps = list(csv.DictReader(io.StringIO(report.replicate_csv())))
    assert len(reps) == 4 and {r["failed"] for r in reps} == {"0"}
    text = report.to_text()
    assert "Design 1" in text and "runtime" not in text
    assert "runtime" in report.to_text(include_runtime=True)


def test_replicates_independent_of_workers():
    kw = dict(levels=(0.5,), K=2, R=0, seed=3)
    one = run_study(DesignSpec(2, n=30), 2, TINY, workers=1, **kw)
    two = run_study(DesignSpec(2, n=30), 2, TINY, workers=2, **kw)
    assert one.replicates == two.replicates == 2
    assert one.to_csv() == two.to_csv()
    # replicate r of a longer study equals replicate r of a shorter one
    three = run_study(DesignSpec(2, n=30), 3, TINY, **kw)
    np.testing.assert_array_equal(three.outcomes[1].rmise, one.outcomes[1].rmise)


def test_failed_replicates_are_reported(monkeypatch):
    def boom(*a, **k):
        raise ArithmeticError("no")
    monkeypatch.setattr(simharness, "fit", boom)
    report = run_study(DesignSpec(1, n=20), 2, TINY, levels=(0.5,), K=1, R=0)
    assert report.replicates == 0
    assert [i for i, _ in report.failures] == [0, 1]
    assert np.isnan(report.rmise_x100).all()
    assert "failed replicates: 0, 1" in report.to_text()
    with pytest.raises(ValueError):
        run_study(DesignSpec(1), 0)
