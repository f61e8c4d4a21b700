import json
import math

import numpy as np
import pytest

from ssbrpe import metrics as mt
from ssbrpe.errors import DataError, DomainError

# Published volume rows: log MSE, log MAE, rho, MM, linear median, linear MAE
VOLUME_ROWS = {
    "CNN": (0.3863, 0.4837, 0.6984, 3.0532, 465.22, 2239.12),
    "CRNN": (0.3572, 0.4265, 0.7262, 2.6701, 371.70, 2020.23),
    "Attention w/ ImageNet": (0.2157, 0.3111, 0.8529, 2.047, 277.17, 1735.16),
    "SS-BRPE": (0.2003, 0.2887, 0.8937, 1.9599, 234.47, 1532.32),
    "SS-BRPE w/ Feature AUG": (0.1652, 0.2721, 0.8965, 1.8773, 223.69, 1470.56),
}


def test_worked_example():
    r = mt.evaluate([20.0, 50.0], [10.0, 100.0])
    assert r.log_mae == pytest.approx(0.30103, abs=1e-5)
    assert r.log_mse == pytest.approx(math.log10(2) ** 2, abs=1e-12)
    assert r.mean_mult == pytest.approx(2.0, abs=1e-9)
    assert r.linear_mae == pytest.approx(30.0)
    assert r.linear_median_abs_err == pytest.approx(30.0)
    assert r.n == 2


def test_perfect_predictions():
    y = [12.0, 150.0, 2000.0, 9000.0]
    r = mt.evaluate(y, y)
    assert (r.log_mse, r.log_mae, r.pearson_rho, r.mean_mult, r.linear_median_abs_err, r.linear_mae) == \
        (0.0, 0.0, 1.0, 1.0, 0.0, 0.0)


def test_pearson_against_numpy():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(50), rng.standard_normal(50)
    assert mt.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    with pytest.raises(DataError):
        mt.pearson([1.0, 1.0], [1.0, 2.0])


def test_evaluate_rejects_bad_input():
    with pytest.raises(DomainError):
        mt.evaluate([1.0, -1.0], [1.0, 2.0])
    with pytest.raises(DataError):
        mt.evaluate([1.0], [1.0])
    with pytest.raises(DataError):
        mt.evaluate([1.0, 2.0], [1.0, 2.0, 3.0])


def test_report_serialisation():
    r = mt.evaluate([20.0, 50.0], [10.0, 100.0])
    d = json.loads(r.to_json(split="test"))
    assert d["split"] == "test" and d["mean_mult"] == pytest.approx(2.0)
    assert "MeanMult" in r.format_table("m^3")


@pytest.mark.parametrize("method", list(VOLUME_ROWS))
def test_reference_volume_rows_verbatim(method):
    row = mt.reference_row(method, "volume", table=1)
    assert tuple(row[f] for f in mt.FIELDS) == VOLUME_ROWS[method]


def test_reference_rt60_and_limited_rows():
    aug = mt.reference_row("SS-BRPE w/ Feature AUG", "rt60")
    assert (aug["log_mse"], aug["mean_mult"], aug["linear_mae"]) == (0.0370, 1.3529, 0.39)
    lim = mt.reference_row("SS-BRPE w/ Feature AUG", "volume", table=2)
    assert (lim["log_mse"], lim["log_mse_ci"], lim["pearson_rho_ci"]) == (0.2247, 0.0062, 0.0038)
    assert len(mt.load_reference_table()) == 20


def test_unrecoverable_cells_are_blank():
    assert mt.reference_row("CNN", "rt60")["linear_mae"] is None
    assert mt.reference_row("CRNN", "rt60")["mean_mult"] is None
    assert mt.reference_row("Attention w/ ImageNet", "rt60", table=2)["mean_mult"] is None


def test_compare_to_reference_lists_rows():
    text = mt.compare_to_reference(mt.evaluate([20.0, 50.0], [10.0, 100.0]), "rt60")
    lines = text.splitlines()
    assert lines[2].startswith("this run") and len(lines) == 3 + 5
    assert any(line.startswith("CNN") and line.rstrip().endswith("-") for line in lines)
    with pytest.raises(KeyError):
        mt.reference_row("Nope", "volume")


def test_pearson_affine_cases():
    x = np.array([1.0, 2.0, 5.0, 9.0])
    assert mt.pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-12)
    assert mt.pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)
