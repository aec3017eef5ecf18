import statistics
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from refinelab import metrics as M

GOLDEN = Path(__file__).parent / "golden"


def _stage_reports():
    reps = []
    for k, base in ((1, 0.40), (5, 0.60)):
        for s in range(1, 5):
            accs = [base + 0.02 * s, base + 0.02 * s + 0.04]
            reps.append(M.EvalReport(accs, 5, k, 15, f"stage{s}", "source", "binarize", 0))
    baseline = [M.EvalReport([0.47, 0.49], 5, 1, 15, "transfer"), M.EvalReport([0.69, 0.71], 5, 5, 15, "transfer")]
    return reps, baseline


def test_mean_ci_hand_example():
    m = M.mean_ci([0.6, 0.8, 0.7, 0.9])
    assert m.mean == pytest.approx(0.75)
    assert m.halfwidth == pytest.approx(1.96 * statistics.stdev([0.6, 0.8, 0.7, 0.9]) / 2)
    assert m.defined


def test_mean_ci_single_task_and_empty():
    assert M.mean_ci([0.4]) == (0.4, 0.0, False)
    with pytest.raises(ValueError):
        M.mean_ci([])


def test_constant_accuracies_have_zero_width():
    assert M.mean_ci([0.5] * 10).halfwidth == 0.0


def test_format_pm():
    assert M.format_pm(0.6893, 0.0084) == "68.93±.84"
    assert M.format_pm(0.5, 0.0123) == "50.00±1.23"
    assert M.format_pm(1.0, 0.0) == "100.00±.00"


@pytest.mark.parametrize("cell, expected", [("68.93±.84", (0.6893, 0.0084)), ("64.14 ± .82", (0.6414, 0.0082)),
                                            ("50.00±1.23", (0.5, 0.0123))])
def test_parse_pm(cell, expected):
    m, c = M.parse_pm(cell)
    assert m == pytest.approx(expected[0]) and c == pytest.approx(expected[1])


def test_parse_pm_rejects_junk():
    with pytest.raises(ValueError):
        M.parse_pm("about 68")


def test_report_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        M.EvalReport([1.2], 5, 5, 15, "x")
    r = M.EvalReport([0.5, 0.7], 5, 5, 15, "transfer", "source", "invert", 3)
    back = M.EvalReport.from_dict(r.to_dict())
    assert back == r and back.T == 2 and r.to_dict()["T"] == 2


def test_table_round_trip():
    reps, _ = _stage_reports()
    text = M.render_table(reps)
    parsed = M.parse_table(text)
    assert set(parsed) == {(f"stage{s}", "binarize") for s in range(1, 5)}
    for r in reps:
        m, c = parsed[(r.method, r.target)][r.k]
        assert m == pytest.approx(round(r.mean, 4)) and c == pytest.approx(round(r.ci95, 4))


def test_csv_columns_and_exact_floats():
    reps, _ = _stage_reports()
    lines = M.reports_to_csv(reps).splitlines()
    assert lines[0] == ",".join(M.CSV_COLUMNS)
    first = lines[1].split(",")
    assert first[:6] == ["stage1", "source", "binarize", "5", "1", "2"]
    assert float(first[6]) == reps[0].mean


def test_write_and_load(tmp_path):
    reps, _ = _stage_reports()
    M.write_report(reps, "json", tmp_path / "r.json")
    assert M.load_reports(tmp_path / "r.json") == reps
    with pytest.raises(ValueError):
        M.write_report(reps, "xlsx", tmp_path / "r.x")
    with pytest.raises(ValueError):
        M.write_report([], "csv", tmp_path / "r.csv")


def test_stage_trend_svg_matches_golden():
    reps, base = _stage_reports()
    svg = M.render_plot(reps, "stage_trend", baseline=base, title="stage probe")
    assert svg == (GOLDEN / "stage_trend.svg").read_text()


def test_stage_trend_structure():
    reps, base = _stage_reports()
    root = ET.fromstring(M.render_plot(reps, "stage_trend", baseline=base))
    ns = "{http://www.w3.org/2000/svg}"
    assert root.get("version") == "1.1"
    assert len(root.findall(f"{ns}polyline")) == 2
    dashed = [el for el in root.findall(f"{ns}line") if el.get("stroke-dasharray")]
    assert len(dashed) == 2
    pts = root.findall(f"{ns}polyline")[1].get("points").split()
    ys = [float(p.split(",")[1]) for p in pts]
    assert ys == sorted(ys, reverse=True)  # rising accuracy -> falling y


def test_ablation_bars(tmp_path):
    reps = [M.EvalReport([0.5 + 0.05 * i], 5, k, 15, m) for i, m in enumerate(["none", "stages4", "stages34"])
            for k in (1, 5)]
    svg = M.render_plot(reps, "ablation_bars", path=tmp_path / "a.svg")
    root = ET.fromstring(svg)
    bars = [el for el in root.findall("{http://www.w3.org/2000/svg}rect") if el.get("fill") != "white"]
    assert len(bars) == 6
    assert (tmp_path / "a.svg").read_text() == svg


def test_plot_errors():
    with pytest.raises(ValueError):
        M.render_plot([], "stage_trend")
    with pytest.raises(ValueError):
        M.render_plot([M.EvalReport([0.5], 5, 5, 15, "x")], "pie")
