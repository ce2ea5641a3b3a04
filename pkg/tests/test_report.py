import csv
import io
import xml.etree.ElementTree as ET
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from at3d import report as R
from at3d.errors import ReportError
from at3d.models import ModelConfig, Variant, build_model, param_audit

SVG = "{http://www.w3.org/2000/svg}"


def rep(name, **accs):
    return R.ClassReport(name, accs)


# -- compare / worst_k -------------------------------------------------

def test_compare_example():
    c = R.compare(rep("b", A=50, B=60, C=70), rep("v", A=55, B=60, C=65))
    assert c.no_inc == 1
    assert c.highest_increase == ("A", 5)
    assert c.lowest_decrease == ("C", -5)
    assert c.least_class == ("A", 55)  # the variant minimum, not the worst delta


def test_compare_identical_reports():
    r = rep("x", Zeta=40.0, Alpha=40.0, Mid=70.0)
    c = R.compare(r, r)
    assert c.no_inc == 0
    assert c.highest_increase == ("Alpha", 0) and c.lowest_decrease == ("Alpha", 0)
    assert c.least_class == ("Alpha", 40.0)


def test_compare_class_mismatch_lists_difference():
    with pytest.raises(ReportError, match=r"\['B', 'C'\]"):
        R.compare(rep("b", A=1, B=2), rep("v", A=1, C=2))


def test_compare_on_published_mc3_columns():
    reps = R.worst5_reports("mc3")
    c = R.compare(reps["M-MC3"], reps["3-CBAM"])
    assert c.highest_increase[0] == "HighJump"
    assert c.highest_increase[1] == pytest.approx(26.03, abs=1e-9)


def test_worst_k_examples():
    assert R.worst_k(R.worst5_reports("r3d")["M-R3D"], 1) == ["PizzaTossing"]
    assert R.worst5_reports("r3d")["M-R3D"].per_class["PizzaTossing"] == 9.09
    assert R.worst_k(rep("x", c=5, a=5, b=5), 2) == ["a", "b"]
    r = rep("x", c=3, a=9, b=1)
    assert R.worst_k(r, 3) == ["b", "c", "a"]
    with pytest.raises(ReportError):
        R.worst_k(r, 4)


accs = st.dictionaries(st.sampled_from("ABCDEFGH"), st.floats(0, 100, allow_nan=False), min_size=1)


@given(accs, st.data())
def test_compare_antisymmetry(a, data):
    b = {k: data.draw(st.floats(0, 100, allow_nan=False)) for k in a}
    fwd = R.compare(R.ClassReport("a", a), R.ClassReport("b", b))
    back = R.compare(R.ClassReport("b", b), R.ClassReport("a", a))
    assert fwd.highest_increase[1] == -back.lowest_decrease[1]
    assert fwd.lowest_decrease[1] == -back.highest_increase[1]
    assert back.no_inc == sum(round(b[k] - a[k], 9) < 0 for k in a)


@given(accs, st.integers(0, 8))
def test_worst_k_is_prefix_of_full_sort(a, k):
    r = R.ClassReport("r", a)
    k = min(k, len(a))
    full = R.worst_k(r, len(a))
    assert sorted(full) == sorted(a)
    assert R.worst_k(r, k) == full[:k]


def test_report_rejects_out_of_range():
    with pytest.raises(ReportError):
        rep("x", A=100.5)


# -- CSV ---------------------------------------------------------------

def test_table_csv_roundtrip_and_formatting(tmp_path):
    backbone = R.ClassReport("M-R3D", {"A": 50.0, "B": 88.98}, 79.99, 95.5, 28, Decimal("33.22"))
    variant = R.ClassReport("3-SE", {"A": 61.1, "B": 80.0}, 88.98, 97.0, 22, Decimal("33.28"))
    rows = [R.TableRow.from_reports(backbone), R.TableRow.from_reports(variant, R.compare(backbone, variant))]
    path = tmp_path / "t.csv"
    R.emit_table_csv(rows, path, {"seed": 0})
    text = path.read_text(encoding="utf-8")
    assert text.startswith("# ") and "88.980000" not in text
    header, parsed = R.read_csv(path)
    assert tuple(header) == R.TABLE_HEADER
    assert [list(r.values()) for r in parsed] == [r.cells() for r in rows]
    assert parsed[1]["top1"] == "88.98"
    assert parsed[1]["highest_increase_delta"] == "11.10"
    assert parsed[1]["lowest_decrease_class"] == "B" and parsed[1]["lowest_decrease_delta"] == "-8.98"
    assert parsed[0]["no_inc"] == "" and parsed[0]["least_class"] == "A"
    plain = list(csv.reader(io.StringIO("".join(l for l in text.splitlines(True) if not l.startswith("#")))))
    assert plain[0] == list(R.TABLE_HEADER)


def test_single_trivial_row_roundtrip():
    row = R.TableRow("M-MC3", 1, Decimal("11.54"), 1.0, 2.0)
    _, parsed = R.read_csv(R.table_csv_text([row]))
    assert list(parsed[0].values()) == row.cells()


# -- SVG ---------------------------------------------------------------

def bars(svg_text):
    return ET.fromstring(svg_text.split("\n", 1)[1]).iter(f"{SVG}rect")


def test_single_bar_height_linear_in_axis():
    text = R.chart_svg_text(["A"], [[42.5]], ["s"])
    root = ET.fromstring(text.encode())
    axis = next(g for g in root.iter(f"{SVG}g") if g.get("class") == "axis")
    rects = [r for r in root.iter(f"{SVG}rect") if r.get("class") == "bar"]
    assert len(rects) == 1
    scale = float(axis.get("data-plot-height")) / float(axis.get("data-max"))
    assert float(rects[0].get("height")) == pytest.approx(42.5 * scale)
    assert float(rects[0].get("y")) + float(rects[0].get("height")) == pytest.approx(float(axis.get("data-baseline")))


def test_published_matrix_renders_55_bars_deterministically(tmp_path):
    classes, models, matrix = R.load_worst5("mc3")
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    R.emit_chart_svg(classes, matrix, a, models, "MC3")
    R.emit_chart_svg(classes, matrix, b, models, "MC3")
    assert a.read_bytes() == b.read_bytes()
    root = ET.fromstring(a.read_bytes())
    assert root.get("version") == "1.1"
    assert sum(r.get("class") == "bar" for r in root.iter(f"{SVG}rect")) == 55


def test_svg_escapes_names_and_rejects_bad_input():
    text = R.chart_svg_text(['a"<b>&'], [[1.0]], ['s"1'], title="x & y", meta={"k": "--v"})
    root = ET.fromstring(text.encode())
    bar = next(r for r in root.iter(f"{SVG}rect") if r.get("class") == "bar")
    assert bar.get("data-series") == 's"1'
    with pytest.raises(ReportError):
        R.chart_svg_text(["A", "B"], [[1.0]])
    with pytest.raises(ReportError):
        R.chart_svg_text(["A"], [[101.0]])
    with pytest.raises(ReportError):
        R.chart_svg_text(["A"], [[float("nan")]])


# -- verification ------------------------------------------------------

def audit_csv(family, **kw):
    rows = [R.TableRow(ModelConfig(family, v, **kw).name,
                       params_millions=param_audit(build_model(ModelConfig(family, v, **kw), init=False)).millions)
            for v in Variant]
    return R.table_csv_text(rows)


def test_verify_mc3_passes_all_rows():
    res = R.verify_against_reference(audit_csv("mc3"), R.reference_path("mc3_variants"))
    assert res.status == "pass" and res.checked == 11


def test_verify_r3d_flags_only_fc_temporal():
    res = R.verify_against_reference(audit_csv("r3d"), R.reference_path("r3d_variants"))
    assert res.status == "known" and res.unexpected == []
    assert [(d.variant, d.column, d.reference) for d in res.diffs] == [("FC-Temporal", "params_millions", "34.53")]


def test_verify_corrupted_reference_names_cell(tmp_path):
    text = R.reference_path("mc3_variants").read_text().replace("3-TCN,21,12.79", "3-TCN,21,12.99")
    bad = tmp_path / "bad.csv"
    bad.write_text(text)
    res = R.verify_against_reference(audit_csv("mc3"), bad)
    assert res.status == "fail"
    assert [(d.variant, d.column, d.emitted, d.reference) for d in res.unexpected] == [
        ("3-TCN", "params_millions", "12.79", "12.99")]
    assert "3-TCN.params_millions" in str(res.unexpected[0])


def test_verify_header_mismatch():
    with pytest.raises(ReportError):
        R.verify_against_reference("a,b\n1,2\n", R.reference_path("mc3_variants"))


def test_accuracy_columns_only_when_comparable():
    ref = "\n".join([",".join(R.TABLE_HEADER + ("audit_only",)),
                     "X,1,1.00,50.00,90.00,,,,,,,,0", ""])
    emitted = R.table_csv_text([R.TableRow("X", 1, Decimal("1.00"), 60.0, 90.0)])
    assert R.verify_against_reference(emitted, ref).status == "pass"
    res = R.verify_against_reference(emitted, ref, {"top1": 1, "top5": 1}, comparable=True)
    assert [d.column for d in res.diffs] == ["top1"]
    audit_only = ref.replace(",0\n", ",1\n")
    assert R.verify_against_reference(emitted, audit_only, {"top1": 1}, comparable=True).status == "pass"


# -- shipped reference consistency -------------------------------------

@pytest.mark.parametrize("family", R.FAMILIES)
def test_reference_tables_are_mutually_consistent(family):
    _, rows = R.read_csv(R.reference_path(f"{family}_variants"))
    assert len(rows) == 11
    reps = R.worst5_reports(family)
    assert set(reps) == {r["variant"] for r in rows}
    for r in rows:
        worst = reps[r["variant"]].per_class
        least = float(r["least_acc"])
        if r["variant"] == "M-MC3":
            assert least == 18.92 and worst["HighJump"] == 19.92  # printed discrepancy
            continue
        assert least <= min(worst.values()) + 1e-9, r["variant"]
        if r["least_class"] in worst:
            assert worst[r["least_class"]] == pytest.approx(least), r["variant"]
        assert float(r["top1"]) <= float(r["top5"])
    backbone = next(r for r in rows if r["no_inc"] == "")
    assert np.isclose(float(backbone["least_acc"]), min(reps[backbone["variant"]].per_class.values())) or family == "mc3"
