"""Per-class comparisons, CSV/SVG emission and reference verification."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from . import __version__
from .container import atomic_write
from .errors import ReportError

TABLE_HEADER = (
    "variant", "epoch", "params_millions", "top1", "top5", "no_inc",
    "highest_increase_class", "highest_increase_delta",
    "lowest_decrease_class", "lowest_decrease_delta",
    "least_class", "least_acc",
)
REFERENCE_EXTRA = ("audit_only", "known_discrepancy", "note")
ACCURACY_COLUMNS = (
    "top1", "top5", "no_inc", "highest_increase_delta", "lowest_decrease_delta", "least_acc",
)
FAMILIES = ("mc3", "r2plus1d", "r3d")


@dataclass
class ClassReport:
    model: str
    per_class: dict[str, float]
    top1: float | None = None
    top5: float | None = None
    epoch: int | None = None
    params_millions: Decimal | float | None = None

    def __post_init__(self):
        for name, acc in self.per_class.items():
            if not (0.0 <= acc <= 100.0):
                raise ReportError(f"{self.model}: accuracy of {name} outside [0, 100]: {acc}")


@dataclass
class VariantComparison:
    no_inc: int
    highest_increase: tuple[str, float]
    lowest_decrease: tuple[str, float]
    least_class: tuple[str, float]


def _delta(a: float, b: float) -> float:
    # rounding removes float noise so equal published deltas tie exactly
    return round(a - b, 9)


def compare(backbone: ClassReport, variant: ClassReport) -> VariantComparison:
    """Deltas are variant minus backbone; extrema ties go to the
    lexicographically first class name."""
    a, b = set(backbone.per_class), set(variant.per_class)
    if a != b:
        raise ReportError(f"class sets differ: {sorted(a ^ b)}")
    if not a:
        raise ReportError("reports have no classes")
    deltas = {c: _delta(variant.per_class[c], backbone.per_class[c]) for c in a}
    hi = min(deltas, key=lambda c: (-deltas[c], c))
    lo = min(deltas, key=lambda c: (deltas[c], c))
    least = min(a, key=lambda c: (variant.per_class[c], c))
    return VariantComparison(
        sum(d > 0 for d in deltas.values()),
        (hi, deltas[hi]),
        (lo, deltas[lo]),
        (least, variant.per_class[least]),
    )


def worst_k(report: ClassReport, k: int) -> list[str]:
    """The ``k`` least accurate classes, ascending, ties by name."""
    if not 0 <= k <= len(report.per_class):
        raise ReportError(f"k must lie in [0, {len(report.per_class)}], got {k}")
    return sorted(report.per_class, key=lambda c: (report.per_class[c], c))[:k]


# -- tables ------------------------------------------------------------

@dataclass
class TableRow:
    variant: str
    epoch: int | None = None
    params_millions: Decimal | float | None = None
    top1: float | None = None
    top5: float | None = None
    comparison: VariantComparison | None = None
    least: tuple[str, float] | None = None

    @classmethod
    def from_reports(cls, report: ClassReport, comparison: VariantComparison | None = None) -> "TableRow":
        least = comparison.least_class if comparison else (
            worst_k(report, 1)[0], report.per_class[worst_k(report, 1)[0]]
        ) if report.per_class else None
        return cls(report.model, report.epoch, report.params_millions, report.top1,
                   report.top5, comparison, least)

    def cells(self) -> list[str]:
        c = self.comparison
        least = self.least or (c.least_class if c else None)
        return [
            self.variant,
            "" if self.epoch is None else str(int(self.epoch)),
            _fmt(self.params_millions),
            _fmt(self.top1),
            _fmt(self.top5),
            "" if c is None else str(c.no_inc),
            "" if c is None else c.highest_increase[0],
            "" if c is None else _fmt(c.highest_increase[1]),
            "" if c is None else c.lowest_decrease[0],
            "" if c is None else _fmt(c.lowest_decrease[1]),
            "" if least is None else least[0],
            "" if least is None else _fmt(least[1]),
        ]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, Decimal):
        return f"{x.quantize(Decimal('0.01'))}"
    return f"{float(x):.2f}"


def _comment_block(meta: Mapping[str, object] | None) -> str:
    # same layout as every other artifact: a version line, then key=value
    if not meta:
        return ""
    return f"# at3d {__version__}\n" + "".join(f"# {k}={v}\n" for k, v in meta.items())


def table_csv_text(rows: Sequence[TableRow], meta: Mapping[str, object] | None = None) -> str:
    if not rows:
        raise ReportError("no rows to emit")
    buf = io.StringIO()
    buf.write(_comment_block(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def emit_table_csv(rows: Sequence[TableRow], path, meta: Mapping[str, object] | None = None) -> None:
    atomic_write(path, table_csv_text(rows, meta))


def read_csv(source) -> tuple[list[str], list[dict[str, str]]]:
    """Parse a CSV file skipping ``#`` comment lines.  ``source`` is a path,
    or CSV text when it is a string containing a newline."""
    if isinstance(source, str) and "\n" in source:
        text = source
    else:
        text = Path(source).read_text(encoding="utf-8")
    reader = csv.reader(line for line in text.splitlines() if not line.startswith("#"))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError("CSV has no header") from None
    rows = []
    for cells in reader:
        if len(cells) != len(header):
            raise ReportError(f"row {cells[:1]} has {len(cells)} cells, header has {len(header)}")
        rows.append(dict(zip(header, cells)))
    return header, rows


# -- reference data ----------------------------------------------------

def reference_path(name: str) -> Path:
    """Path of a shipped reference CSV, e.g. ``mc3_variants``."""
    p = resources.files("at3d") / "reference" / f"{name}.csv"
    if not p.is_file():
        raise ReportError(f"no reference table {name!r}")
    return Path(str(p))


def load_worst5(family: str) -> tuple[list[str], list[str], list[list[float]]]:
    """(classes, model columns, matrix [models x classes]) of a shipped
    five-worst-classes table.  The first column is the backbone."""
    header, rows = read_csv(reference_path(f"{family}_worst5"))
    models = header[1:]
    classes = [r["class"] for r in rows]
    matrix = [[float(r[m]) for r in rows] for m in models]
    return classes, models, matrix


def worst5_reports(family: str) -> dict[str, ClassReport]:
    from .models import Backbone

    classes, models, matrix = load_worst5(family)
    out = {}
    for m, accs in zip(models, matrix):
        name = Backbone(family).display if m == "backbone" else m
        out[name] = ClassReport(name, dict(zip(classes, accs)))
    return out


# -- verification ------------------------------------------------------

@dataclass
class Diff:
    variant: str
    column: str
    emitted: str
    reference: str
    known: bool = False
    note: str = ""

    def __str__(self):
        tag = "known" if self.known else "DIFF"
        return f"{tag} {self.variant}.{self.column}: emitted {self.emitted} vs reference {self.reference}" + (
            f" ({self.note})" if self.note else ""
        )


@dataclass
class VerifyResult:
    checked: int = 0
    diffs: list[Diff] = field(default_factory=list)

    @property
    def unexpected(self) -> list[Diff]:
        return [d for d in self.diffs if not d.known]

    @property
    def status(self) -> str:
        if self.unexpected:
            return "fail"
        return "known" if self.diffs else "pass"

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def _dec(s: str) -> Decimal | None:
    if s == "":
        return None
    try:
        return Decimal(s)
    except InvalidOperation:
        raise ReportError(f"not a number: {s!r}") from None


def _known(ref_row: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for item in filter(None, ref_row.get("known_discrepancy", "").split(";")):
        col, sep, val = item.partition("=")
        if not sep:
            raise ReportError(f"malformed known_discrepancy {item!r}")
        out[col.strip()] = val.strip()
    return out


def _within(a: Decimal | None, b: Decimal | None, tol: Decimal) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol


def verify_against_reference(
    emitted,
    reference,
    tolerance: Mapping[str, Decimal | float | str] | None = None,
    comparable: bool = False,
) -> VerifyResult:
    """Compare an emitted table with a reference table, row by variant.

    ``params_millions`` is always compared (default tolerance 0.01).  Other
    numeric columns are compared only when ``comparable`` is set and the
    reference row is not ``audit_only``.  A mismatch is *known* when the
    reference row records the emitted value under ``known_discrepancy``.
    Reference rows missing from the emitted table are not checked.
    """
    tol = {"params_millions": Decimal("0.01")}
    tol.update({k: Decimal(str(v)) for k, v in (tolerance or {}).items()})
    e_header, e_rows = read_csv(emitted)
    r_header, r_rows = read_csv(reference)
    if tuple(e_header) != TABLE_HEADER:
        raise ReportError(f"emitted header mismatch: {e_header}")
    if tuple(r_header[: len(TABLE_HEADER)]) != TABLE_HEADER or any(
        h not in REFERENCE_EXTRA for h in r_header[len(TABLE_HEADER):]
    ):
        raise ReportError(f"reference header mismatch: {r_header}")
    ref = {r["variant"]: r for r in r_rows}
    result = VerifyResult()
    for row in e_rows:
        name = row["variant"]
        if name not in ref:
            result.diffs.append(Diff(name, "variant", name, "", note="no reference row"))
            continue
        rrow = ref[name]
        known = _known(rrow)
        columns = ["params_millions"]
        if comparable and rrow.get("audit_only", "1") != "1":
            columns += [c for c in ACCURACY_COLUMNS if c in tol]
        for col in columns:
            result.checked += 1
            t = tol.get(col, Decimal(0))
            e, r = _dec(row[col]), _dec(rrow[col])
            if _within(e, r, t):
                continue
            is_known = col in known and _within(e, _dec(known[col]), t)
            result.diffs.append(Diff(name, col, row[col], rrow[col], is_known,
                                     rrow.get("note", "") if is_known else ""))
    return result


# -- charts ------------------------------------------------------------

_PALETTE = (
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
    "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac", "#1f77b4", "#8c564b",
)


def _attr(text: str) -> str:
    return escape(text, {'"': "&quot;"})


def chart_svg_text(
    classes: Sequence[str],
    matrix: Sequence[Sequence[float]],
    series: Sequence[str] | None = None,
    title: str = "",
    y_max: float = 100.0,
    meta: Mapping[str, object] | None = None,
) -> str:
    """Grouped bar chart, one group per class and one bar per row of
    ``matrix`` (``[series x classes]``).  A bar's ``height`` equals
    ``value * plot_height / y_max``; the axis element declares both."""
    n_series = len(matrix)
    if n_series == 0 or not classes:
        raise ReportError("chart needs at least one series and one class")
    if any(len(row) != len(classes) for row in matrix):
        raise ReportError(f"matrix rows must have {len(classes)} values")
    series = list(series) if series is not None else [f"series {i}" for i in range(n_series)]
    if len(series) != n_series:
        raise ReportError(f"{len(series)} series names for {n_series} rows")
    for row in matrix:
        for v in row:
            if not math.isfinite(v) or not 0 <= v <= y_max:
                raise ReportError(f"value {v} outside [0, {y_max}]")

    bar_w, gap, plot_h = 10, 20, 300
    left, top, bottom = 50, 30, 60
    group_w = n_series * bar_w + gap
    plot_w = len(classes) * group_w
    width = left + plot_w + 20
    legend_h = 14 * n_series
    height = top + plot_h + bottom + legend_h
    base = top + plot_h
    scale = plot_h / y_max

    out = ['<?xml version="1.0" encoding="UTF-8"?>']
    if meta:
        out.append(f"<!-- at3d {__version__} -->")
    out += [f"<!-- {escape(f'{k}={v}').replace('--', '- -')} -->" for k, v in (meta or {}).items()]
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    )
    if title:
        out.append(f'<text x="{left}" y="18" font-size="13">{escape(title)}</text>')
    out.append(
        f'<g class="axis" data-min="0" data-max="{y_max:g}" data-baseline="{base}" '
        f'data-plot-height="{plot_h}">'
    )
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{base}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{base}" x2="{left + plot_w}" y2="{base}" stroke="black"/>')
    for i in range(6):
        v = y_max * i / 5
        y = base - v * scale
        out.append(f'<text x="{left - 6}" y="{y:.2f}" font-size="10" text-anchor="end">{v:g}</text>')
    out.append("</g>")
    for j, cls in enumerate(classes):
        x0 = left + gap / 2 + j * group_w
        out.append(f'<g class="group" data-class="{_attr(cls)}">')
        for i, name in enumerate(series):
            v = float(matrix[i][j])
            h = v * scale
            out.append(
                f'<rect class="bar" x="{x0 + i * bar_w:.2f}" y="{base - h:.4f}" width="{bar_w}" '
                f'height="{h:.4f}" fill="{_PALETTE[i % len(_PALETTE)]}" '
                f'data-series="{_attr(name)}" data-value="{v:.2f}"/>'
            )
        cx = x0 + n_series * bar_w / 2
        out.append(
            f'<text x="{cx:.2f}" y="{base + 14}" font-size="10" text-anchor="middle">{escape(cls)}</text>'
        )
        out.append("</g>")
    out.append('<g class="legend">')
    for i, name in enumerate(series):
        y = base + bottom + 14 * i
        out.append(f'<rect x="{left}" y="{y - 9}" width="9" height="9" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
        out.append(f'<text x="{left + 14}" y="{y}" font-size="10">{escape(name)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_chart_svg(classes, matrix, path, series=None, title: str = "", meta=None) -> None:
    atomic_write(path, chart_svg_text(classes, matrix, series, title, meta=meta))
