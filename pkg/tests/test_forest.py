import re

import pytest

from biomarker_meta.data_model import ValidationError
from biomarker_meta.forest import ForestRow, layout_rows, render_forest


def row(label="a", est=0.0, lo=-0.1, hi=0.1, population="positive", model=""):
    return ForestRow(label, est, lo, hi, population, model)


def test_single_row_has_one_marker_one_whisker_pair_and_null_line():
    svg = render_forest([row()])
    assert svg.count('class="marker"') == 1
    assert svg.count('class="whisker"') == 1
    assert svg.count('class="cap"') == 2
    assert svg.count('class="null"') == 1


def test_empty_rows_error():
    with pytest.raises(ValidationError, match="no rows"):
        render_forest([])


def test_row_ordering_invariant():
    with pytest.raises(ValidationError, match="lower <= estimate <= upper"):
        ForestRow("bad", 0.5, -0.1, 0.1)


def test_unknown_population_rejected():
    with pytest.raises(ValidationError, match="unknown population"):
        ForestRow("bad", 0.0, -0.1, 0.1, population="whatever")


def test_output_is_deterministic(tmp_path):
    rows = [
        row("study one", -0.2, -0.4, 0.0),
        row("study two", 0.1, -0.1, 0.3, population="mixed"),
        row("pooled", -0.15, -0.25, -0.05, population="pooled", model="M1"),
    ]
    a = render_forest(rows, tmp_path / "a.svg", title="check")
    b = render_forest(rows, tmp_path / "b.svg", title="check")
    assert a == b
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_null_line_at_log_one_and_hr_axis_labels():
    rows = [row("x", 0.0, -0.7, 0.7)]
    svg = render_forest(rows)
    geometry, to_x, _ = layout_rows(rows)
    null_x = float(re.search(r'class="null" x1="([0-9.]+)"', svg).group(1))
    assert null_x == pytest.approx(to_x(0.0), abs=0.01)
    assert ">hazard ratio<" in svg
    assert ">1<" in svg  # HR = 1 tick label
    assert ">0.5<" in svg  # log(0.5) = -0.69 inside range


def test_narrower_interval_renders_inside_wider():
    rows = [
        ForestRow("wide", -0.11, -0.29, 0.057, "pooled", "M1"),
        ForestRow("narrow", -0.11, -0.21, -0.017, "pooled", "M3"),
    ]
    svg = render_forest(rows)
    whiskers = re.findall(r'class="whisker" x1="([0-9.]+)" y1="[0-9.]+" x2="([0-9.]+)"', svg)
    (w1_lo, w1_hi), (w3_lo, w3_hi) = [(float(a), float(b)) for a, b in whiskers]
    assert w1_lo < w3_lo and w3_hi < w1_hi  # strictly inside horizontally


def test_labels_escaped():
    svg = render_forest([row("a & b < c")])
    assert "a &amp; b &lt; c" in svg


def test_population_colors_distinct():
    rows = [
        row("p", population="positive"),
        row("n", population="negative"),
        row("m", population="mixed"),
        row("pool", population="pooled"),
    ]
    svg = render_forest(rows)
    colors = set(re.findall(r'class="whisker".*stroke="(#[0-9a-f]{6})"', svg))
    assert len(colors) == 4


def test_model_groups_get_separators():
    rows = [
        row("s1"),
        ForestRow("pool1", -0.1, -0.2, 0.0, "pooled", "M1"),
        ForestRow("pool3", -0.1, -0.18, -0.02, "pooled", "M3"),
    ]
    svg = render_forest(rows)
    assert svg.count('class="separator"') == 1  # between M1 and M3 groups
