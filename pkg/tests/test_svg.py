import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from abdoscan.errors import ParameterError
from abdoscan.metrics import HeatmapMatrix, bland_altman
from abdoscan.svg import (
    HIGH_RGB,
    LIMIT_DASH,
    LOW_RGB,
    MEAN_DASH,
    bland_altman_svg,
    heatmap_svg,
    render_bland_altman_svg,
    render_heatmap_svg,
)


def _hex(rgb):
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _cells(svg):
    root = ET.fromstring(svg)
    return [e for e in root.iter("{http://www.w3.org/2000/svg}rect") if e.get("class") == "cell"]


def _matrix(values):
    return HeatmapMatrix(np.asarray(values, dtype=np.float64), (3, 4))


def test_heatmap_zero_matrix():
    svg = heatmap_svg(_matrix(np.zeros((2, 64))))
    cells = _cells(svg)
    assert len(cells) == 128
    assert {c.get("fill") for c in cells} == {_hex(LOW_RGB)}
    root = ET.fromstring(svg)
    texts = {t.get("class"): t for t in root.iter("{http://www.w3.org/2000/svg}text") if t.get("class")}
    assert float(texts["legend-min"].get("data-value")) == 0.0
    assert float(texts["legend-max"].get("data-value")) == 0.0


def test_heatmap_rows_labelled():
    root = ET.fromstring(heatmap_svg(_matrix(np.zeros((2, 64)))))
    labels = [t.text for t in root.iter("{http://www.w3.org/2000/svg}text") if not t.get("class")]
    assert labels[:2] == ["0", "1"]
    rows = [c.get("data-row") for c in _cells(heatmap_svg(_matrix(np.zeros((2, 64)))))]
    assert rows.count("0") == rows.count("1") == 64


def test_heatmap_single_nonzero_cell_is_the_only_maximum():
    v = np.zeros((2, 64))
    v[1, 17] = 0.4
    cells = _cells(heatmap_svg(_matrix(v)))
    top = [c for c in cells if c.get("fill") == _hex(HIGH_RGB)]
    assert len(top) == 1
    assert (top[0].get("data-row"), top[0].get("data-step")) == ("1", "17")


def test_heatmap_linear_colour_scale():
    v = np.zeros((2, 64))
    v[0, :] = np.linspace(0, 1, 64)
    cells = _cells(heatmap_svg(_matrix(v)))
    mid = next(c for c in cells if c.get("data-row") == "0" and c.get("data-step") == "21")
    frac = 21 / 63
    expect = _hex([round(lo + (hi - lo) * frac) for lo, hi in zip(LOW_RGB, HIGH_RGB)])
    assert mid.get("fill") == expect
    assert float(mid.get("data-value")) == v[0, 21]


def test_heatmap_missing_row_drawn_grey():
    v = np.vstack([np.linspace(0, 1, 64), np.full(64, np.nan)])
    cells = _cells(heatmap_svg(HeatmapMatrix(v, (5, 0), (1,))))
    assert all(c.get("fill") == "#cccccc" for c in cells if c.get("data-row") == "1")


def test_heatmap_deterministic_bytes(tmp_path):
    v = np.random.default_rng(3).uniform(size=(2, 64))
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    render_heatmap_svg(_matrix(v), a)
    render_heatmap_svg(_matrix(v.copy()), b)
    assert a.read_bytes() == b.read_bytes()


def test_heatmap_shape_error():
    with pytest.raises(ParameterError):
        heatmap_svg(_matrix(np.zeros((3, 64))))


def _lines(svg):
    root = ET.fromstring(svg)
    return {e.get("class"): e for e in root.iter("{http://www.w3.org/2000/svg}line")}


def test_bland_altman_identical_inputs_give_coincident_lines():
    svg = bland_altman_svg(bland_altman([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]))
    lines = _lines(svg)
    assert {float(e.get("data-y")) for e in lines.values()} == {0.0}
    assert len({e.get("y1") for e in lines.values()}) == 1


def test_bland_altman_limit_lines():
    svg = bland_altman_svg(bland_altman([1.0, 0.0], [0.0, 1.0]))
    lines = _lines(svg)
    assert abs(float(lines["limit-line upper"].get("data-y")) - 2.7719) < 1e-3
    assert abs(float(lines["limit-line lower"].get("data-y")) + 2.7719) < 1e-3
    assert lines["mean-line"].get("stroke-dasharray") == MEAN_DASH
    assert lines["limit-line upper"].get("stroke-dasharray") == LIMIT_DASH
    assert len(re.findall(r'class="point"', svg)) == 2


def test_bland_altman_points_inside_plot_area():
    rng = np.random.default_rng(4)
    a = rng.normal(3000, 300, 40)
    svg = bland_altman_svg(bland_altman(a, a + rng.normal(0, 50, 40)))
    root = ET.fromstring(svg)
    frame = next(e for e in root.iter("{http://www.w3.org/2000/svg}rect"))
    x0, y0 = float(frame.get("x")), float(frame.get("y"))
    x1, y1 = x0 + float(frame.get("width")), y0 + float(frame.get("height"))
    for c in root.iter("{http://www.w3.org/2000/svg}circle"):
        assert x0 <= float(c.get("cx")) <= x1 and y0 <= float(c.get("cy")) <= y1


def test_bland_altman_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=30), rng.normal(size=30)
    p, q = tmp_path / "p.svg", tmp_path / "q.svg"
    render_bland_altman_svg(bland_altman(a, b), p)
    render_bland_altman_svg(bland_altman(a.copy(), b.copy()), q)
    assert p.read_bytes() == q.read_bytes()


def test_title_is_escaped():
    svg = bland_altman_svg(bland_altman([1.0, 2.0], [1.5, 2.5]), title="EFW <g> & more")
    ET.fromstring(svg)
    assert "&lt;g&gt; &amp;" in svg
