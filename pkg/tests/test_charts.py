import pytest

from mdlm_lab.charts import ChartType, CompositeChart, LineChart, parse_chart, render_svg
from mdlm_lab.common.errors import DomainError, LabError


def _line(title="PPL"):
    return {
        "type": "line",
        "title": title,
        "x_label": "S",
        "x_scale": "log",
        "elements": [{"label": "semi-AR", "points": [(32, 9.1), (64, 7.4)]}, {"label": "conv", "points": [(32, 8.0)]}],
    }


def test_parse_chart_dispatches_on_type():
    assert parse_chart() is None
    chart = parse_chart(**_line())
    assert isinstance(chart, LineChart)
    assert chart.x_scale == "log" and chart.y_scale == "linear"
    assert chart.elements[0].points == [(32.0, 9.1), (64.0, 7.4)]
    composite = parse_chart(type="composite_chart", title="sweep", elements=[_line("a"), _line("b")])
    assert isinstance(composite, CompositeChart)
    assert [panel.title for panel in composite.elements] == ["a", "b"]
    assert parse_chart(type="unknown", title="x").type == ChartType.UNKNOWN


def test_render_svg_is_byte_stable(tmp_path):
    chart = parse_chart(type="composite_chart", title="sweep", elements=[_line("a"), _line("b")])
    first, second = tmp_path / "a.svg", tmp_path / "b.svg"
    render_svg(chart, first)
    render_svg(chart, second)
    assert first.read_bytes().startswith(b"<?xml")
    assert first.read_bytes() == second.read_bytes()


def test_render_svg_needs_a_line_chart(tmp_path):
    with pytest.raises(DomainError, match="Nothing to draw") as error:
        render_svg(parse_chart(type="unknown"), tmp_path / "x.svg")
    assert isinstance(error.value, LabError)
    assert not (tmp_path / "x.svg").exists()
