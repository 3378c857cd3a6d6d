from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

import matplotlib
from matplotlib.figure import Figure

from .common.errors import DomainError

SVG_HASH_SALT = "mdlm-lab"


class ChartType(str, Enum):
    """
    Chart types

    **Enum Members**:
        - `LINE` ("line")
        - `COMPOSITE_CHART` ("composite_chart")
        - `UNKNOWN` ("unknown")
    """

    LINE = "line"
    COMPOSITE_CHART = "composite_chart"
    UNKNOWN = "unknown"


class Chart:
    """Represents a chart.

    Attributes:
        type (ChartType): The type of chart
        title (str): The title of the chart
        elements (List[Any]): The elements of the chart
    """

    type: ChartType
    title: str
    elements: List[Any]

    def __init__(self, **kwargs):
        self.type = kwargs.get("type")
        self.title = kwargs.get("title")
        self.elements = kwargs.get("elements", [])


class Chart2D(Chart):
    """Represents a 2D chart.

    Attributes:
        x_label (Optional[str]): The label of the x-axis
        y_label (Optional[str]): The label of the y-axis
    """

    x_label: Optional[str]
    y_label: Optional[str]

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.x_label = kwargs.get("x_label")
        self.y_label = kwargs.get("y_label")


class PointData:
    """Represents one labelled series of a line chart.

    Attributes:
        label (str): The label of the series
        points (List[Tuple[float, float]]): The points of the series, in drawing order
    """

    label: str
    points: List[Tuple[float, float]]

    def __init__(self, **kwargs):
        self.label = kwargs["label"]
        self.points = [(float(x), float(y)) for x, y in kwargs["points"]]


class LineChart(Chart2D):
    """Represents a line chart.

    Attributes:
        type (ChartType): The type of chart
        x_scale (str): The scale of the x-axis ("linear" or "log")
        y_scale (str): The scale of the y-axis
        elements (List[PointData]): The series of the chart
    """

    type: ChartType = ChartType.LINE

    x_scale: str
    y_scale: str
    elements: List[PointData]

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.type = ChartType.LINE
        self.x_scale = kwargs.get("x_scale") or "linear"
        self.y_scale = kwargs.get("y_scale") or "linear"
        self.elements = [PointData(**d) for d in kwargs.get("elements", [])]


class CompositeChart(Chart):
    """Represents a composite chart: several charts drawn side by side.

    Attributes:
        type (ChartType): The type of chart
        elements (List[Chart]): The charts (subplots) of the composite chart
    """

    type: ChartType = ChartType.COMPOSITE_CHART

    elements: List[Chart]

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.type = ChartType.COMPOSITE_CHART
        self.elements = [parse_chart(**element) for element in kwargs.get("elements", [])]


def parse_chart(**kwargs) -> Optional[Chart]:
    if not kwargs:
        return None

    chart_type = ChartType(kwargs.get("type", ChartType.UNKNOWN))

    match chart_type:
        case ChartType.LINE:
            return LineChart(**kwargs)
        case ChartType.COMPOSITE_CHART:
            return CompositeChart(**kwargs)
        case _:
            return Chart(**kwargs)


def _draw_line(axes, chart: LineChart) -> None:
    for series in chart.elements:
        xs = [x for x, _ in series.points]
        ys = [y for _, y in series.points]
        axes.plot(xs, ys, marker="o", label=series.label)
    axes.set_xscale(chart.x_scale)
    axes.set_yscale(chart.y_scale)
    if chart.title:
        axes.set_title(chart.title)
    if chart.x_label:
        axes.set_xlabel(chart.x_label)
    if chart.y_label:
        axes.set_ylabel(chart.y_label)
    if len(chart.elements) > 1:
        axes.legend()


def render_svg(chart: Chart, path: Union[str, Path]) -> None:
    """Writes a line or composite chart as SVG.

    Output is byte-stable for equal input: the SVG id salt is fixed and no date is embedded.

    Args:
        chart (Chart): A ``LineChart`` or a ``CompositeChart`` of line charts.
        path (Union[str, Path]): Destination file.

    Example:
        ```python
        chart = parse_chart(type="line", title="PPL", elements=[{"label": "semi-AR", "points": [(32, 9.1), (64, 7.4)]}])
        render_svg(chart, "ppl.svg")
        ```
    """
    panels = chart.elements if isinstance(chart, CompositeChart) else [chart]
    panels = [panel for panel in panels if isinstance(panel, LineChart)]
    if not panels:
        raise DomainError(f"Nothing to draw for chart type {chart.type}")
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        figure = Figure(figsize=(4.5 * len(panels), 3.5))
        for index, panel in enumerate(panels):
            _draw_line(figure.add_subplot(1, len(panels), index + 1), panel)
        if isinstance(chart, CompositeChart) and chart.title:
            figure.suptitle(chart.title)
        figure.tight_layout()
        figure.savefig(path, format="svg", metadata={"Date": None})
