"""Localization accuracy at distance thresholds, sweeps, and report emission.

A query is correctly localized when its top-1 retrieved reference lies
within the distance threshold of the query's true location. The upper bound
ignores features entirely: it asks how many queries have any reference
within the threshold, which is the best any feature could do on the chosen
reference set.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .geodata import Dataset
from .retrieval import ReferenceMap, build_reference_map, localize_many


def accuracy(query_features, query_locations, ref_map: ReferenceMap, d: float) -> float:
    """Fraction of queries whose retrieved reference is within d meters."""
    query_features = np.asarray(query_features, dtype=float)
    query_locations = np.asarray(query_locations, dtype=float)
    if len(query_features) == 0:
        raise ContractViolation("empty query set")
    retrieved, _, _ = localize_many(query_features, ref_map)
    err = np.hypot(*(retrieved - query_locations).T)
    return float(np.mean(err <= d))


def upper_bound(query_locations, ref_map: ReferenceMap, d: float) -> float:
    """Fraction of queries with a geometrically reachable reference within d."""
    query_locations = np.asarray(query_locations, dtype=float)
    if len(query_locations) == 0:
        raise ContractViolation("empty query set")
    nearest = geometric_nearest_distances(query_locations, ref_map)
    return float(np.mean(nearest <= d))


def geometric_nearest_distances(query_locations, ref_map: ReferenceMap) -> np.ndarray:
    query_locations = np.asarray(query_locations, dtype=float)
    out = np.empty(len(query_locations))
    block = 512
    for start in range(0, len(query_locations), block):
        chunk = query_locations[start : start + block]
        d2 = ((chunk[:, None, :] - ref_map.locations[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(chunk)] = np.sqrt(d2.min(axis=1))
    return out


@dataclass
class EvalCell:
    condition: str
    dim: int
    spacing: float
    threshold: float
    accuracy: float
    upper_bound: float
    n_queries: int


@dataclass
class EvalReport:
    cells: list[EvalCell]
    per_condition: dict[str, dict[float, float]]
    upper_bounds: dict[str, dict[float, float]]
    counts: dict[str, int]
    thresholds: tuple[float, ...]
    dims: tuple[int, ...]
    spacings: tuple[float, ...]
    default_dim: int
    default_spacing: float
    default_threshold: float


@dataclass(frozen=True)
class SweepAxes:
    thresholds: tuple[float, ...] = (10.0,)
    dims: tuple[int, ...] = (256,)
    spacings: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigurationError("thresholds must be positive and non-empty")
        if not self.dims or any(d < 1 for d in self.dims):
            raise ConfigurationError("dims must be >= 1 and non-empty")
        if not self.spacings or any(s < 0 for s in self.spacings):
            raise ConfigurationError("spacings must be >= 0 and non-empty")


@dataclass
class _CellGroup:
    """Retrieval results for one (dim, spacing) map shared by all thresholds."""

    err: np.ndarray
    nearest: np.ndarray
    conditions: list[str] = field(default_factory=list)


def sweep(
    queries: Dataset,
    references: Dataset,
    embed,
    axes: SweepAxes,
    *,
    default_threshold: float = 10.0,
) -> EvalReport:
    """Cartesian evaluation over (dims x spacings x thresholds), per condition.

    Dims are capped to the embedding dimension. The report's headline
    per-condition table is the slice at the default dim and spacing (the
    first axis values) across all thresholds.
    """
    if len(queries) == 0:
        raise ContractViolation("empty query set")
    q_feats_raw = np.asarray(embed(queries.descriptors), dtype=float)
    s = q_feats_raw.shape[1]
    dims = tuple(min(int(d), s) for d in axes.dims)
    conditions = sorted(set(queries.conditions))
    cond_masks = {c: np.array([qc == c for qc in queries.conditions]) for c in conditions}

    cells: list[EvalCell] = []
    groups: dict[tuple[int, float], _CellGroup] = {}
    for dim in dims:
        for spacing in axes.spacings:
            ref_map = build_reference_map(references, embed, dim=dim, spacing=spacing)
            retrieved, _, _ = localize_many(ref_map.project(q_feats_raw), ref_map)
            err = np.hypot(*(retrieved - queries.locations).T)
            nearest = geometric_nearest_distances(queries.locations, ref_map)
            groups[(dim, spacing)] = _CellGroup(err=err, nearest=nearest)
            for cond in conditions:
                mask = cond_masks[cond]
                for t in axes.thresholds:
                    cells.append(
                        EvalCell(
                            condition=cond,
                            dim=dim,
                            spacing=float(spacing),
                            threshold=float(t),
                            accuracy=float(np.mean(err[mask] <= t)),
                            upper_bound=float(np.mean(nearest[mask] <= t)),
                            n_queries=int(mask.sum()),
                        )
                    )

    default_dim, default_spacing = dims[0], float(axes.spacings[0])
    head = groups[(default_dim, default_spacing)]
    per_condition = {
        c: {
            float(t): float(np.mean(head.err[cond_masks[c]] <= t))
            for t in axes.thresholds
        }
        for c in conditions
    }
    upper_bounds = {
        c: {
            float(t): float(np.mean(head.nearest[cond_masks[c]] <= t))
            for t in axes.thresholds
        }
        for c in conditions
    }
    counts = {c: int(cond_masks[c].sum()) for c in conditions}
    return EvalReport(
        cells=cells,
        per_condition=per_condition,
        upper_bounds=upper_bounds,
        counts=counts,
        thresholds=tuple(float(t) for t in axes.thresholds),
        dims=dims,
        spacings=tuple(float(s_) for s_ in axes.spacings),
        default_dim=default_dim,
        default_spacing=default_spacing,
        default_threshold=float(default_threshold),
    )


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("condition,dim,spacing,threshold,accuracy,upper_bound,n_queries\n")
        for c in report.cells:
            fh.write(
                f"{c.condition},{c.dim},{c.spacing!r},{c.threshold!r},"
                f"{c.accuracy!r},{c.upper_bound!r},{c.n_queries}\n"
            )


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _svg_line_chart(series, title: str, x_label: str, path) -> None:
    """Minimal deterministic SVG line chart; accuracy is always on [0, 1]."""
    width, height = 640, 420
    left, right, top, bottom = 60, 170, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    xs_all = [x for _, pts in series for x in pts[0]]
    x_min, x_max = min(xs_all), max(xs_all)
    if x_max == x_min:
        x_max = x_min + 1.0

    def px(x):
        return left + plot_w * (x - x_min) / (x_max - x_min)

    def py(y):
        return top + plot_h * (1.0 - y)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="20" font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#888"/>',
    ]
    for k in range(5):
        frac = k / 4.0
        xv = x_min + frac * (x_max - x_min)
        yv = frac
        lines.append(
            f'<line x1="{px(xv):.1f}" y1="{top + plot_h}" x2="{px(xv):.1f}" '
            f'y2="{top + plot_h + 5}" stroke="#444"/>'
        )
        lines.append(
            f'<text x="{px(xv):.1f}" y="{top + plot_h + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{xv:.4g}</text>'
        )
        lines.append(
            f'<text x="{left - 8}" y="{py(yv):.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{yv:.2f}</text>'
        )
    lines.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{x_label}</text>'
    )
    for i, (name, (xs, ys)) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        dash = ' stroke-dasharray="6,3"' if name == "upper bound" else ""
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        lines.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
            f'points="{points}"/>'
        )
        ly = top + 14 + 16 * i
        lines.append(
            f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 30}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>'
        )
        lines.append(
            f'<text x="{width - right + 36}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{name}</text>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _cell_lookup(report: EvalReport):
    return {
        (c.condition, c.dim, c.spacing, c.threshold): c for c in report.cells
    }


def write_sweep_svgs(report: EvalReport, out_dir) -> list[str]:
    """One line chart per sweep axis, other axes held at their defaults."""
    lut = _cell_lookup(report)
    conditions = sorted(report.counts)
    written = []

    def default_t():
        return (
            report.default_threshold
            if report.default_threshold in report.thresholds
            else report.thresholds[0]
        )

    # accuracy vs threshold
    series = [
        (
            c,
            (
                list(report.thresholds),
                [
                    lut[(c, report.default_dim, report.default_spacing, t)].accuracy
                    for t in report.thresholds
                ],
            ),
        )
        for c in conditions
    ]
    pooled_ub = [
        sum(
            lut[(c, report.default_dim, report.default_spacing, t)].upper_bound
            * report.counts[c]
            for c in conditions
        )
        / sum(report.counts.values())
        for t in report.thresholds
    ]
    series.append(("upper bound", (list(report.thresholds), pooled_ub)))
    path = os.path.join(out_dir, "sweep_threshold.svg")
    _svg_line_chart(series, "accuracy vs distance threshold", "threshold [m]", path)
    written.append(path)

    # accuracy vs dim
    series = [
        (
            c,
            (
                [float(d) for d in report.dims],
                [
                    lut[(c, d, report.default_spacing, default_t())].accuracy
                    for d in report.dims
                ],
            ),
        )
        for c in conditions
    ]
    path = os.path.join(out_dir, "sweep_dim.svg")
    _svg_line_chart(series, "accuracy vs feature dimension", "dim after PCA", path)
    written.append(path)

    # accuracy vs spacing
    series = [
        (
            c,
            (
                list(report.spacings),
                [
                    lut[(c, report.default_dim, sp, default_t())].accuracy
                    for sp in report.spacings
                ],
            ),
        )
        for c in conditions
    ]
    path = os.path.join(out_dir, "sweep_spacing.svg")
    _svg_line_chart(series, "accuracy vs reference spacing", "spacing l [m]", path)
    written.append(path)
    return written
