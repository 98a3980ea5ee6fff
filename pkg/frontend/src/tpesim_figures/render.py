"""Metric panels and zipper plots over harness result CSVs.

Rendering is read-only: every number plotted comes from the CSVs (the
zipper plot recovers each scenario's true value as mean estimate minus
reported bias; nothing is re-estimated here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "tpesim-figures"  # stable ids
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import SchemaError, scenario_number  # noqa: E402

METRICS = ("bias", "sd", "se", "power", "coverage", "rmse")
_METRIC_COLUMN = {"se": "mean_se"}
_METRIC_LABEL = {
    "bias": "bias in the final-visit treatment effect",
    "sd": "SD of the treatment-effect estimates",
    "se": "average model SE",
    "power": "power against the margin",
    "coverage": "95% CI coverage",
    "rmse": "root mean squared error",
}

METHOD_ORDER = ("FULL", "MMRM1", "MMRM2", "MMRM3", "MI1", "MI2", "MI3",
                "J2R", "CIR", "CR")

ZIPPER_ZOOM_FRACTION = 0.15


def _save_kwargs(fmt: str) -> dict:
    # drop the creation date so identical inputs give identical bytes
    return {"metadata": {"Date": None}} if fmt == "svg" else {}



@dataclass(frozen=True)
class FigureSpec:
    metric: str
    facet: str | None = None  # shift_model value; None renders every facet
    methods: tuple[str, ...] = ()  # empty means every method present
    formats: tuple[str, ...] = ("png", "svg")

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {METRICS}")


def _series(rows, metric_col, methods):
    series = {}
    for row in rows:
        m = row["method"]
        if methods and m not in methods:
            continue
        if row[metric_col] is None:
            continue
        series.setdefault(m, []).append((scenario_number(row["scenario_id"]), row[metric_col]))
    for m, pts in series.items():
        pts.sort()
        series[m] = (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    return series


def _ordered_methods(series):
    present = list(series)
    return [m for m in METHOD_ORDER if m in present] + \
           [m for m in present if m not in METHOD_ORDER]


def render(results_rows, spec: FigureSpec, out_dir) -> list[Path]:
    """One metric panel per facet; returns the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_col = _METRIC_COLUMN.get(spec.metric, spec.metric)
    facets = [spec.facet] if spec.facet else sorted({r["shift_model"] for r in results_rows})
    written = []
    for facet in facets:
        rows = [r for r in results_rows if r["shift_model"] == facet]
        series = _series(rows, metric_col, spec.methods)
        if not series:
            raise SchemaError(f"no rows with metric {spec.metric!r} for facet {facet!r}")
        fig, ax = plt.subplots(figsize=(7.2, 4.6))
        for m in _ordered_methods(series):
            x, y = series[m]
            ax.plot(x, y, marker="o", markersize=3.5, linewidth=1.4, label=m)
        if spec.metric == "bias":
            ax.axhline(0.0, color="0.4", linewidth=0.8, linestyle="--")
        if spec.metric == "coverage":
            ax.axhline(0.95, color="0.4", linewidth=0.8, linestyle="--")
        ax.set_xlabel("missingness scenario")
        ax.set_ylabel(_METRIC_LABEL[spec.metric])
        ax.set_xticks(range(1, 7))
        ax.set_title(f"{_METRIC_LABEL[spec.metric]} ({facet} change)")
        ax.legend(fontsize=7, ncol=2, frameon=False)
        fig.tight_layout()
        for fmt in spec.formats:
            path = out_dir / f"{spec.metric}_{facet}.{fmt}"
            fig.savefig(path, **_save_kwargs(fmt))
            written.append(path)
        plt.close(fig)
    return written


@dataclass
class ZipperData:
    method: str
    delta_true: float
    ci_lo: np.ndarray  # worst fraction, sorted by |z| descending
    ci_hi: np.ndarray
    covers: np.ndarray
    coverage: float  # over every replicate
    coverage_ci: tuple[float, float]
    compatible: bool = field(default=False)

    def __post_init__(self):
        lo, hi = self.coverage_ci
        self.compatible = lo <= 0.95 <= hi


def zipper_data(replicate_rows, results_rows, scenario_id, method) -> ZipperData:
    """Worst-|z| slice of one method's replicate CIs for one scenario.

    The true value is recovered from the results file as mean(estimate)
    minus the reported bias; coverage compatibility uses the binomial 95%
    interval around the all-replicate coverage estimate.
    """
    reps = [r for r in replicate_rows
            if r["scenario_id"] == scenario_id and r["method"] == method
            and r["estimate"] is not None]
    if not reps:
        raise SchemaError(f"no replicate rows for {scenario_id}/{method}")
    res = [r for r in results_rows
           if r["scenario_id"] == scenario_id and r["method"] == method]
    if not res:
        raise SchemaError(f"no results row for {scenario_id}/{method}")
    est = np.array([r["estimate"] for r in reps])
    se = np.array([r["se"] for r in reps])
    lo = np.array([r["ci_lo"] for r in reps])
    hi = np.array([r["ci_hi"] for r in reps])
    delta = float(est.mean() - res[0]["bias"])
    covers = (lo <= delta) & (delta <= hi)
    coverage = float(covers.mean())
    n = covers.size
    half = 1.96 * math.sqrt(max(coverage * (1 - coverage), 1e-12) / n)
    z = np.abs((est - delta) / np.where(se > 0, se, np.inf))
    order = np.argsort(-z)
    keep = order[: max(1, math.ceil(ZIPPER_ZOOM_FRACTION * n))]
    return ZipperData(
        method=method,
        delta_true=delta,
        ci_lo=lo[keep],
        ci_hi=hi[keep],
        covers=covers[keep],
        coverage=coverage,
        coverage_ci=(coverage - half, coverage + half),
    )


def render_zipper(replicate_rows, results_rows, scenario_id, out_dir,
                  methods=(), formats=("png", "svg")) -> list[Path]:
    """Zipper panel: per method, the worst 15% of replicate CIs by |z|."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    present = {r["method"] for r in replicate_rows if r["scenario_id"] == scenario_id}
    if methods:
        present &= set(methods)
    ordered = [m for m in METHOD_ORDER if m in present] + \
              [m for m in sorted(present) if m not in METHOD_ORDER]
    if not ordered:
        raise SchemaError(f"no methods found for scenario {scenario_id!r}")
    ncol = min(len(ordered), 5)
    nrow = math.ceil(len(ordered) / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.5 * ncol, 3.2 * nrow),
                             squeeze=False, sharey=True)
    for k, method in enumerate(ordered):
        ax = axes[k // ncol][k % ncol]
        data = zipper_data(replicate_rows, results_rows, scenario_id, method)
        ranks = np.linspace(100.0 * (1 - ZIPPER_ZOOM_FRACTION), 100.0, data.ci_lo.size)
        for i in range(data.ci_lo.size):
            color = "#6699cc" if data.covers[i] else "#cc3333"
            ax.plot([data.ci_lo[i], data.ci_hi[i]], [ranks[i], ranks[i]],
                    color=color, linewidth=0.7)
        ax.axvline(data.delta_true, color="0.2", linewidth=0.9)
        box_color = "#2a7d2a" if data.compatible else "#b02020"
        ax.set_title(
            f"{method}\ncoverage {data.coverage * 100:.1f}% "
            f"[{data.coverage_ci[0] * 100:.1f}, {data.coverage_ci[1] * 100:.1f}]",
            fontsize=8, color=box_color)
        ax.set_ylim(100.0 * (1 - ZIPPER_ZOOM_FRACTION) - 0.5, 100.5)
        ax.tick_params(labelsize=7)
    for k in range(len(ordered), nrow * ncol):
        axes[k // ncol][k % ncol].axis("off")
    axes[0][0].set_ylabel("centile of |z|")
    fig.suptitle(f"zipper plot, worst {int(ZIPPER_ZOOM_FRACTION * 100)}% of runs "
                 f"({scenario_id})", fontsize=10)
    fig.tight_layout()
    written = []
    for fmt in formats:
        path = out_dir / f"zipper_{scenario_id}.{fmt}"
        fig.savefig(path, **_save_kwargs(fmt))
        written.append(path)
    plt.close(fig)
    return written


def bias_ordering(results_rows, shift_model: str) -> dict:
    """Summaries the bias panel is judged by: magnitude of the average bias
    per method across scenarios, on one facet."""
    rows = [r for r in results_rows if r["shift_model"] == shift_model]
    series = _series(rows, "bias", ())
    return {m: float(np.abs(v[1]).mean()) for m, v in series.items()}
