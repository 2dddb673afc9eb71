"""Diagnostics and machine-readable reports.

This module computes the diagnostic quantities (rank correlation, module
separation, cross-partition overlap) and writes them as CSVs plus one
structured-text summary. It never plots; figure rendering happens in the CLI
report path on top of these files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rmp import ThresholdLogRow

UNITS_HEADER = "layer,unit_type,index,score,rank,drift"
MASKS_HEADER = "layer,unit_type,index,mask"
MODULES_HEADER = "layer,neuron,module,soft_max_prob,drift"
DIAG_HEADER = "layer,kendall_tau,mss"
THRESHOLD_LOG_HEADER = "step,l_perf,l_constr,r_soft,r_hard,lambda,g"
OVERLAP_HEADER = "module_a,module_b,intersection,union,iou"


def kendall_tau(ranks_a: np.ndarray, ranks_b: np.ndarray) -> float:
    """Tie-aware Kendall tau-b over all pairs (O(N^2), fine at desk scale)."""
    x = np.asarray(ranks_a, dtype=np.float64)
    y = np.asarray(ranks_b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("rank vectors must be 1-D and equal length")
    n = x.size
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 items")
    dx = np.sign(x[:, None] - x[None, :])
    dy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    s = dx[iu] * dy[iu]
    n0 = n * (n - 1) // 2
    tx = int(np.sum(dx[iu] == 0))
    ty = int(np.sum(dy[iu] == 0))
    denom = np.sqrt(float(n0 - tx) * float(n0 - ty))
    if denom == 0.0:
        raise ValueError("kendall_tau undefined: all pairs tied")
    return float(np.sum(s) / denom)


class MssUndefinedError(ValueError):
    """All modules have zero within-module drift spread; the ratio is undefined."""


def mss(assignment: np.ndarray, drifts: np.ndarray) -> float:
    """Module separation score: Std over modules of the mean drift divided by
    the mean over modules of the within-module drift std (population stds)."""
    assignment = np.asarray(assignment)
    drifts = np.asarray(drifts, dtype=np.float64)
    labels = np.unique(assignment)
    if labels.size < 2:
        raise ValueError("mss needs at least 2 modules")
    mu = np.array([drifts[assignment == k].mean() for k in labels])
    sigma = np.array([drifts[assignment == k].std() for k in labels])
    denom = sigma.mean()
    if denom == 0.0:
        raise MssUndefinedError("all within-module drift stds are zero")
    return float(mu.std() / denom)


@dataclass
class OverlapResult:
    """One-to-one matched module comparison between two partitions."""

    pairing: list[tuple[int, int]]       # (module in A, module in B), real modules only
    matched_accuracy: float
    matched_iou: float
    pair_intersections: list[int]
    padded: bool                          # module counts differed


def module_overlap(assignment_a: np.ndarray, assignment_b: np.ndarray) -> OverlapResult:
    """Match modules one-to-one to maximize total intersection, then score.

    Matched accuracy is the fraction of units whose matched modules agree;
    matched IoU averages intersection-over-union across the matched pairs in
    which both sides are real (nonempty) modules. Unequal module counts are
    handled by padding the smaller side with empty virtual modules.
    """
    a = np.asarray(assignment_a)
    b = np.asarray(assignment_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("partitions must cover the same nonempty unit universe")
    ka = int(a.max()) + 1
    kb = int(b.max()) + 1
    n = a.size

    inter = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(inter, (a, b), 1)
    size = max(ka, kb)
    cost = np.zeros((size, size), dtype=np.int64)
    cost[:ka, :kb] = inter
    row, col = linear_sum_assignment(cost, maximize=True)

    pairing, intersections, ious = [], [], []
    matched = 0
    size_a = np.bincount(a, minlength=ka)
    size_b = np.bincount(b, minlength=kb)
    for r, c in zip(row, col):
        if r >= ka or c >= kb:
            continue
        cnt = int(inter[r, c])
        matched += cnt
        pairing.append((int(r), int(c)))
        intersections.append(cnt)
        union = int(size_a[r] + size_b[c] - cnt)
        ious.append(cnt / union if union > 0 else 0.0)
    return OverlapResult(
        pairing=pairing,
        matched_accuracy=matched / n,
        matched_iou=float(np.mean(ious)) if ious else 0.0,
        pair_intersections=intersections,
        padded=ka != kb,
    )


@dataclass
class PruneReport:
    """Everything one pruning run reports: masks, metric assignments,
    retention accounting, and the diagnostic metrics."""

    config_hash: str
    mode: str
    base_metric: str
    r_target: float
    retention_estimate: float
    retention_actual: float
    guard_flags: list[str]
    layer_widths: list[tuple[int, int, int, int, int]]  # layer, ffn kept/total, heads kept/total
    unit_rows: list[tuple] = field(default_factory=list)      # UNITS_HEADER order
    mask_rows: list[tuple] = field(default_factory=list)      # MASKS_HEADER order
    module_rows: list[tuple] = field(default_factory=list)    # MODULES_HEADER order
    module_summary: list[tuple] = field(default_factory=list) # layer, module, size, mean_drift, drift_std, tag, tau
    layer_diagnostics: list[tuple] = field(default_factory=list)  # DIAG_HEADER order
    threshold_log: list[ThresholdLogRow] = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, float) and np.isnan(v):
        return "undefined"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, config_hash: str, header: str, rows: list[tuple]) -> None:
    lines = [f"# config_hash={config_hash}", header]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: Path) -> tuple[str, list[str], list[list[str]]]:
    """Read back a report CSV; returns (config_hash, header fields, rows)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise ValueError(f"{path} is not a report CSV")
    config_hash = lines[0].split("=", 1)[1]
    header = lines[1].split(",")
    return config_hash, header, [line.split(",") for line in lines[2:] if line]


def emit_report(report: PruneReport, out_dir: str | Path) -> list[Path]:
    """Write all report files under ``out_dir`` with fixed names and column
    order; byte-identical across identical runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def csv(name: str, header: str, rows: list[tuple]) -> None:
        path = out / name
        write_csv(path, report.config_hash, header, rows)
        written.append(path)

    csv("units.csv", UNITS_HEADER, report.unit_rows)
    csv("masks.csv", MASKS_HEADER, report.mask_rows)
    csv("modules.csv", MODULES_HEADER, report.module_rows)
    csv("diagnostics.csv", DIAG_HEADER, report.layer_diagnostics)
    csv("threshold_log.csv", THRESHOLD_LOG_HEADER,
        [(r.step, r.l_perf, r.l_constr, r.r_soft, r.r_hard, r.lam, r.g)
         for r in report.threshold_log])

    summary = out / "module_summary.txt"
    lines = [f"config_hash = {report.config_hash}"]
    for row in report.module_summary:
        layer, module, size, mean_drift, drift_std, tag, tau = row
        lines.append(f"layer {layer} module {module}: size = {size}, "
                     f"mean_drift = {_fmt(mean_drift)}, drift_std = {_fmt(drift_std)}, "
                     f"metric = {tag}, tau = {_fmt(tau)}")
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(summary)

    rep = out / "report.txt"
    lines = [
        f"config_hash = {report.config_hash}",
        f"mode = {report.mode}",
        f"base_metric = {report.base_metric}",
        f"retention_target = {_fmt(report.r_target)}",
        f"retention_estimate = {_fmt(report.retention_estimate)}",
        f"retention_actual = {_fmt(report.retention_actual)}",
        f"guard_flags = {len(report.guard_flags)}",
    ]
    lines.extend(f"guard: {flag}" for flag in report.guard_flags)
    for layer, ffn_kept, ffn_total, heads_kept, heads_total in report.layer_widths:
        lines.append(f"layer {layer}: ffn_kept = {ffn_kept} / {ffn_total}, "
                     f"heads_kept = {heads_kept} / {heads_total}")
    rep.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(rep)
    return written


def write_overlap_csv(path: Path, config_hash: str, result: OverlapResult,
                      size_a: np.ndarray, size_b: np.ndarray) -> None:
    rows = []
    for (ka, kb), cnt in zip(result.pairing, result.pair_intersections):
        union = int(size_a[ka] + size_b[kb] - cnt)
        rows.append((ka, kb, cnt, union, cnt / union if union else 0.0))
    rows.append(("summary", "acc", result.matched_accuracy, "iou", result.matched_iou))
    write_csv(Path(path), config_hash, OVERLAP_HEADER, rows)
