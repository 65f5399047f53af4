"""Metrics, cross-evaluation grids, exemplar sweeps and CSV/SVG reports.

All errors are mean squared errors on normalized targets, one per output
(focal, pitch, roll in network order); ``mu_mse`` is their mean.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .incremental import BiCParams, DomainData, StrategyConfig, train_incremental
from .nn.train import TrainConfig

CSV_COLUMNS = ("model", "dataset", "mse_focal", "mse_roll", "mse_pitch", "mu_mse", "n")


@dataclass(frozen=True)
class EvalReport:
    model: str
    dataset: str
    mse_focal: float
    mse_roll: float
    mse_pitch: float
    n: int
    corrected: bool = False

    @property
    def mu_mse(self) -> float:
        return (self.mse_focal + self.mse_roll + self.mse_pitch) / 3.0

    def row(self) -> dict:
        return {"model": self.model, "dataset": self.dataset, "mse_focal": self.mse_focal,
                "mse_roll": self.mse_roll, "mse_pitch": self.mse_pitch, "mu_mse": self.mu_mse, "n": self.n}


def channel_mse(pred, targets) -> np.ndarray:
    """Per-output MSE accumulated in float64; the sum is order independent up to rounding."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return np.einsum("ij,ij->j", err, err) / len(err)


def report_from_predictions(pred, targets, model="model", dataset="dataset", corrected=False) -> EvalReport:
    if len(targets) == 0:
        raise ValueError(f"empty dataset {dataset!r}")
    focal, pitch, roll = channel_mse(pred, targets)
    return EvalReport(model, dataset, float(focal), float(roll), float(pitch), int(len(targets)), corrected)


def evaluate(net, dataset, bic_params: BiCParams | None = None, model: str | None = None) -> list:
    """Reports for ``net`` on ``dataset``: the raw one, plus a BiC-corrected
    one when ``bic_params`` is given."""
    if dataset is None or len(dataset) == 0:
        raise ValueError(f"empty dataset {getattr(dataset, 'name', '')!r}".rstrip())
    model = model or net.config.name
    pred = net.predict(dataset.images)
    out = [report_from_predictions(pred, dataset.targets, model, dataset.name)]
    if bic_params is not None:
        q = pred * bic_params.alpha + bic_params.beta
        out.append(report_from_predictions(q, dataset.targets, model + "+bic", dataset.name, corrected=True))
    return out


def cross_evaluate(models: dict, datasets: dict) -> list:
    """Every model on every dataset (Table-1 layout: 2 models x 4 sets).

    ``models`` maps a model id to a network and ``datasets`` a dataset id to an
    ArrayDataset; the result is a row-major grid of reports.
    """
    if not models or not datasets:
        raise ValueError("cross evaluation needs at least one model and one dataset")
    grid = []
    for mid, net in models.items():
        row = []
        for did, ds in datasets.items():
            row.append(replace(evaluate(net, ds)[0], model=mid, dataset=did))
        grid.append(row)
    return grid


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)  # (pct, mu_mse_old, mu_mse_new)
    strategy: str = "icarl"

    def __post_init__(self):
        pcts = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(pcts, pcts[1:])):
            raise ValueError("sweep percentages must be strictly increasing")

    @property
    def pcts(self) -> list:
        return [r[0] for r in self.rows]

    def old(self) -> list:
        return [r[1] for r in self.rows]

    def new(self) -> list:
        return [r[2] for r in self.rows]


def exemplar_sweep(base, old: DomainData, new: DomainData, pcts, cfg: TrainConfig,
                   strategy: StrategyConfig | None = None, runs: dict | None = None) -> SweepResult:
    """One incremental run per exemplar percentage with identical seed and epochs.

    Old/new muMSE are measured on ``old.val`` and ``new.val``. When ``runs`` is
    a dict it collects the IncrementalResult of each percentage.
    """
    strategy = strategy or StrategyConfig("icarl")
    pcts = sorted(set(float(p) for p in pcts))
    if not pcts:
        raise ValueError("no exemplar percentages given")
    if pcts[0] < 0 or pcts[-1] > 100:
        raise ValueError("exemplar percentages must lie in [0, 100]")
    rows = []
    for pct in pcts:
        res = train_incremental(base, old, new, replace(strategy, exemplar_pct=pct), cfg)
        pick = -1 if res.bic is not None else 0
        r_old = evaluate(res.net, old.val, res.bic)[pick]
        r_new = evaluate(res.net, new.val, res.bic)[pick]
        rows.append((pct, r_old.mu_mse, r_new.mu_mse))
        if runs is not None:
            runs[pct] = res
    return SweepResult(rows, strategy.kind)


# ---------------------------------------------------------------- emission


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def sweep_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("exemplar_pct", "mu_mse_old", "mu_mse_new"))
    for row in sweep.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def report_filename(model: str, dataset: str, timestamp: str, ext: str = "csv") -> str:
    safe = lambda s: "".join(c if c.isalnum() or c in "-_." else "-" for c in s)  # noqa: E731
    return f"{safe(model)}_{safe(dataset)}_{timestamp}.{ext}"


W, H, PAD_L, PAD_R, PAD_T, PAD_B = 640, 400, 70, 150, 40, 60
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_frame(title: str, ylabel: str, xlabel: str, ymax: float) -> list:
    ph = H - PAD_T - PAD_B
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<line x1="{PAD_L}" y1="{H - PAD_B}" x2="{W - PAD_R}" y2="{H - PAD_B}" stroke="black"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{H - PAD_B}" stroke="black"/>',
        f'<text x="{(PAD_L + W - PAD_R) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(xlabel)}</text>',
        f'<text x="18" y="{PAD_T + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {PAD_T + ph / 2:.1f})">{escape(ylabel)}</text>',
    ]
    for i in range(5):
        v = ymax * i / 4
        y = H - PAD_B - ph * i / 4
        out.append(f'<line x1="{PAD_L - 4}" y1="{y:.1f}" x2="{PAD_L}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{PAD_L - 7}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3g}</text>')
    return out


def _legend(names) -> list:
    out = []
    for i, name in enumerate(names):
        y = PAD_T + 10 + 20 * i
        x = W - PAD_R + 15
        out.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" fill="{COLORS[i % len(COLORS)]}"/>')
        out.append(f'<text x="{x + 18}" y="{y + 2}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    return out


def _nice_max(values) -> float:
    m = max([float(v) for v in values] + [1e-12])
    mag = 10 ** np.floor(np.log10(m))
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= m:
            return float(step * mag)
    return float(10 * mag)


def reports_svg(reports, title: str = "muMSE by model and dataset") -> str:
    """Grouped bars: one group per dataset, one bar color per model."""
    models = list(dict.fromkeys(r.model for r in reports))
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    vals = {(r.model, r.dataset): r.mu_mse for r in reports}
    ymax = _nice_max(vals.values())
    out = _svg_frame(title, "muMSE", "dataset", ymax)
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    gw = pw / len(datasets)
    bw = gw * 0.8 / len(models)
    for j, d in enumerate(datasets):
        x0 = PAD_L + j * gw + gw * 0.1
        for i, m in enumerate(models):
            if (m, d) not in vals:
                continue
            h = ph * vals[(m, d)] / ymax
            out.append(f'<rect x="{x0 + i * bw:.1f}" y="{H - PAD_B - h:.1f}" width="{bw:.1f}" height="{h:.1f}" '
                       f'fill="{COLORS[i % len(COLORS)]}"/>')
        out.append(f'<text x="{PAD_L + (j + 0.5) * gw:.1f}" y="{H - PAD_B + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{escape(d)}</text>')
    out += _legend(models)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def sweep_svg(sweep: SweepResult, names=("old domain", "new domain"), title: str | None = None) -> str:
    """Line chart of muMSE against exemplar percentage, one series per domain."""
    title = title or f"{sweep.strategy}: muMSE vs exemplar percentage"
    ymax = _nice_max(sweep.old() + sweep.new())
    out = _svg_frame(title, "muMSE", "exemplars (%)", ymax)
    pw, ph = W - PAD_L - PAD_R, H - PAD_T - PAD_B
    sx = lambda p: PAD_L + pw * p / 100.0  # noqa: E731
    sy = lambda v: H - PAD_B - ph * v / ymax  # noqa: E731
    for p in (0, 25, 50, 75, 100):
        out.append(f'<text x="{sx(p):.1f}" y="{H - PAD_B + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{p}</text>')
    for i, series in enumerate((sweep.old(), sweep.new())):
        color = COLORS[i]
        pts = " ".join(f"{sx(p):.1f},{sy(v):.1f}" for p, v in zip(sweep.pcts, series))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p, v in zip(sweep.pcts, series):
            out.append(f'<circle cx="{sx(p):.1f}" cy="{sy(v):.1f}" r="3" fill="{color}"/>')
    out += _legend(names)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(reports, path, fmt: str | None = None) -> Path:
    """Write reports (a list of EvalReport or a SweepResult) as CSV or SVG."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "svg"):
        raise ValueError(f"unknown report format {fmt!r}; use csv or svg")
    if isinstance(reports, SweepResult):
        if not reports.rows:
            raise ValueError("empty sweep result")
        text = sweep_csv(reports) if fmt == "csv" else sweep_svg(reports)
    else:
        reports = list(reports)
        if not reports:
            raise ValueError("no reports to emit")
        text = reports_csv(reports) if fmt == "csv" else reports_svg(reports)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    return path
