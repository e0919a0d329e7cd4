"""Static SVG figures rendered from report data, each with the CSV it was drawn from."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PLOT_KINDS = ("accuracy", "sweep", "ood")

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.3,
    "lines.markersize": 4,
    "legend.frameon": False,
    "svg.hashsalt": "sprompts",
}

MODE_LABELS = {"dil": "DIL (routed)", "til": "TIL (oracle domain)", "random": "random domain",
               "vote": "vote", "zero_shot": "first-domain prompts"}

SWEEP_LABELS = {"kmeans_k": "K (centroids per domain)", "knn_k": "k (nearest centroids)",
                "image_prompt_len": "image prompt length", "language_prompt_len": "language prompt length"}


class PlotError(ValueError):
    pass


def write_csv(path, header, rows) -> None:
    # csv writes floats with str(), i.e. the same repr json uses
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def accuracy_curves(report: dict, out_dir) -> tuple[Path, Path]:
    """Running average accuracy after each session, one line per selection mode."""
    modes = report.get("modes") or {}
    if not modes:
        raise PlotError("report has no per-mode results")
    out = Path(out_dir)
    rows = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode, res in modes.items():
            curve = res["running_curve"]
            xs = list(range(1, len(curve) + 1))
            ax.plot(xs, [100 * v for v in curve], marker="o", label=MODE_LABELS.get(mode, mode))
            rows += [(mode, x, v) for x, v in zip(xs, curve)]
        ax.set_xlabel("session")
        ax.set_ylabel("average accuracy on seen domains (%)")
        ax.set_xticks(xs)
        ax.legend(fontsize=7)
        svg = out / "accuracy_curves.svg"
        _save(fig, svg)
    table = out / "accuracy_curves.csv"
    write_csv(table, ["mode", "session", "running_aa"], rows)
    return svg, table


def sweep_curves(ablation: dict, out_dir) -> tuple[Path, Path]:
    """Final DIL average accuracy against each swept hyperparameter."""
    groups: dict[str, list[dict]] = {}
    for row in ablation.get("rows", []):
        if row["group"] in SWEEP_LABELS:
            groups.setdefault(row["group"], []).append(row)
    if not groups:
        raise PlotError("ablation results hold no sweeps")
    out = Path(out_dir)
    rows = []
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(groups), figsize=(2.6 * len(groups), 2.6), squeeze=False)
        for ax, (group, cells) in zip(axes[0], groups.items()):
            ok = [c for c in cells if c["status"] == "ok"]
            ax.plot([c["value"] for c in ok], [100 * c["aa"] for c in ok], marker="o")
            ax.set_xlabel(SWEEP_LABELS[group])
            ax.set_xticks([c["value"] for c in cells])
            rows += [(group, c["value"], c["aa"], c["forgetting"], c["status"]) for c in cells]
        axes[0][0].set_ylabel("average accuracy (%)")
        fig.tight_layout()
        svg = out / "sweep_curves.svg"
        _save(fig, svg)
    table = out / "sweep_curves.csv"
    write_csv(table, ["sweep", "value", "aa", "forgetting", "status"], rows)
    return svg, table


def ood_curves(report: dict, out_dir) -> tuple[Path, Path]:
    """Accuracy on each held-out domain as sessions accumulate."""
    ood = report.get("ood")
    if not ood:
        raise PlotError("report has no OOD table")
    out = Path(out_dir)
    cols, names = ood["columns"], ood["column_domains"]
    first_ood = sum(1 for c in cols if c.startswith("S"))
    rows = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = list(range(1, len(ood["rows"]) + 1))
        for j in range(first_ood, len(cols)):
            ys = [r[j] for r in ood["rows"]]
            ax.plot(xs, [100 * v for v in ys], marker="s", label=f"{cols[j]} ({names[j]})")
            rows += [(cols[j], names[j], x, y) for x, y in zip(xs, ys)]
        ax.set_xlabel("checkpoint (sessions learned)")
        ax.set_ylabel("accuracy on unseen domain (%)")
        ax.set_xticks(xs)
        ax.legend(fontsize=7)
        svg = out / "ood_curves.svg"
        _save(fig, svg)
    table = out / "ood_curves.csv"
    write_csv(table, ["column", "domain", "checkpoint", "accuracy"], rows)
    return svg, table


def render(kinds, report: dict, ablation: dict | None, out_dir) -> list[Path]:
    """Render the requested plot kinds; returns the SVG paths in request order."""
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    svgs = []
    for kind in kinds:
        if kind == "accuracy":
            svgs.append(accuracy_curves(report, out_dir)[0])
        elif kind == "sweep":
            if ablation is None:
                raise PlotError("sweep curves need ablation results (run `ablate` first)")
            svgs.append(sweep_curves(ablation, out_dir)[0])
        elif kind == "ood":
            svgs.append(ood_curves(report, out_dir)[0])
        else:
            raise PlotError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    return svgs
