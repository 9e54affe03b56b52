"""Render experiment results as aligned text tables, CSV files and plots.

Output is deterministic for identical inputs: rows are sorted, floats are
fixed-format, and no timestamps appear in any table.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

ZERO_DIVISION_NOTE = ("note: precision/recall/F1 of a class with no support "
                      "are defined as 0 and included in the macro means")

MIB = 1024 * 1024


def _text_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"


def _write_csv(path, headers, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        writer.writerows(rows)


def recognition_table(records) -> tuple[list[str], list[list[str]]]:
    """Per (target domain, strategy) recognition metrics."""
    headers = ["target", "strategy", "accuracy", "macro_f1", "precision", "recall"]
    rows = []
    for r in sorted(records, key=lambda r: (r.fold_domain, r.strategy)):
        m = r.metrics
        rows.append([r.fold_domain, r.strategy, f"{m.accuracy:.4f}", f"{m.macro_f1:.4f}",
                     f"{m.macro_precision:.4f}", f"{m.macro_recall:.4f}"])
    return headers, rows


def parameter_table(records) -> tuple[list[str], list[list[str]]]:
    headers = ["strategy", "trainable_params", "total_params"]
    seen = {}
    for r in sorted(records, key=lambda r: (r.strategy, r.fold_domain)):
        seen.setdefault(r.strategy, (r.resources.trainable_params,
                                     r.resources.total_params))
    rows = [[s, str(t), str(tot)] for s, (t, tot) in sorted(seen.items())]
    return headers, rows


def memory_table(records) -> tuple[list[str], list[list[str]]]:
    headers = ["strategy", "frozen_mb_equiv4", "trainable_mb_equiv4",
               "buffer_mb", "frozen_mb_stored"]
    seen = {}
    for r in sorted(records, key=lambda r: (r.strategy, r.fold_domain)):
        res = r.resources
        seen.setdefault(r.strategy, [
            f"{res.frozen_param_bytes_equiv4 / MIB:.2f}",
            f"{res.trainable_param_bytes_equiv4 / MIB:.2f}",
            f"{res.buffer_bytes_peak / MIB:.2f}",
            f"{res.frozen_param_bytes / MIB:.2f}",
        ])
    rows = [[s] + cells for s, cells in sorted(seen.items())]
    return headers, rows


def timing_table(records) -> tuple[list[str], list[list[str]]]:
    headers = ["target", "strategy", "train_seconds"]
    rows = [[r.fold_domain, r.strategy, f"{r.log.wall_seconds:.1f}"]
            for r in sorted(records, key=lambda r: (r.fold_domain, r.strategy))]
    return headers, rows


def rank_table(rows) -> tuple[list[str], list[list[str]]]:
    headers = ["rank", "macro_f1", "train_seconds", "trainable_params"]
    out = [[str(r.rank), f"{r.macro_f1:.4f}", f"{r.seconds:.1f}",
            str(r.trainable_params)] for r in sorted(rows, key=lambda r: r.rank)]
    return headers, out


def split_table(rows) -> tuple[list[str], list[list[str]]]:
    strategies = sorted({s for r in rows for s in r.accuracy})
    headers = ["train_fraction"] + [f"{s}_accuracy" for s in strategies] + ["lora_over_full"]
    out = []
    for r in sorted(rows, key=lambda r: -r.train_fraction):
        cells = [f"{r.train_fraction:.1f}"]
        cells += [f"{r.accuracy[s]:.4f}" for s in strategies]
        cells.append("" if r.lora_over_full is None else f"{r.lora_over_full:.4f}")
        out.append(cells)
    return headers, out


def render(headers, rows, title: str) -> str:
    return f"{title}\n{_text_table(headers, rows)}"


def write_report(out_dir, records=None, rank_rows=None, split_rows=None,
                 plots: bool = False) -> list[str]:
    """Write every table whose inputs were given; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    text = io.StringIO()
    if records:
        sections = [
            ("recognition", recognition_table(records)),
            ("parameters", parameter_table(records)),
            ("memory", memory_table(records)),
            ("training_time", timing_table(records)),
        ]
        for name, (headers, rows) in sections:
            text.write(render(headers, rows, name) + "\n")
            _write_csv(out_dir / f"{name}.csv", headers, rows)
            written.append(str(out_dir / f"{name}.csv"))
    if rank_rows:
        headers, rows = rank_table(rank_rows)
        text.write(render(headers, rows, "rank_sweep") + "\n")
        _write_csv(out_dir / "rank_sweep.csv", headers, rows)
        written.append(str(out_dir / "rank_sweep.csv"))
        if plots:
            written.append(plot_rank_sweep(rank_rows, out_dir / "rank_sweep.png"))
    if split_rows:
        headers, rows = split_table(split_rows)
        text.write(render(headers, rows, "split_sweep") + "\n")
        _write_csv(out_dir / "split_sweep.csv", headers, rows)
        written.append(str(out_dir / "split_sweep.csv"))
    text.write(ZERO_DIVISION_NOTE + "\n")
    report_path = out_dir / "report.txt"
    report_path.write_text(text.getvalue())
    written.append(str(report_path))
    return written


def plot_rank_sweep(rows, path) -> str:
    """Macro-F1 and training time against adapter rank, two y axes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sorted(rows, key=lambda r: r.rank)
    ranks = [r.rank for r in rows]
    f1s = [r.macro_f1 for r in rows]
    seconds = [r.seconds for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(ranks, f1s, "o-", color="tab:blue", label="macro F1")
    ax1.set_xlabel("adapter rank")
    ax1.set_ylabel("macro F1", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(ranks, seconds, "s--", color="tab:orange", label="train seconds")
    ax2.set_ylabel("training time (s)", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
