import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from specdraft.bench.grid import BenchResult, BenchRow
from specdraft.log import get_logger

logger = get_logger()

CSV_COLUMNS = [
    "kind",
    "K",
    "AL",
    "temperature",
    "ell",
    "ell_std",
    "alpha_1",
    "alpha_2",
    "alpha_3",
    "speedup",
    "speedup_std",
    "draft_overhead_fraction",
    "tokens_per_s_spec",
    "tokens_per_s_vanilla",
    "head_params",
    "status",
]


def _csv_value(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "on" if value else "off"
    return value


def write_bench_csv(rows: Sequence[BenchRow], output_file: Path) -> None:
    with open(output_file, mode="w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.model_dump().items()})
    logger.info(f"Wrote {len(rows)} benchmark rows to {output_file}")


def bench_summary(result: BenchResult, config: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "rows": [r.model_dump(mode="json") for r in result.rows],
        "best_k": [r.model_dump(mode="json") for r in result.best_k],
        "trends": [t.model_dump(mode="json") for t in result.trends],
        "config": config,
    }


def write_bench_json(result: BenchResult, config: Dict[str, Any], output_file: Path) -> None:
    with open(output_file, mode="w", encoding="utf-8") as f:
        json.dump(bench_summary(result, config), f, indent=2, allow_nan=False)
    logger.info(f"Wrote benchmark summary to {output_file}")


def write_loss_curve_csv(losses: List[float], output_file: Path) -> None:
    with open(output_file, mode="w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows([[step, f"{loss:.6f}"] for step, loss in enumerate(losses)])


TREND_TITLES = {
    "multi_layer_ell": "A second draft layer raises ell (K=2 over K=1, AL off)",
    "adversarial_ell": "Adversarial learning raises ell (K=1, AL on over off)",
    "overhead_vs_k_al_off": "Drafting overhead grows with K (AL off)",
    "overhead_vs_k_al_on": "Drafting overhead grows with K (AL on)",
}


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def bench_report(result: BenchResult) -> str:
    """Markdown run report: measured cells, then every trend check with its verdict."""
    seed_counts = sorted({len(v) for v in result.seed_ell.values()})
    lines = ["# Benchmark report", ""]
    if seed_counts:
        lines.append(f"Acceptance metrics pool {', '.join(map(str, seed_counts))} seed repetition(s) per cell.")
    lines.append("An ell gap counts as replicated when it exceeds twice its standard deviation over seeds.")
    failed = [t for t in result.trends if not t.replicated]
    lines.append("")
    if failed:
        lines.append(f"{len(failed)} of {len(result.trends)} trend checks did NOT replicate at this scale; see below.")
    else:
        lines.append(f"All {len(result.trends)} trend checks replicated.")
    lines += [
        "",
        "## Cells",
        "",
        "| kind | K | AL | T | ell | ell std | speedup | overhead | status |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for row in result.rows:
        al = "" if row.AL is None else ("on" if row.AL else "off")
        lines.append(
            f"| {row.kind} | {row.K or ''} | {al} | {row.temperature:g} | {_fmt(row.ell)} | {_fmt(row.ell_std)} "
            f"| {_fmt(row.speedup)} | {_fmt(row.draft_overhead_fraction)} | {row.status} |"
        )
    lines += ["", "## Trends"]
    for name, title in TREND_TITLES.items():
        checks = [t for t in result.trends if t.name == name]
        if not checks:
            continue
        lines += ["", f"### {title}", ""]
        lines += [f"- {t.kind}, T={t.temperature:g}: {t.message}" for t in checks]
    return "\n".join(lines) + "\n"


def write_bench_report(result: BenchResult, output_file: Path) -> None:
    output_file.write_text(bench_report(result), encoding="utf-8")
    logger.info(f"Wrote benchmark report to {output_file}")
