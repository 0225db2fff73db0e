"""Tables and curve images built from the per-stage metric files of a run directory."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import REPORT_FIELDS, MetricReport, curves_to_csv, tendency_curves  # noqa: E402


class MissingRecordsError(FileNotFoundError):
    pass


def load_reports(run_dir: str | Path) -> list[MetricReport]:
    metrics = Path(run_dir) / "metrics"
    files = sorted(metrics.glob("stage_*.json")) if metrics.is_dir() else []
    if not files:
        raise MissingRecordsError(f"no completed stages under {run_dir}")
    order = _training_order(Path(run_dir))
    reports = []
    for f in files:
        rep = MetricReport.from_records(json.loads(f.read_text(encoding="utf-8")))
        rep.trained_domain = order[rep.stage] if rep.stage < len(order) else -1
        reports.append(rep)
    return reports


def _training_order(run_dir: Path) -> list[int]:
    order = []
    record = run_dir / "run_record.jsonl"
    if record.exists():
        for line in record.read_text(encoding="utf-8").splitlines():
            if line:
                did = json.loads(line)["domain"]
                if did not in order:
                    order.append(did)
    return order


def summary_rows(report: MetricReport) -> list[dict]:
    """Per-domain final metrics followed by the seen and unseen averages (percent)."""
    rows = [
        {"domain": str(r["domain"]), "split": r["split"], "mAP": 100 * r["mAP"], "rank1": 100 * r["rank1"]}
        for r in report.records
    ]
    s_map, s_r1 = report.seen_average
    rows.append({"domain": "seen_avg", "split": "seen", "mAP": 100 * s_map, "rank1": 100 * s_r1})
    if report.unseen_average is not None:
        u_map, u_r1 = report.unseen_average
        rows.append({"domain": "unseen_avg", "split": "unseen", "mAP": 100 * u_map, "rank1": 100 * u_r1})
    return rows


def _csv(rows: list[dict], fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def format_table(rows: list[dict]) -> str:
    lines = [f"{'domain':>10} {'split':>7} {'mAP':>6} {'R1':>6}"]
    for r in rows:
        lines.append(f"{r['domain']:>10} {r['split']:>7} {r['mAP']:6.1f} {r['rank1']:6.1f}")
    return "\n".join(lines)


def _plot(curve: list[dict], keys: tuple[str, str], title: str, path: Path) -> None:
    stages = [r["stage"] for r in curve]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key, label in zip(keys, ("mAP", "rank1")):
        ax.plot(stages, [100 * r[key] for r in curve], marker="o", label=label)
    ax.set_xlabel("training stage")
    ax.set_ylabel("%")
    ax.set_title(title)
    ax.set_xticks(stages)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(run_dir: str | Path) -> dict[str, Path]:
    """Write curves, per-stage records, summary table and two curve images under ``<run_dir>/report``."""
    run_dir = Path(run_dir)
    reports = load_reports(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    curve = tendency_curves(reports)
    paths = {
        "curves": out / "curves.csv",
        "records": out / "records.csv",
        "summary": out / "summary.csv",
        "forgetting": out / "forgetting.png",
        "generalizing": out / "generalizing.png",
    }
    paths["curves"].write_text(curves_to_csv(curve), encoding="utf-8")
    paths["records"].write_text(_csv([r for rep in reports for r in rep.records], REPORT_FIELDS), encoding="utf-8")
    paths["summary"].write_text(_csv(summary_rows(reports[-1]), ("domain", "split", "mAP", "rank1")), encoding="utf-8")
    _plot(curve, ("first_domain_mAP", "first_domain_rank1"), "first domain", paths["forgetting"])
    if reports[-1].unseen_average is not None:
        _plot(curve, ("unseen_mAP", "unseen_rank1"), "unseen average", paths["generalizing"])
    else:
        del paths["generalizing"]
    return paths
