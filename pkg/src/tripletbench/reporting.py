"""Leaderboards and per-class tables across teams.

AP and topK values are stored in percent, as in published result tables.
CSV files round to one decimal; JSON keeps full precision.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import EvalReport, LeaderboardStats, leaderboard_stats
from .taxonomy import TASKS

FOOTER_LABEL = "mean_std"


@dataclass
class LeaderboardRow:
    team_id: str
    ap: dict  # task -> mean AP (%)
    topk: dict  # K -> accuracy (%)
    topk_mean: float


@dataclass
class Leaderboard:
    rows: list
    footer: dict  # column name -> LeaderboardStats
    sort_key: str = "IVT"
    per_class: dict = field(default_factory=dict)  # task -> {"class_ids", "labels", "values": team -> list}

    @property
    def ks(self) -> list:
        return sorted(self.rows[0].topk) if self.rows else []

    def columns(self) -> list:
        return [f"AP_{t}" for t in TASKS]

    def to_dict(self) -> dict:
        return {
            "sort_key": self.sort_key,
            "rows": [
                {
                    "team_id": r.team_id,
                    "ap": dict(r.ap),
                    "topk": {str(k): v for k, v in r.topk.items()},
                    "topk_mean": r.topk_mean,
                }
                for r in self.rows
            ],
            "footer": {k: {"mean": s.mean, "std": s.std, "n": s.n} for k, s in self.footer.items()},
            "per_class": {
                t: {
                    "class_ids": list(pc["class_ids"]),
                    "labels": list(pc["labels"]),
                    "values": {team: [_json_num(x) for x in vals] for team, vals in pc["values"].items()},
                }
                for t, pc in self.per_class.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Leaderboard":
        rows = [
            LeaderboardRow(
                r["team_id"],
                dict(r["ap"]),
                {int(k): v for k, v in r["topk"].items()},
                r["topk_mean"],
            )
            for r in d["rows"]
        ]
        footer = {k: LeaderboardStats(s["mean"], s["std"], s["n"]) for k, s in d["footer"].items()}
        per_class = {
            t: {
                "class_ids": list(pc["class_ids"]),
                "labels": list(pc["labels"]),
                "values": {team: [math.nan if x is None else x for x in vals] for team, vals in pc["values"].items()},
            }
            for t, pc in d.get("per_class", {}).items()
        }
        return cls(rows, footer, d.get("sort_key", "IVT"), per_class)


def _json_num(x):
    return None if x is None or math.isnan(x) else float(x)


def build_leaderboard(reports: dict, sort_task: str = "IVT", class_labels: dict | None = None) -> Leaderboard:
    """Rank teams by mean AP on ``sort_task`` (descending, ties by team id)."""
    if not reports:
        raise ValueError("no reports")
    if sort_task not in TASKS:
        raise ValueError(f"unknown task {sort_task!r}")
    rows = []
    for team, rep in reports.items():
        missing = [t for t in TASKS if t not in rep.tasks]
        if missing:
            raise ValueError(f"report for {team!r} lacks tasks {missing}")
        rows.append(LeaderboardRow(
            team,
            {t: 100.0 * rep.tasks[t].mean_ap for t in TASKS},
            {k: 100.0 * v for k, v in sorted(rep.topk.items())},
            100.0 * rep.topk_mean,
        ))
    rows.sort(key=lambda r: (-r.ap[sort_task], r.team_id))

    footer = {f"AP_{t}": leaderboard_stats([r.ap[t] for r in rows]) for t in TASKS}
    ks = sorted(rows[0].topk)
    for k in ks:
        footer[f"top{k}"] = leaderboard_stats([r.topk.get(k, math.nan) for r in rows])
    footer["topk_mean"] = leaderboard_stats([r.topk_mean for r in rows])

    per_class = {}
    first = reports[rows[0].team_id]
    for t in TASKS:
        ids = first.tasks[t].class_ids.tolist()
        labels = (class_labels or {}).get(t) or [str(i) for i in ids]
        per_class[t] = {
            "class_ids": ids,
            "labels": list(labels),
            "values": {r.team_id: (100.0 * reports[r.team_id].tasks[t].per_class_ap).tolist() for r in rows},
        }
    return Leaderboard(rows, footer, sort_task, per_class)


def _fmt(x, digits=1):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def _fmt_stats(s: LeaderboardStats, digits=1):
    return f"{s.mean:.{digits}f}±{s.std:.{digits}f}"


def emit_tables(lb: Leaderboard, out_dir, formats=("csv", "json")) -> list:
    """Write ``leaderboard.csv/json``, ``per_class_<task>.csv`` and ``topk.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "leaderboard.json"
        path.write_text(json.dumps(lb.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    if "csv" not in formats:
        return written

    cols = lb.columns()
    path = out / "leaderboard.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["team", *cols])
        for r in lb.rows:
            w.writerow([r.team_id, *(_fmt(r.ap[t]) for t in TASKS)])
        w.writerow([FOOTER_LABEL, *(_fmt_stats(lb.footer[c]) for c in cols)])
    written.append(path)

    path = out / "topk.csv"
    ks = lb.ks
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["team", *(f"top{k}" for k in ks), "topk_mean"])
        for r in lb.rows:
            w.writerow([r.team_id, *(_fmt(r.topk[k], 2) for k in ks), _fmt(r.topk_mean, 2)])
        w.writerow([FOOTER_LABEL, *(_fmt_stats(lb.footer[f"top{k}"], 1) for k in ks), _fmt_stats(lb.footer["topk_mean"], 1)])
    written.append(path)

    for t, pc in lb.per_class.items():
        path = out / f"per_class_{t}.csv"
        values = np.array([pc["values"][r.team_id] for r in lb.rows], dtype=np.float64)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["team", *pc["labels"]])
            for r, row in zip(lb.rows, values):
                w.writerow([r.team_id, *(_fmt(x) for x in row)])
            footer = []
            for col in values.T:
                col = col[~np.isnan(col)]
                footer.append(_fmt_stats(leaderboard_stats(col)) if col.size else "")
            w.writerow([FOOTER_LABEL, *footer])
        written.append(path)
    return written


def read_leaderboard_csv(path) -> tuple[list, dict]:
    """Parse ``leaderboard.csv`` back into rows ``(team, {column: value})`` and footer stats."""
    with open(path, newline="", encoding="utf-8") as fh:
        table = list(csv.reader(fh))
    header, body = table[0], table[1:]
    rows, footer = [], {}
    for line in body:
        if line[0] == FOOTER_LABEL:
            for col, cell in zip(header[1:], line[1:]):
                mean, std = cell.split("±")
                footer[col] = (float(mean), float(std))
        else:
            rows.append((line[0], {col: float(cell) if cell else math.nan for col, cell in zip(header[1:], line[1:])}))
    return rows, footer


def load_reports(directory) -> dict:
    """All ``*.json`` EvalReports in ``directory``, keyed by team id."""
    reports = {}
    for path in sorted(Path(directory).glob("*.json")):
        rep = EvalReport.from_json(path)
        if rep.team_id in reports:
            raise ValueError(f"two reports for team {rep.team_id!r}")
        reports[rep.team_id] = rep
    if not reports:
        raise FileNotFoundError(f"no report files in {directory}")
    return reports
