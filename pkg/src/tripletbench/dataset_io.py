"""Run / ground-truth files, submission validation and the causality audit.

On disk a run is a directory ``<team_id>/`` holding one headerless CSV per
video (``<video_id>.csv``), one line per frame and one column per triplet
class. Ground truth uses the same layout with 0/1 cells.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ERROR = "error"
WARNING = "warning"

# cap on per-cell findings reported for one (video, code)
MAX_CELL_FINDINGS = 20


class FormatError(ValueError):
    """Malformed run or ground-truth file."""


class AlignmentError(ValueError):
    """Runs / ground truth that do not share videos and shapes."""


@dataclass(eq=False)
class Run:
    team_id: str
    videos: dict[str, np.ndarray]

    def __post_init__(self):
        self.videos = {str(k): np.asarray(v, dtype=np.float64) for k, v in self.videos.items()}

    @property
    def video_ids(self) -> list[str]:
        return list(self.videos)

    @property
    def num_classes(self) -> int:
        return next(iter(self.videos.values())).shape[1]

    def frame_counts(self) -> dict[str, int]:
        return {vid: m.shape[0] for vid, m in self.videos.items()}

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.videos[v] for v in self.videos], axis=0)


@dataclass(eq=False)
class GroundTruth:
    videos: dict[str, np.ndarray]

    def __post_init__(self):
        self.videos = {str(k): np.asarray(v) for k, v in self.videos.items()}
        for vid, m in self.videos.items():
            if m.ndim != 2:
                raise FormatError(f"{vid}: labels must be a frames x classes matrix")
            if not np.isin(m, (0, 1)).all():
                raise FormatError(f"{vid}: labels must be 0/1")
            self.videos[vid] = m.astype(np.int8)

    @property
    def video_ids(self) -> list[str]:
        return list(self.videos)

    def frame_counts(self) -> dict[str, int]:
        return {vid: m.shape[0] for vid, m in self.videos.items()}

    def as_run(self, team_id: str = "ground_truth") -> Run:
        return Run(team_id, {v: m.astype(np.float64) for v, m in self.videos.items()})


@dataclass(frozen=True)
class Finding:
    video_id: str | None
    frame_index: int | None
    class_index: int | None
    code: str
    message: str
    severity: str = ERROR


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not any(f.severity == ERROR for f in self.findings)

    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == ERROR]

    def to_dict(self) -> dict:
        return {"pass": self.passed, "findings": [asdict(f) for f in self.findings]}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


# ---------------------------------------------------------------- parsing

def read_matrix(path, num_classes: int | None = None) -> np.ndarray:
    """Parse one headerless CSV into a float matrix.

    Lenient about values (anything ``float`` accepts, including out-of-range
    numbers and ``nan``); strict about structure.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if num_classes is None:
                num_classes = len(row)
            if len(row) != num_classes:
                raise FormatError(f"{path}:{lineno}: expected {num_classes} columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric cell") from None
    if not rows:
        return np.zeros((0, num_classes or 0))
    return np.array(rows, dtype=np.float64)


def write_matrix(matrix, path, integer: bool = False) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        if integer:
            for row in matrix.astype(np.int64).tolist():
                fh.write(",".join(map(str, row)) + "\n")
        else:
            # repr of a Python float is the shortest string that round-trips
            for row in matrix.astype(np.float64).tolist():
                fh.write(",".join(map(repr, row)) + "\n")


def _video_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return sorted(directory.glob("*.csv"), key=lambda p: p.stem)


def _read_all(files, num_classes, threads):
    if threads and threads > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda p: read_matrix(p, num_classes), files))
    return [read_matrix(p, num_classes) for p in files]


def parse_run(path, num_classes: int | None = None, team_id: str | None = None, threads: int = 1) -> Run:
    """Read a run directory. The team id defaults to the directory name."""
    files = _video_files(path)
    mats = _read_all(files, num_classes, threads)
    return Run(team_id or Path(path).name, {p.stem: m for p, m in zip(files, mats)})


def write_run(run: Run, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for vid, m in run.videos.items():
        write_matrix(m, out / f"{vid}.csv")
    return out


def parse_ground_truth(path, num_classes: int | None = None, threads: int = 1) -> GroundTruth:
    files = _video_files(path)
    mats = _read_all(files, num_classes, threads)
    return GroundTruth({p.stem: m for p, m in zip(files, mats)})


def write_ground_truth(gt: GroundTruth, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for vid, m in gt.videos.items():
        write_matrix(m, out / f"{vid}.csv", integer=True)
    return out


def discover_runs(path, num_classes: int | None = None, threads: int = 1) -> list[Run]:
    """Runs under ``path``: the directory itself if it holds CSVs, else each subdirectory."""
    path = Path(path)
    if any(path.glob("*.csv")):
        return [parse_run(path, num_classes, threads=threads)]
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not subdirs:
        raise FileNotFoundError(f"no run directories under {path}")
    return [parse_run(p, num_classes, threads=threads) for p in subdirs]


def check_aligned(run: Run, gt: GroundTruth) -> None:
    if set(run.videos) != set(gt.videos):
        missing = sorted(set(gt.videos) - set(run.videos))
        extra = sorted(set(run.videos) - set(gt.videos))
        raise AlignmentError(f"run {run.team_id!r}: missing videos {missing}, extra videos {extra}")
    for vid, labels in gt.videos.items():
        if run.videos[vid].shape != labels.shape:
            raise AlignmentError(
                f"run {run.team_id!r} video {vid}: shape {run.videos[vid].shape} != ground truth {labels.shape}"
            )


# ------------------------------------------------------------- validation

def _cell_findings(vid, bad, code, describe):
    out = []
    cells = np.argwhere(bad)
    for frame, cls in cells[:MAX_CELL_FINDINGS]:
        out.append(Finding(vid, int(frame), int(cls), code, describe(int(frame), int(cls))))
    if len(cells) > MAX_CELL_FINDINGS:
        out.append(Finding(vid, None, None, code, f"{len(cells) - MAX_CELL_FINDINGS} further {code} cells not listed"))
    return out


def validate_submission(run: Run, expected: dict[str, int], num_classes: int) -> ValidationReport:
    """Check a run against the expected videos, frame counts and class count.

    Errors: MISSING_VIDEO, EXTRA_VIDEO, CLASS_COUNT, FRAME_COUNT, NON_FINITE,
    RANGE. Warning: CONSTANT_FRAME (every class scored identically).
    """
    if not expected:
        raise ValueError("expected video map is empty")
    findings = []
    for vid in sorted(set(expected) - set(run.videos)):
        findings.append(Finding(vid, None, None, "MISSING_VIDEO", f"video {vid} has no predictions"))
    for vid in sorted(set(run.videos) - set(expected)):
        findings.append(Finding(vid, None, None, "EXTRA_VIDEO", f"video {vid} is not part of the test set"))

    for vid in sorted(set(run.videos) & set(expected)):
        probs = run.videos[vid]
        if probs.ndim != 2 or probs.shape[1] != num_classes:
            width = probs.shape[1] if probs.ndim == 2 else None
            findings.append(Finding(vid, None, None, "CLASS_COUNT", f"expected {num_classes} classes, got {width}"))
            continue
        if probs.shape[0] != expected[vid]:
            findings.append(
                Finding(vid, None, None, "FRAME_COUNT", f"expected {expected[vid]} frames, got {probs.shape[0]}")
            )
        finite = np.isfinite(probs)
        findings += _cell_findings(vid, ~finite, "NON_FINITE", lambda f, c: f"frame {f} class {c} is not finite")
        with np.errstate(invalid="ignore"):
            out_of_range = finite & ((probs < 0.0) | (probs > 1.0))
        findings += _cell_findings(
            vid, out_of_range, "RANGE", lambda f, c: f"frame {f} class {c}: {probs[f, c]!r} outside [0, 1]"
        )
        if probs.shape[0] and num_classes > 1:
            constant = np.flatnonzero((probs == probs[:, :1]).all(axis=1))
            if constant.size:
                findings.append(Finding(
                    vid, int(constant[0]), None, "CONSTANT_FRAME",
                    f"{constant.size} frame(s) score every class identically", WARNING,
                ))
    return ValidationReport(findings)


def causality_audit(full: Run, prefix: Run, tol: float = 1e-6) -> ValidationReport:
    """Compare a run with a re-run of the same model on truncated videos.

    An online model must reproduce its outputs on every frame the two runs
    share; the first frame differing by more than ``tol`` is reported per
    video.
    """
    findings = []
    for vid, short in prefix.videos.items():
        if vid not in full.videos:
            findings.append(Finding(vid, None, None, "MISSING_VIDEO", f"video {vid} absent from the full run"))
            continue
        long = full.videos[vid]
        if short.shape[0] > long.shape[0]:
            raise ValueError(f"video {vid}: prefix has {short.shape[0]} frames, full run only {long.shape[0]}")
        if short.shape[1:] != long.shape[1:]:
            raise ValueError(f"video {vid}: class count differs between runs")
        diff = np.abs(long[: short.shape[0]] - short)
        # NaN compares false, so it counts as a violation
        bad_frames = np.flatnonzero(~(diff <= tol).all(axis=1))
        if bad_frames.size:
            frame = int(bad_frames[0])
            row = diff[frame]
            cls = int(np.flatnonzero(~(row <= tol))[0])
            worst = np.nanmax(row) if np.isfinite(row).any() else math.nan
            findings.append(Finding(
                vid, frame, cls, "CAUSALITY",
                f"frame {frame} changes by {worst:.3g} when future frames are removed (tol {tol:g})",
            ))
    return ValidationReport(findings)


def expected_from_ground_truth(gt: GroundTruth) -> dict[str, int]:
    return gt.frame_counts()


def resolve_threads(flag: int | None = None) -> int:
    env = os.environ.get("TRIPLETBENCH_THREADS")
    if env:
        return max(1, int(env))
    if flag:
        return max(1, int(flag))
    return os.cpu_count() or 1
