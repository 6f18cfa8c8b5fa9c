"""Episode scores, the accuracy/velocity/improvement formulas, and CSV reports."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROLLING_WINDOW = 200
# episodes averaged at each end of the velocity formula and for final scores
VELOCITY_SPAN = 5
FINAL_SPAN = 5


class OutOfRangeScore(ValueError):
    pass


class InsufficientData(ValueError):
    pass


class MismatchedRuns(ValueError):
    pass


def accuracy(score: float, eta: int, r_min: float = -1, r_max: float = 1) -> float:
    """Affine map of an episode score from ``[eta*r_min, eta*r_max]`` to ``[0, 100]`` percent."""
    if r_max <= r_min:
        raise ValueError("r_max must exceed r_min")
    lo, hi = eta * r_min, eta * r_max
    if not lo <= score <= hi:
        raise OutOfRangeScore(f"score {score} outside [{lo}, {hi}]")
    return (score - lo) / (eta * (r_max - r_min)) * 100.0


def window_mean(scores, start: int, span: int = VELOCITY_SPAN) -> float:
    """Mean of ``scores[start:start + span]`` (half-open, ``span`` elements)."""
    w = np.asarray(scores, dtype=np.float64)[start:start + span]
    if len(w) < span:
        raise InsufficientData(f"need {start + span} scores, have {len(scores)}")
    return float(w.mean())


def velocity(scores, x: int) -> float:
    """Change in windowed mean score between episode 0 and episode ``x``, per episode."""
    if x <= 0:
        raise ValueError("x must be positive")
    if len(scores) < x + VELOCITY_SPAN:
        raise InsufficientData(f"velocity at x={x} needs {x + VELOCITY_SPAN} scores, have {len(scores)}")
    return (window_mean(scores, x) - window_mean(scores, 0)) / x


def improvement(score_with: float, score_without: float, eta: int,
                r_min: float = -1, r_max: float = 1) -> float:
    """Score gain from pre-training as a percentage of the score range."""
    if r_max <= r_min:
        raise ValueError("r_max must exceed r_min")
    return (score_with - score_without) / (eta * (r_max - r_min)) * 100.0


def final_mean(scores, span: int = FINAL_SPAN) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise InsufficientData("no scores")
    return float(s[-span:].mean())


@dataclass(frozen=True)
class RollingBatch:
    start: int
    mean: float
    std: float
    count: int


def rolling_stats(scores, window: int = ROLLING_WINDOW) -> list[RollingBatch]:
    """Mean and population std over consecutive non-overlapping batches.

    ``start`` is the 0-based index of the batch's first episode. A trailing
    partial batch is included; its ``count`` is below ``window``.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    s = np.asarray(scores, dtype=np.float64)
    out = []
    for start in range(0, len(s), window):
        b = s[start:start + window]
        out.append(RollingBatch(start, float(b.mean()), float(b.std()), len(b)))
    return out


PAIRING_KEYS = ("subset", "eta", "n_episodes", "mode", "r_min", "r_max")


@dataclass
class MetricsLog:
    eta: int
    r_min: int = -1
    r_max: int = 1
    metadata: dict = field(default_factory=dict)
    scores: list[int] = field(default_factory=list)

    def append(self, score: int) -> None:
        if not self.eta * self.r_min <= score <= self.eta * self.r_max:
            raise OutOfRangeScore(f"score {score} outside [{self.eta * self.r_min}, {self.eta * self.r_max}]")
        self.scores.append(int(score))

    def accuracies(self) -> list[float]:
        return [accuracy(v, self.eta, self.r_min, self.r_max) for v in self.scores]

    def rolling(self, window: int = ROLLING_WINDOW) -> list[RollingBatch]:
        return rolling_stats(self.scores, window) if self.scores else []

    def pairing_digest(self) -> str:
        meta = {**self.metadata, "eta": self.eta, "r_min": self.r_min, "r_max": self.r_max}
        key = {k: meta.get(k) for k in PAIRING_KEYS}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def summary(self) -> dict:
        row = {"episodes": len(self.scores), "final5_mean": "", "final5_accuracy_pct": "",
               "velocity_500": "", "velocity_1000": ""}
        if self.scores:
            fm = final_mean(self.scores)
            row["final5_mean"] = fm
            row["final5_accuracy_pct"] = accuracy(fm, self.eta, self.r_min, self.r_max)
        for x in (500, 1000):
            if len(self.scores) >= x + VELOCITY_SPAN:
                row[f"velocity_{x}"] = velocity(self.scores, x)
        return row


def fmt(value) -> str:
    """Shortest text that parses back to the identical float; ints stay ints."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def check_paired(with_log: MetricsLog, without_log: MetricsLog) -> None:
    if with_log.pairing_digest() != without_log.pairing_digest():
        mine = {k: with_log.metadata.get(k, getattr(with_log, k, None)) for k in PAIRING_KEYS}
        theirs = {k: without_log.metadata.get(k, getattr(without_log, k, None)) for k in PAIRING_KEYS}
        diff = {k: (mine[k], theirs[k]) for k in PAIRING_KEYS if mine[k] != theirs[k]}
        raise MismatchedRuns(f"runs are not comparable: {diff}")


def write_report(log: MetricsLog, out_dir: str | Path, paired: MetricsLog | None = None) -> list[Path]:
    """Write ``episodes.csv``, ``rolling.csv`` and ``summary.csv`` to ``out_dir``.

    ``paired`` is the run without pre-training to compare against; when given,
    ``summary.csv`` gains the improvement column.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    episodes = out / "episodes.csv"
    _write_csv(episodes, ["episode", "score", "accuracy_pct"],
               ((j + 1, v, h) for j, (v, h) in enumerate(zip(log.scores, log.accuracies()))))
    rolling = out / "rolling.csv"
    _write_csv(rolling, ["batch_start", "mean", "std", "count"],
               ((b.start, b.mean, b.std, b.count) for b in log.rolling()))
    summary = out / "summary.csv"
    row = log.summary()
    header = list(row)
    values = list(row.values())
    if paired is not None:
        check_paired(log, paired)
        imp = ""
        if log.scores and paired.scores:
            imp = improvement(final_mean(log.scores), final_mean(paired.scores), log.eta, log.r_min, log.r_max)
        header.append("improvement_pct")
        values.append(imp)
    if log.scores:
        _write_csv(summary, header, [values])
    else:
        _write_csv(summary, header, [])
    return [episodes, rolling, summary]


def read_scores(path: str | Path) -> list[int]:
    with Path(path).open(newline="") as fh:
        return [int(row["score"]) for row in csv.DictReader(fh)]


def read_rolling(path: str | Path) -> list[RollingBatch]:
    with Path(path).open(newline="") as fh:
        return [RollingBatch(int(r["batch_start"]), float(r["mean"]), float(r["std"]), int(r["count"]))
                for r in csv.DictReader(fh)]


def compare_runs(with_log: MetricsLog, without_log: MetricsLog, out_dir: str | Path) -> list[Path]:
    """Side-by-side rolling curves and the pre-training summary for a paired run."""
    check_paired(with_log, without_log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    a, b = with_log.rolling(), without_log.rolling()
    rolling = out / "rolling_compare.csv"
    rows = []
    for i in range(max(len(a), len(b))):
        ra = a[i] if i < len(a) else None
        rb = b[i] if i < len(b) else None
        start = (ra or rb).start
        rows.append((start,
                     ra.mean if ra else "", ra.std if ra else "",
                     rb.mean if rb else "", rb.std if rb else ""))
    _write_csv(rolling, ["batch_start", "mean_with", "std_with", "mean_without", "std_without"], rows)
    summary = out / "summary.csv"
    eta = with_log.eta
    fw, fo = final_mean(with_log.scores), final_mean(without_log.scores)
    row = {"subset": with_log.metadata.get("subset", ""), "eta": eta,
           "final5_with": fw, "final5_without": fo,
           "improvement_pct": improvement(fw, fo, eta, with_log.r_min, with_log.r_max)}
    for x in (500, 1000):
        vw = velocity(with_log.scores, x) if len(with_log.scores) >= x + VELOCITY_SPAN else ""
        vo = velocity(without_log.scores, x) if len(without_log.scores) >= x + VELOCITY_SPAN else ""
        row[f"velocity_{x}_with"] = vw
        row[f"velocity_{x}_without"] = vo
        row[f"velocity_{x}_change"] = (vw - vo) if vw != "" and vo != "" else ""
    _write_csv(summary, list(row), [list(row.values())])
    return [rolling, summary]
