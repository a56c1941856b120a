"""The adaptation grid, its reports, and the plot-data CSVs derived from them.

Speakers are independent jobs.  With ``jobs > 1`` they run in forked worker
processes; every job is a pure function of its inputs and results are
gathered in submission order, so the outputs do not depend on ``jobs``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .adapt import AdaptationAborted, AdaptPlan, adapt_speaker, evaluate_speaker, select_epoch
from .config import AdaptGrid
from .corpus import Corpus
from .errors import DataError
from .model import ModelConfig
from .params import ParameterStore

log = logging.getLogger(__name__)

SUMMARY_HEADER = ("speaker_id", "parameter_set", "loss_kind", "amount_utts", "chosen_epoch", "wer_unadapted",
                  "wer_adapted")
THERMOMETER_HEADER = ("parameter_set", "loss_kind", "amount_utts", "n_speakers", "mean_wer", "relative_improvement")
PER_SPEAKER_HEADER = ("rank", "speaker_id", "mean_improvement", "parameter_set", "loss_kind", "amount_utts",
                      "wer_unadapted", "wer_adapted", "improvement")
AMOUNT_SWEEP_HEADER = ("parameter_set", "loss_kind", "amount_utts", "mean_wer")
ABLATION_HEADER = ("label", "parameter_set", "loss_kind", "amount_utts", "n_speakers", "mean_wer_unadapted",
                   "mean_wer_adapted")
ALL_SPEAKERS = "ALL"
NONE = "none"

# shared with forked workers; set by run_grid before any job starts
_STATE: dict[str, Any] = {}


def _fmt(x: float) -> str:
    return repr(float(x))


# ------------------------------------------------------------------ jobs


def _adapt_job(args: tuple[str, str, dict, int]):
    speaker_id, parameter_set, plan_kw, amount = args
    corpus: Corpus = _STATE["corpus"]
    plan = AdaptPlan(parameter_set=parameter_set, **plan_kw)
    try:
        return adapt_speaker(speaker_id, plan, _STATE["config"], _STATE["params"],
                             corpus.subset_adaptation_data(speaker_id, amount), corpus.get(speaker_id, "adapt-dev"))
    except AdaptationAborted as exc:
        log.warning("adaptation aborted: %s", exc)
        return str(exc)


def _eval_job(args: tuple[str, dict | None]):
    speaker_id, snapshot = args
    corpus: Corpus = _STATE["corpus"]
    return evaluate_speaker(speaker_id, _STATE["config"], _STATE["params"], snapshot,
                            corpus.get(speaker_id, "test")).wer


def _init_worker():
    threadpool_limits(1)


def _run(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ grid


@dataclass
class CellResult:
    parameter_set: str
    loss_kind: str
    amount_utts: int
    chosen_epochs: dict[str, int]
    wer_unadapted: dict[str, float]
    wer_adapted: dict[str, float]
    aborted: dict[str, str]


def _report(speaker_id: str, plan: AdaptPlan, amount: int, trace, epoch: int, wer_u: float, wer_a: float) -> dict:
    return {
        "speaker_id": speaker_id,
        "plan": {**plan.to_dict(), "amount_utts": amount},
        "chosen_epoch": epoch,
        "per_epoch": [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()}
                      for r in trace.epochs],
        "wer_unadapted": wer_u,
        "wer_adapted": wer_a,
        "adapted_tensors": {k: v.tolist() for k, v in sorted(trace.snapshots[epoch].items())},
    }


def run_grid(corpus: Corpus, config: ModelConfig, params: ParameterStore, grid: AdaptGrid, out_dir: str | Path,
             jobs: int = 1) -> list[CellResult]:
    """Adapt, select and evaluate every grid cell for every test speaker; write reports and summaries."""
    speakers = corpus.speakers("test")
    if grid.speakers is not None:
        missing = sorted(set(grid.speakers) - set(speakers))
        if missing:
            raise DataError(f"speakers not in the corpus test split: {', '.join(missing)}")
        speakers = [s for s in speakers if s in set(grid.speakers)]
    if not speakers:
        raise DataError("no test speakers to adapt")
    out = Path(out_dir)
    _STATE.update(corpus=corpus, config=config, params=params)
    try:
        with threadpool_limits(1):
            unadapted = dict(zip(speakers, _run(_eval_job, [(s, None) for s in speakers], jobs)))
            cells = grid.cells()
            plans = {(ps, lk): grid.plan_for(ps, lk) for ps, lk, _ in cells}
            items = []
            for ps, lk, amount in cells:
                kw = plans[ps, lk].to_dict()
                kw.pop("parameter_set")
                items.extend((s, ps, kw, amount) for s in speakers)
            traces = _run(_adapt_job, items, jobs)
            by_cell = {c: traces[i * len(speakers) : (i + 1) * len(speakers)] for i, c in enumerate(cells)}
            choices: dict[tuple, dict[str, int]] = {}
            for cell in cells:
                ok = [t for t in by_cell[cell] if not isinstance(t, str)]
                if not ok:
                    choices[cell] = {}
                    continue
                pick = select_epoch(ok, plans[cell[:2]].epoch_selection)
                choices[cell] = pick if isinstance(pick, dict) else {t.speaker_id: pick for t in ok}
            eval_items, eval_keys = [], []
            for cell in cells:
                for t in by_cell[cell]:
                    if not isinstance(t, str):
                        eval_items.append((t.speaker_id, t.snapshots[choices[cell][t.speaker_id]]))
                        eval_keys.append((cell, t.speaker_id))
            adapted = dict(zip(eval_keys, _run(_eval_job, eval_items, jobs)))
    finally:
        _STATE.clear()

    results = []
    for cell in cells:
        ps, lk, amount = cell
        plan = plans[ps, lk]
        res = CellResult(ps, lk, amount, {}, {}, {}, {})
        cell_dir = out / "reports" / f"{ps}__{lk}__{amount}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        for s, t in zip(speakers, by_cell[cell]):
            if isinstance(t, str):
                res.aborted[s] = t
                continue
            epoch = choices[cell][s]
            res.chosen_epochs[s] = epoch
            res.wer_unadapted[s] = unadapted[s]
            res.wer_adapted[s] = adapted[cell, s]
            doc = _report(s, plan, amount, t, epoch, unadapted[s], adapted[cell, s])
            (cell_dir / f"{s}.json").write_text(json.dumps(doc, indent=1) + "\n")
        results.append(res)
    write_summary(out, speakers, unadapted, results)
    return results


def summary_rows(speakers: Sequence[str], unadapted: Mapping[str, float], results: Iterable[CellResult]) -> list[tuple]:
    mean_u = float(np.mean([unadapted[s] for s in speakers]))
    rows = [(ALL_SPEAKERS, NONE, NONE, 0, 0, mean_u, mean_u)]
    for r in results:
        for s in sorted(r.wer_adapted):
            rows.append((s, r.parameter_set, r.loss_kind, r.amount_utts, r.chosen_epochs[s], r.wer_unadapted[s],
                         r.wer_adapted[s]))
    return rows


def write_summary(out: Path, speakers: Sequence[str], unadapted: Mapping[str, float],
                  results: Sequence[CellResult]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(speakers, unadapted, results)
    with open(out / "summary.tsv", "w", newline="") as fh:
        fh.write("\t".join(SUMMARY_HEADER) + "\n")
        for r in rows:
            fh.write("\t".join([r[0], r[1], r[2], str(r[3]), str(r[4]), _fmt(r[5]), _fmt(r[6])]) + "\n")
    doc = {
        "unadapted": {s: unadapted[s] for s in speakers},
        "cells": [
            {
                "parameter_set": r.parameter_set,
                "loss_kind": r.loss_kind,
                "amount_utts": r.amount_utts,
                "chosen_epochs": r.chosen_epochs,
                "mean_wer_unadapted": float(np.mean(list(r.wer_unadapted.values()))) if r.wer_adapted else None,
                "mean_wer_adapted": float(np.mean(list(r.wer_adapted.values()))) if r.wer_adapted else None,
                "aborted": r.aborted,
            }
            for r in results
        ],
    }
    (out / "summary.json").write_text(json.dumps(doc, indent=1) + "\n")


# ------------------------------------------------------------------ reports


class ReportParseError(DataError):
    pass


@dataclass(frozen=True)
class SummaryRow:
    speaker_id: str
    parameter_set: str
    loss_kind: str
    amount_utts: int
    chosen_epoch: int
    wer_unadapted: float
    wer_adapted: float


def read_summary(path: str | Path) -> list[SummaryRow]:
    """Parse a summary TSV, naming the offending line on any error."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"summary not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != SUMMARY_HEADER:
        raise ReportParseError(f"{path}:1: header must be {' '.join(SUMMARY_HEADER)}")
    for lineno, line in enumerate(lines[1:], 2):
        cols = line.split("\t")
        if len(cols) != len(SUMMARY_HEADER):
            raise ReportParseError(f"{path}:{lineno}: expected {len(SUMMARY_HEADER)} columns, got {len(cols)}")
        try:
            row = SummaryRow(cols[0], cols[1], cols[2], int(cols[3]), int(cols[4]), float(cols[5]), float(cols[6]))
        except ValueError as exc:
            raise ReportParseError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in (row.wer_unadapted, row.wer_adapted)):
            raise ReportParseError(f"{path}:{lineno}: non-finite WER")
        rows.append(row)
    return rows


def _cells(rows: Sequence[SummaryRow]) -> dict[tuple[str, str, int], list[SummaryRow]]:
    cells: dict[tuple[str, str, int], list[SummaryRow]] = defaultdict(list)
    for r in rows:
        if r.speaker_id != ALL_SPEAKERS:
            cells[r.parameter_set, r.loss_kind, r.amount_utts].append(r)
    return dict(sorted(cells.items()))


def _unadapted_by_speaker(rows: Sequence[SummaryRow]) -> dict[str, float]:
    return {r.speaker_id: r.wer_unadapted for r in rows if r.speaker_id != ALL_SPEAKERS}


def _unadapted_mean(rows: Sequence[SummaryRow]) -> float:
    overall = [r for r in rows if r.speaker_id == ALL_SPEAKERS]
    if overall:
        return overall[0].wer_unadapted
    per = _unadapted_by_speaker(rows)
    if not per:
        raise ReportParseError("summary has no rows")
    return float(np.mean(list(per.values())))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in r])


def thermometer_rows(rows: Sequence[SummaryRow]) -> list[tuple]:
    base = _unadapted_mean(rows)
    out = [(NONE, NONE, 0, len(_unadapted_by_speaker(rows)), base, 0.0)]
    for (ps, lk, amount), rs in _cells(rows).items():
        mean_u = float(np.mean([r.wer_unadapted for r in rs]))
        mean_a = float(np.mean([r.wer_adapted for r in rs]))
        rel = (mean_u - mean_a) / mean_u if mean_u > 0 else 0.0
        out.append((ps, lk, amount, len(rs), mean_a, rel))
    return out


def per_speaker_rows(rows: Sequence[SummaryRow]) -> list[tuple]:
    by_speaker: dict[str, list[SummaryRow]] = defaultdict(list)
    for r in rows:
        if r.speaker_id != ALL_SPEAKERS:
            by_speaker[r.speaker_id].append(r)
    gains = {s: float(np.mean([r.wer_unadapted - r.wer_adapted for r in rs])) for s, rs in by_speaker.items()}
    order = sorted(by_speaker, key=lambda s: (-gains[s], s))
    out = []
    for rank, s in enumerate(order, 1):
        for r in sorted(by_speaker[s], key=lambda r: (r.parameter_set, r.loss_kind, r.amount_utts)):
            out.append((rank, s, gains[s], r.parameter_set, r.loss_kind, r.amount_utts, r.wer_unadapted,
                        r.wer_adapted, r.wer_unadapted - r.wer_adapted))
    return out


def amount_sweep_rows(rows: Sequence[SummaryRow]) -> list[tuple]:
    base = _unadapted_mean(rows)
    cells = _cells(rows)
    out = []
    for ps, lk in sorted({(c[0], c[1]) for c in cells}):
        out.append((ps, lk, 0, base))
        for amount in sorted(a for p, l, a in cells if (p, l) == (ps, lk)):
            out.append((ps, lk, amount, float(np.mean([r.wer_adapted for r in cells[ps, lk, amount]]))))
    return out


def ablation_rows(ablations: Mapping[str, Sequence[SummaryRow]]) -> list[tuple]:
    out = []
    for label, rows in ablations.items():
        for (ps, lk, amount), rs in _cells(rows).items():
            out.append((label, ps, lk, amount, len(rs), float(np.mean([r.wer_unadapted for r in rs])),
                        float(np.mean([r.wer_adapted for r in rs]))))
    return out


REPORT_FILES = ("thermometer.csv", "per_speaker.csv", "amount_sweep.csv", "injection_ablation.csv")


def write_reports(summary: str | Path, out_dir: str | Path, ablations: Mapping[str, str | Path] | None = None) -> list[Path]:
    """Emit the four plot-data CSVs for a summary TSV (plus optional ablation summaries)."""
    rows = read_summary(summary)
    parsed = {label: read_summary(p) for label, p in (ablations or {}).items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in REPORT_FILES]
    _write_csv(paths[0], THERMOMETER_HEADER, thermometer_rows(rows))
    _write_csv(paths[1], PER_SPEAKER_HEADER, per_speaker_rows(rows))
    _write_csv(paths[2], AMOUNT_SWEEP_HEADER, amount_sweep_rows(rows))
    _write_csv(paths[3], ABLATION_HEADER, ablation_rows(parsed))
    return paths


def load_report_snapshot(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Speaker id and adapted tensors stored in a per-speaker report."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"report not found: {path}")
    try:
        doc = json.loads(path.read_text())
        return doc["speaker_id"], {k: np.asarray(v, dtype=np.float64) for k, v in doc["adapted_tensors"].items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed report {path}: {exc}") from exc

