"""(T, epsilon) sweeps and the live variance profiler."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import List, Sequence

import numpy as np

from advest import estimators
from advest.envs import ChainEnv, make_env
from advest.oracle import StudyTable, TabularPolicy, estimator_study, summarize_positions
from advest.ppo import RunLog, Trainer, TrainerConfig

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("T", "epsilon", "seed", "final_metric")
HEATMAP_COLUMNS = ("T", "epsilon", "mean_metric", "std_metric", "n_seeds")
DEFAULT_PROFILE_SAMPLES = 2000


def final_metric(runlog: RunLog, fraction: float = 0.1) -> float:
    """Mean of ``mean_return_100`` over the last ``fraction`` of iterations (at least one)."""
    values = runlog.column("mean_return_100")
    if values.size == 0:
        return math.nan
    tail = values[-max(1, int(math.ceil(fraction * values.size))):]
    tail = tail[np.isfinite(tail)]
    return float(tail.mean()) if tail.size else math.nan


@dataclass(frozen=True)
class Cell:
    T: int
    epsilon: int
    seed: int


@dataclass
class CellResult:
    cell: Cell
    final_metric: float
    error: str | None = None


def sweep_cells(sweep_T: Sequence[int], sweep_epsilon: Sequence[int], seeds: Sequence[int]):
    """Valid cells in grid order, plus the ``(T, epsilon)`` pairs skipped because epsilon > T."""
    cells, skipped = [], []
    for T in sweep_T:
        for eps in sweep_epsilon:
            if eps > T or eps < 1:
                skipped.append((T, eps))
                continue
            cells.extend(Cell(T, eps, s) for s in seeds)
    return cells, skipped


def run_cell(env_name: str, trainer: TrainerConfig, cell: Cell) -> CellResult:
    cfg = dataclasses.replace(trainer, sample_length=cell.T, partial_coef=cell.epsilon, seed=cell.seed)
    try:
        runlog = Trainer(cfg, partial(make_env, env_name)).run()
        return CellResult(cell, final_metric(runlog))
    except Exception as exc:  # recorded per cell; the sweep goes on
        return CellResult(cell, math.nan, f"{type(exc).__name__}: {exc}")


def worker_count() -> int:
    raw = os.environ.get("ADVEST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer ADVEST_THREADS=%r", raw)
        return 1


def run_sweep(env_name: str, trainer: TrainerConfig, sweep_T, sweep_epsilon, n_seeds: int,
              workers: int | None = None) -> List[CellResult]:
    seeds = [trainer.seed + i for i in range(n_seeds)]
    cells, skipped = sweep_cells(sweep_T, sweep_epsilon, seeds)
    for T, eps in skipped:
        log.warning("skipping cell T=%d epsilon=%d: epsilon must satisfy 1 <= epsilon <= T", T, eps)
    job = partial(run_cell, env_name, trainer)
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, cells))
    else:
        results = [job(c) for c in cells]
    for r in results:
        if r.error:
            log.error("cell T=%d epsilon=%d seed=%d failed: %s", r.cell.T, r.cell.epsilon, r.cell.seed, r.error)
    return results


def heatmap(results: Sequence[CellResult]):
    """Seed-averaged metric per ``(T, epsilon)``; failed cells are left out of the average."""
    groups = {}
    for r in results:
        groups.setdefault((r.cell.T, r.cell.epsilon), []).append(r.final_metric)
    rows = []
    for (T, eps), vals in groups.items():
        ok = np.array([v for v in vals if np.isfinite(v)])
        mean = float(ok.mean()) if ok.size else math.nan
        std = float(ok.std(ddof=1)) if ok.size > 1 else math.nan
        rows.append((T, eps, mean, std, int(ok.size)))
    return rows


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_sweep(out_dir, results: Sequence[CellResult]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "sweep.csv", SWEEP_COLUMNS,
                [(r.cell.T, r.cell.epsilon, r.cell.seed, r.final_metric) for r in results])
    _write_rows(out / "heatmap.csv", HEATMAP_COLUMNS, heatmap(results))
    failures = [r for r in results if r.error]
    if failures:
        with open(out / "failures.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("T", "epsilon", "seed", "error"))
            for r in failures:
                writer.writerow((r.cell.T, r.cell.epsilon, r.cell.seed, r.error))


def read_sweep(path) -> List[CellResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"unexpected sweep header {reader.fieldnames}")
        return [CellResult(Cell(int(r["T"]), int(r["epsilon"]), int(r["seed"])), float(r["final_metric"]))
                for r in reader]


# -- variance profile --------------------------------------------------------

def tabular_policy(trainer: Trainer) -> TabularPolicy:
    """Action probabilities of the trainer's policy on each one-hot chain state."""
    eye = np.eye(trainer.spec.observation_dim)
    probs = np.exp(trainer.policy.distribution(eye))
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def profile_variance(trainer: Trainer, n_samples: int = DEFAULT_PROFILE_SAMPLES, exact_values: bool = False,
                     seed: int = 0) -> StudyTable:
    """Per-position spread of truncated GAE at frozen parameters.

    Environment mode collects ``n_samples`` fresh length-T segments with the
    trainer's actors (no carryover, no updates); there is no ground truth, so
    the bias column is NaN. With ``exact_values`` the environment must be a
    :class:`ChainEnv`: the policy is tabularized and the exact values are used
    as the critic, which makes the bias column meaningful.
    """
    cfg = trainer.config
    T = cfg.sample_length
    params = cfg.estimator_params()
    if exact_values:
        env = trainer.envs[0]
        if not isinstance(env, ChainEnv):
            raise ValueError("exact values are only available for chain environments")
        return estimator_study(env.mdp, tabular_policy(trainer), None, params, T, max(n_samples, 100), seed)

    adv = np.zeros((n_samples, T))
    r_part = np.zeros_like(adv)
    v_part = np.zeros_like(adv)
    filled = 0
    while filled < n_samples:
        trainer.collect()
        boot = trainer.values(np.stack(trainer.obs))
        for a in range(cfg.n_actors):
            seg = trainer.buffer.finalize(a, float(boot[a]))
            if filled >= n_samples:
                continue
            args = (seg.rewards, seg.value_preds, seg.dones, params, seg.bootstrap_value)
            adv[filled] = estimators.gae_truncated(*args)
            r_part[filled], v_part[filled] = estimators.decompose(*args)
            filled += 1
    return summarize_positions(adv, r_part, v_part, np.ones_like(adv, dtype=bool))


def zero_value_output(trainer: Trainer):
    """Zero the value net's output layer so V is identically 0."""
    for p in trainer.value_net.params[-2:]:
        p[...] = 0.0
