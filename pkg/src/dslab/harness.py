"""Experiment orchestration: trials, sweeps, baselines and artifact files.

A trial is one DS-DQN (or vanilla) training followed by ``runs`` LFA
transfers of its feature checkpoint. Seeds for every training and run are
derived from the master seed, so a rerun with the same config reproduces
every CSV and JSON artifact byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dqn, lfa, nn, reprreg
from .checkpoint import FeatureCheckpoint, save_full_model
from .config import ExperimentConfig
from .envs import TaskSpec, make_env, perturb_goal, probe_states
from .errors import ContractViolation, NonFiniteError
from .seeding import derive_seed

log = logging.getLogger(__name__)

TRANSFER_LOG_COLUMNS = ("run_id", "episode", "return", "length", "exit_flag")


# ---------------------------------------------------------------- csv / json


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------- correlation probes


def measure_mean_correlation(checkpoint, probes, pairing: str = "all_pairs", *, k: int = 4, seed: int = 0,
                             return_degenerate: bool = False):
    """Mean pair correlation of the checkpoint's features over ``probes``.

    Degenerate (near-constant) feature vectors count as zero correlation;
    their number is logged and optionally returned.
    """
    trunk = checkpoint.trunk if isinstance(checkpoint, FeatureCheckpoint) else checkpoint
    value, degenerate = reprreg.mean_pair_correlation(trunk, probes, pairing, k=k, seed=seed)
    if degenerate:
        log.warning("%d probe pairs had degenerate features and were scored 0", degenerate)
    return (value, degenerate) if return_degenerate else value


def probe_set(cfg: ExperimentConfig, seed: Optional[int] = None) -> np.ndarray:
    return probe_states(cfg.task, cfg.probe_count, derive_seed(cfg.seed if seed is None else seed, "probe"))


# ---------------------------------------------------------------- transfer


@dataclass
class TransferSummary:
    env_id: str
    cap: int
    episodes_to_exit: list
    exited: list
    diverged: list

    @property
    def mean(self):
        return _mean_std(self.episodes_to_exit)[0]

    @property
    def std(self):
        return _mean_std(self.episodes_to_exit)[1]

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "cap": self.cap,
            "episodes_to_exit": list(self.episodes_to_exit),
            "exited": list(self.exited),
            "diverged": list(self.diverged),
            "mean": self.mean,
            "std": self.std,
        }


def transfer_runs(features, task: TaskSpec, cfg: ExperimentConfig, runs: int, master: int, *indices):
    """``runs`` seeded LFA transfers; run r uses derive_seed(master, "run", *indices, r)."""
    exit = lfa.ExitCondition.from_config(cfg)
    out = []
    for r in range(runs):
        out.append(lfa.run_transfer(features, task, exit, cfg, derive_seed(master, "run", *indices, r)))
    return out


def summarize_transfers(env_id, cap, results) -> TransferSummary:
    return TransferSummary(
        env_id, cap,
        [int(r.episodes_to_exit) for r in results],
        [bool(r.exited) for r in results],
        [bool(r.diverged) for r in results],
    )


def transfer_log_rows(results, prefix=()):
    for run_id, res in enumerate(results):
        for row in res.log_rows(run_id):
            yield (*prefix, *row)


def run_transfer_protocol(checkpoint: FeatureCheckpoint, cfg: ExperimentConfig, runs: Optional[int] = None,
                          out_dir=None):
    """LFA transfer of one checkpoint, ``runs`` times (default ``cfg.runs``)."""
    runs = cfg.runs if runs is None else runs
    features = lfa.TrunkFeatures(checkpoint, obs_dim=make_env(cfg.task).obs_dim)
    task = perturb_goal(cfg.task, derive_seed(cfg.seed, "goal"))
    results = transfer_runs(features, task, cfg, runs, cfg.seed)
    summary = summarize_transfers(cfg.env_id, cfg.lfa_max_episodes, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "transfer_log.csv", TRANSFER_LOG_COLUMNS, transfer_log_rows(results))
        write_json(out / "transfer_summary.json", summary.to_dict())
    return summary, results


def run_raw_baseline(cfg: ExperimentConfig, runs: Optional[int] = None, out_dir=None):
    """LFA directly on raw observations."""
    runs = cfg.runs if runs is None else runs
    env = make_env(cfg.task)
    task = perturb_goal(cfg.task, derive_seed(cfg.seed, "goal"))
    results = transfer_runs(lfa.RawFeatures(env.obs_dim), task, cfg, runs, cfg.seed, 0)
    summary = summarize_transfers(cfg.env_id, cfg.lfa_max_episodes, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "transfer_log.csv", TRANSFER_LOG_COLUMNS, transfer_log_rows(results))
        write_json(out / "transfer_summary.json", {**summary.to_dict(), "features": "raw"})
    return summary, results


# ---------------------------------------------------------------- training


def write_training_artifacts(result: dqn.TrainingResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "training_log.csv", dqn.TRAINING_LOG_COLUMNS, dqn.log_rows(result.log))
    write_csv(out / "corr_trace.csv", ("episode", "mean_pair_corr"),
              ((r.episode, r.mean_pair_corr) for r in result.log))
    result.checkpoint.save(out / "features.ckpt.json")
    save_full_model(out / "full_model.ckpt.json", result.network.trunk, result.network.head.weight,
                    result.metadata)


# ---------------------------------------------------------------- trials


@dataclass
class TrialRecord:
    trial: int
    seed: int
    episodes_to_exit: list = field(default_factory=list)
    exited: list = field(default_factory=list)
    diverged: list = field(default_factory=list)
    final_corr: Optional[float] = None
    checkpoint_corr: Optional[float] = None
    selection_episode: int = -1
    failed: bool = False
    error: Optional[str] = None

    @property
    def mean(self):
        return _mean_std(self.episodes_to_exit)[0]


@dataclass
class TrialReport:
    env_id: str
    algorithm: str
    master_seed: int
    cap: int
    trials: list
    config: dict = field(default_factory=dict)

    @property
    def completed(self):
        return [t for t in self.trials if not t.failed]

    @property
    def incomplete(self) -> bool:
        return len(self.completed) < len(self.trials)

    @property
    def per_trial_means(self):
        return [t.mean for t in self.completed]

    @property
    def grand_mean(self):
        return _mean_std(self.per_trial_means)[0]

    @property
    def std(self):
        """Population standard deviation of the per-trial means."""
        return _mean_std(self.per_trial_means)[1]

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "algorithm": self.algorithm,
            "master_seed": self.master_seed,
            "cap": self.cap,
            "trials": [{**asdict(t), "mean": t.mean} for t in self.trials],
            "per_trial_means": self.per_trial_means,
            "grand_mean": self.grand_mean,
            "std": self.std,
            "incomplete": self.incomplete,
            "config": self.config,
        }


@dataclass
class _TrialOutput:
    record: TrialRecord
    training_log: list
    transfers: list


def _run_trial(cfg: ExperimentConfig, t: int) -> _TrialOutput:
    seed = derive_seed(cfg.seed, "trial", t)
    rec = TrialRecord(t, seed)
    try:
        res = dqn.train(cfg.task, cfg, seed=seed)
    except NonFiniteError as exc:
        log.warning("trial %d failed during training and is excluded: %s", t, exc)
        rec.failed, rec.error = True, str(exc)
        return _TrialOutput(rec, list(getattr(exc, "records", [])), [])
    rec.final_corr = res.final_corr
    rec.checkpoint_corr = measure_mean_correlation(res.checkpoint, res.probe_states)
    rec.selection_episode = res.selection_episode
    task = perturb_goal(cfg.task, derive_seed(cfg.seed, "goal", t))
    results = transfer_runs(lfa.TrunkFeatures(res.checkpoint), task, cfg, cfg.runs, cfg.seed, t)
    summary = summarize_transfers(cfg.env_id, cfg.lfa_max_episodes, results)
    rec.episodes_to_exit, rec.exited, rec.diverged = summary.episodes_to_exit, summary.exited, summary.diverged
    return _TrialOutput(rec, res.log, results)


def _map_trials(cfg, jobs):
    idx = range(cfg.trials)
    if jobs <= 1 or cfg.trials <= 1:
        return [_run_trial(cfg, t) for t in idx]
    with ProcessPoolExecutor(max_workers=min(jobs, cfg.trials)) as pool:
        return list(pool.map(_run_trial, [cfg] * cfg.trials, idx))


def run_trials(cfg: ExperimentConfig, jobs: int = 1, out_dir=None) -> TrialReport:
    """``cfg.trials`` trainings, each followed by ``cfg.runs`` LFA transfers.

    Results are ordered by (trial, run) whatever the completion order.
    """
    outputs = _map_trials(cfg, jobs)
    report = TrialReport(cfg.env_id, cfg.algorithm, cfg.seed, cfg.lfa_max_episodes,
                         [o.record for o in outputs], cfg.to_dict())
    if report.incomplete:
        log.warning("%d of %d trials failed; report is incomplete", len(report.trials) - len(report.completed),
                    len(report.trials))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "trial_report.json", report.to_dict())
        write_csv(out / "training_log.csv", ("trial", *dqn.TRAINING_LOG_COLUMNS),
                  ((o.record.trial, *row) for o in outputs for row in dqn.log_rows(o.training_log)))
        write_csv(out / "corr_trace.csv", ("trial", "episode", "mean_pair_corr"),
                  ((o.record.trial, r.episode, r.mean_pair_corr) for o in outputs for r in o.training_log))
        write_csv(out / "transfer_log.csv", ("trial", *TRANSFER_LOG_COLUMNS),
                  (row for o in outputs for row in transfer_log_rows(o.transfers, (o.record.trial,))))
    return report


# ---------------------------------------------------------------- ablation


ABLATION_COLUMNS = ("lambda_max", "k", "lambda_delta", "trials", "mean", "std", "per_trial_means",
                    "incomplete", "error")


@dataclass
class AblationCell:
    lambda_max: float
    k: int
    lambda_delta: float
    report: Optional[TrialReport] = None
    error: Optional[str] = None

    def row(self):
        r = self.report
        means = ";".join(fmt(m) for m in r.per_trial_means) if r else ""
        return (self.lambda_max, self.k, self.lambda_delta, len(r.trials) if r else 0,
                r.grand_mean if r else None, r.std if r else None, means,
                r.incomplete if r else True, self.error)


def cell_config(cfg: ExperimentConfig, lambda_max: float, k: int, trials: int = 3) -> ExperimentConfig:
    """Config for one sweep cell; the lambda ramp keeps its length in episodes."""
    if cfg.lambda_max > 0:
        delta = cfg.lambda_delta * (lambda_max / cfg.lambda_max)
    else:
        delta = cfg.lambda_delta
    return cfg.with_overrides(lambda_max=float(lambda_max), clusters=int(k), lambda_delta=float(delta),
                              trials=trials, algorithm="dsdqn")


def run_ablation_lambda_k(cfg: ExperimentConfig, grid, jobs: int = 1, trials: int = 3, out_dir=None):
    grid = list(grid)
    if not grid:
        raise ContractViolation("ablation grid must not be empty")
    cells = []
    for lam, k in grid:
        try:
            ccfg = cell_config(cfg, lam, k, trials)
            cells.append(AblationCell(ccfg.lambda_max, ccfg.clusters, ccfg.lambda_delta, run_trials(ccfg, jobs)))
        except Exception as exc:  # one bad cell must not sink the sweep
            log.warning("ablation cell (%s, %s) failed: %s", lam, k, exc)
            cells.append(AblationCell(float(lam), int(k), float("nan"), None, f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "ablation.csv", ABLATION_COLUMNS, (c.row() for c in cells))
    return cells


def parse_grid(lambdas, ks):
    return [(float(lam), int(k)) for lam in lambdas for k in ks]


# ---------------------------------------------------------------- gridworld demonstration


def high_correlation_trunk(obs_dim: int, n: int, rng: np.random.Generator, noise: float = 0.002) -> nn.DenseNet:
    """A relu layer whose output is a fixed positive profile plus a tiny state-dependent term.

    Every state maps to nearly the same feature vector, so pair correlations
    sit close to 1.
    """
    w = rng.normal(scale=noise, size=(n, obs_dim))
    b = rng.uniform(0.5, 1.5, size=n)
    return nn.DenseNet([nn.Layer(w, b, "relu")])


def gridworld_demo(cfg: ExperimentConfig, out_dir=None, runs: int = 1) -> dict:
    """LFA on gridworld over low-correlation (trained) vs high-correlation features."""
    if cfg.env_id != "gridworld":
        raise ContractViolation("gridworld_demo needs env_id=gridworld")
    task = TaskSpec("gridworld")
    res = dqn.train(cfg.task, cfg, seed=derive_seed(cfg.seed, "trial", 0))
    probes = probe_states(task)
    bad = high_correlation_trunk(2, cfg.feature_dim, np.random.default_rng(derive_seed(cfg.seed, "bad-trunk")))
    window = cfg.exit_window
    doc = {}
    logs = {}
    for name, trunk in (("trained", res.checkpoint.trunk), ("high_corr", bad)):
        results = transfer_runs(lfa.TrunkFeatures(trunk), task, cfg, runs, cfg.seed, 0)
        doc[name] = {
            "mean_pair_corr": measure_mean_correlation(trunk, probes),
            "episodes_to_exit": [int(r.episodes_to_exit) for r in results],
            "exited": [bool(r.exited) for r in results],
            "final_moving_avg_length": [float(np.mean(r.lengths[-window:])) for r in results],
        }
        logs[name] = results
    doc["cap"] = cfg.lfa_max_episodes
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "gridworld_demo.json", doc)
        write_csv(out / "transfer_log.csv", ("features", *TRANSFER_LOG_COLUMNS),
                  (row for name, rs in logs.items() for row in transfer_log_rows(rs, (name,))))
    return doc
