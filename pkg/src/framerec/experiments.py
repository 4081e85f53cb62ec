"""Experiment harness: ablation variants, feature-noise robustness sweeps,
hyperparameter sensitivity grids, and embedding export.

Every run writes one detail CSV row per (condition, seed), flushed as soon
as the run finishes, plus median-over-seeds summary rows. Wall-clock per run
goes to a `timing_*.csv` sidecar so the result CSVs are byte-stable.
"""

import csv
import dataclasses
import os
import statistics
import time
from dataclasses import dataclass, field

import torch

from .config import RunConfig
from .data import FeatureStore, SplitDataset, aligned_feature_arrays, inject_noise
from .evaluation import EvalReport, draw_eval_noise, eval_sequence, evaluate, pad_sequences, _stack_noise
from .model import VARIANTS, RecModel
from .schedule import DiffusionSchedule
from .seeds import derive_seed
from .training import fit

METRIC_COLUMNS = ("hr10", "ndcg10", "hr20", "ndcg20")
CONDITION_COLUMNS = ("variant", "sigma", "lambda_T", "lambda_N", "T", "seed", "split")


@dataclass
class ExperimentPlan:
    cfg: RunConfig
    variants: tuple = VARIANTS
    sigmas: tuple = (0.0, 0.1, 0.3, 0.5)
    lambda_T_grid: tuple = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9)
    lambda_N_grid: tuple = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9)
    T_grid: tuple = (5, 10, 15, 20, 25)
    seeds: tuple = (1, 2, 3)
    out_dir: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not (self.variants and self.sigmas and self.lambda_T_grid
                and self.lambda_N_grid and self.T_grid):
            raise ValueError("experiment grids must be non-empty")


def plan_from_config(cfg: RunConfig, out_dir: str = "") -> ExperimentPlan:
    exp = cfg.experiment
    return ExperimentPlan(
        cfg=cfg, variants=exp.variants, sigmas=exp.sigmas,
        lambda_T_grid=exp.lambda_T_grid, lambda_N_grid=exp.lambda_N_grid,
        T_grid=exp.T_grid, seeds=exp.seeds, out_dir=out_dir)


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Return a config running the named ablation variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, variant=variant))


def _with_seed(cfg: RunConfig, rep_seed: int) -> RunConfig:
    """Derive one run's master seed from the base seed and the replication
    seed, so the CSV keeps small replication ids while --seed still governs
    every run."""
    run_seed = derive_seed(cfg.train.seed, "rep", int(rep_seed))
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=run_seed))


class ResultWriter:
    """Append-only CSV writer that flushes after every row."""

    def __init__(self, path, columns):
        self.columns = tuple(columns)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict):
        self._writer.writerow([_format(row.get(c, "")) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return value


def report_row(report: EvalReport) -> dict:
    row = dict(report.condition)
    row["split"] = report.split
    row["hr10"] = report.hr.get(10)
    row["ndcg10"] = report.ndcg.get(10)
    row["hr20"] = report.hr.get(20)
    row["ndcg20"] = report.ndcg.get(20)
    return row


def median_row(rows, fixed: dict) -> dict:
    out = dict(fixed)
    out["seed"] = "median"
    for col in METRIC_COLUMNS:
        out[col] = statistics.median(r[col] for r in rows)
    return out


def _train_and_eval(cfg: RunConfig, dataset: SplitDataset, store: FeatureStore,
                    condition: dict):
    t0 = time.perf_counter()
    result = fit(dataset, store, cfg)
    report = evaluate(result.model, dataset, store, result.sched, cfg,
                      split="test", condition=condition)
    return report, time.perf_counter() - t0


def _writers(plan: ExperimentPlan, stem: str):
    if not plan.out_dir:
        return None, None
    os.makedirs(plan.out_dir, exist_ok=True)
    detail = ResultWriter(os.path.join(plan.out_dir, f"{stem}_detail.csv"),
                          CONDITION_COLUMNS + METRIC_COLUMNS)
    timing = ResultWriter(os.path.join(plan.out_dir, f"timing_{stem}.csv"),
                          CONDITION_COLUMNS + ("runtime_s",))
    return detail, timing


def _write_summary(plan: ExperimentPlan, stem: str, rows):
    if not plan.out_dir:
        return
    writer = ResultWriter(os.path.join(plan.out_dir, f"{stem}_summary.csv"),
                          CONDITION_COLUMNS + METRIC_COLUMNS)
    for row in rows:
        writer.write(row)
    writer.close()


def _base_condition(cfg: RunConfig) -> dict:
    return {
        "variant": cfg.train.variant,
        "sigma": 0.0,
        "lambda_T": cfg.train.lambda_T,
        "lambda_N": cfg.train.lambda_N,
        "T": cfg.train.T,
    }


def run_ablation(plan: ExperimentPlan, dataset: SplitDataset, store: FeatureStore):
    """Train and evaluate every (variant, seed); returns detail reports
    followed by per-variant median summaries in the report conditions."""
    detail, timing = _writers(plan, "ablation")
    reports = []
    summary_rows = []
    try:
        for variant in plan.variants:
            rows = []
            for seed in plan.seeds:
                cfg = _with_seed(apply_variant(plan.cfg, variant), seed)
                condition = {**_base_condition(cfg), "seed": int(seed)}
                report, runtime = _train_and_eval(cfg, dataset, store, condition)
                reports.append(report)
                row = report_row(report)
                rows.append(row)
                if detail:
                    detail.write(row)
                    timing.write({**row, "runtime_s": runtime})
            summary_rows.append(median_row(
                rows, {**_base_condition(apply_variant(plan.cfg, variant)),
                       "split": "test"}))
    finally:
        if detail:
            detail.close()
            timing.close()
    _write_summary(plan, "ablation", summary_rows)
    return reports, summary_rows


def run_noise_sweep(plan: ExperimentPlan, dataset: SplitDataset, store: FeatureStore):
    """Inject feature noise at each magnitude, then train and evaluate the
    full model per (sigma, seed). The clean store is never mutated."""
    detail, timing = _writers(plan, "noise")
    reports = []
    summary_rows = []
    try:
        for sigma in plan.sigmas:
            rows = []
            for seed in plan.seeds:
                cfg = _with_seed(apply_variant(plan.cfg, "full"), seed)
                noisy = inject_noise(
                    store, sigma, derive_seed(cfg.train.seed, "feature-noise"))
                condition = {**_base_condition(cfg), "sigma": float(sigma), "seed": int(seed)}
                report, runtime = _train_and_eval(cfg, dataset, noisy, condition)
                reports.append(report)
                row = report_row(report)
                rows.append(row)
                if detail:
                    detail.write(row)
                    timing.write({**row, "runtime_s": runtime})
            summary_rows.append(median_row(
                rows, {**_base_condition(apply_variant(plan.cfg, "full")),
                       "sigma": float(sigma), "split": "test"}))
    finally:
        if detail:
            detail.close()
            timing.close()
    _write_summary(plan, "noise", summary_rows)
    return reports, summary_rows


def run_sensitivity(plan: ExperimentPlan, dataset: SplitDataset, store: FeatureStore):
    """Full Cartesian (lambda, T) grid for each diffusion module; emits
    long-form detail rows plus one heat-map-ready pivot CSV per module
    (rows lambda, columns T, cells median HR@10 over seeds)."""
    reports = []
    pivots = {}
    for module, grid in (("tcd", plan.lambda_T_grid), ("npd", plan.lambda_N_grid)):
        detail, timing = _writers(plan, f"sensitivity_{module}")
        cells = {}
        try:
            for lam in grid:
                for T in plan.T_grid:
                    rows = []
                    for seed in plan.seeds:
                        train = dataclasses.replace(
                            plan.cfg.train, T=int(T), variant="full",
                            **{"lambda_T" if module == "tcd" else "lambda_N": float(lam)})
                        cfg = _with_seed(dataclasses.replace(plan.cfg, train=train), seed)
                        condition = {**_base_condition(cfg), "seed": int(seed)}
                        report, runtime = _train_and_eval(cfg, dataset, store, condition)
                        reports.append(report)
                        row = report_row(report)
                        rows.append(row)
                        if detail:
                            detail.write(row)
                            timing.write({**row, "runtime_s": runtime})
                    cells[(lam, T)] = statistics.median(r["hr10"] for r in rows)
        finally:
            if detail:
                detail.close()
                timing.close()
        pivots[module] = cells
        if plan.out_dir:
            _write_pivot(os.path.join(plan.out_dir, f"sensitivity_{module}_hr10.csv"),
                         grid, plan.T_grid, cells)
    return reports, pivots


def _write_pivot(path, lambdas, t_grid, cells):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda"] + [str(t) for t in t_grid])
        for lam in lambdas:
            writer.writerow([repr(float(lam))] + [repr(cells[(lam, t)]) for t in t_grid])


def export_embeddings(model: RecModel, dataset: SplitDataset, store: FeatureStore,
                      sched: DiffusionSchedule, cfg: RunConfig, user_ids, out_path):
    """Write, per user: the denoised preference vector, the held-out target
    item's embedding, and the refined frame vectors, one CSV row each
    (role, user_id, index, then the vector components)."""
    by_id = {u.user_id: u for u in dataset.users}
    unknown = [uid for uid in user_ids if uid not in by_id]
    if unknown:
        raise KeyError(f"unknown user ids: {unknown}")
    users = [by_id[uid] for uid in user_ids]
    visual, frames, text = aligned_feature_arrays(store, dataset)

    max_len = cfg.backbone.max_len
    seqs = [eval_sequence(u, "test", max_len)[0] for u in users]
    seq_arr = pad_sequences(seqs, max_len)
    seq_t = torch.from_numpy(seq_arr)
    last = seq_arr[:, -1]
    batch = {
        "seq": seq_t,
        "hist_visual": torch.from_numpy(visual[seq_arr]),
        "frames": torch.from_numpy(frames[last]),
        "text": torch.from_numpy(text[last]),
    }
    packs = [
        draw_eval_noise(derive_seed(cfg.train.seed, "eval", "test", u.user_id),
                        sched.T, model.n_frames, visual.shape[1], cfg.backbone.dim)
        for u in users
    ]
    model.eval()
    with torch.no_grad():
        rep, frame_latents = model.eval_representation(
            batch, sched, _stack_noise(packs), npd_start=cfg.npd.eval_start)
        item_emb = model.encoder.item_emb.weight.detach()

    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["role", "user_id", "index"])
        for i, user in enumerate(users):
            writer.writerow(["preference", user.user_id, 0]
                            + [repr(float(v)) for v in rep[i]])
            writer.writerow(["target_item", user.user_id, 0]
                            + [repr(float(v)) for v in item_emb[user.test]])
            for j in range(frame_latents.shape[1]):
                writer.writerow(["frame", user.user_id, j + 1]
                                + [repr(float(v)) for v in frame_latents[i, j]])
    return out_path
