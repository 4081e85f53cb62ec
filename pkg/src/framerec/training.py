"""Joint optimization of the backbone and both denoising modules under the
hybrid objective  L_total = L_rec + lambda_T * L_frames + lambda_N * L_pref.

Training instances are sliding next-item windows over each user's train
prefix. One master seed fans out to named streams: `init` (weights),
`dropout`, `shuffle` (batch order), `diffusion` (timesteps and noise), and
per-user `eval` chains.
"""

import json
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .data import FeatureStore, SplitDataset, aligned_feature_arrays
from .evaluation import evaluate
from .model import RecModel, build_model
from .schedule import DiffusionSchedule, build_schedule
from .seeds import derive_seed, torch_generator


class TrainingDiverged(RuntimeError):
    pass


def rec_loss(scores, target: int):
    """Cross-entropy over the candidate set: -log softmax(scores)[target].

    scores: 1-D tensor over non-padding items; target is an index into it.
    """
    scores = torch.as_tensor(scores, dtype=torch.float64) if not torch.is_tensor(scores) else scores
    if scores.dim() != 1:
        raise ValueError("scores must be 1-D")
    if not (0 <= int(target) < scores.shape[0]):
        raise ValueError(f"target {target} outside [0, {scores.shape[0]})")
    return torch.nn.functional.cross_entropy(
        scores.unsqueeze(0), torch.tensor([int(target)]))


def sample_timestep(T: int, rng: torch.Generator, n: int | None = None,
                    mode: str = "uniform_1_to_T", fixed_set=(5, 10, 15, 20, 25)):
    """Draw diffusion timesteps.

    uniform_1_to_T: t ~ Uniform{1..T}. fixed_set: t uniform over the given
    set restricted to values <= T (errors if none qualify). Returns an int
    when n is None, else a (n,) long tensor.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    count = 1 if n is None else n
    if mode == "uniform_1_to_T":
        t = torch.randint(1, T + 1, (count,), generator=rng)
    elif mode == "fixed_set":
        allowed = [v for v in fixed_set if 1 <= v <= T]
        if not allowed:
            raise ValueError(f"no timestep in {fixed_set} is <= T={T}")
        choices = torch.tensor(allowed)
        t = choices[torch.randint(0, len(allowed), (count,), generator=rng)]
    else:
        raise ValueError(f"unknown t_sampling mode {mode!r}")
    return int(t[0]) if n is None else t


def make_t_sampler(cfg: RunConfig):
    def sampler(n, rng):
        return sample_timestep(cfg.train.T, rng, n=n, mode=cfg.train.t_sampling,
                               fixed_set=cfg.train.t_fixed_set)
    return sampler


def total_loss(model: RecModel, batch, sched: DiffusionSchedule, cfg: RunConfig,
               rng: torch.Generator):
    """Compose the hybrid objective exactly as L_R + lambda_T*L_T + lambda_N*L_N.

    Returns (total, parts) with parts = {"rec", "tcd", "npd"} as tensors;
    losses dropped by the variant appear as zeros.
    """
    loss_rec, loss_tcd, loss_npd, _rep = model.training_parts(
        batch, sched, rng, make_t_sampler(cfg))
    # compose the scalar objective in float64 so the part-accounting
    # identity holds to 1e-9 regardless of the model dtype
    total = (loss_rec.double() + cfg.train.lambda_T * loss_tcd.double()
             + cfg.train.lambda_N * loss_npd.double())
    return total, {"rec": loss_rec, "tcd": loss_tcd, "npd": loss_npd}


@dataclass
class TrainingInstances:
    seq: np.ndarray        # (n, max_len) int64, left-padded vocab indices
    target: np.ndarray     # (n,) int64
    last_item: np.ndarray  # (n,) int64, the input window's newest item


def build_training_instances(dataset: SplitDataset) -> TrainingInstances:
    """Sliding next-item windows over every user's train prefix."""
    max_len = dataset.max_len
    seqs, targets = [], []
    for user in dataset.users:
        items = list(user.train)
        for k in range(1, len(items)):
            window = items[max(0, k - max_len):k]
            row = np.zeros(max_len, dtype=np.int64)
            row[max_len - len(window):] = window
            seqs.append(row)
            targets.append(items[k])
    if not seqs:
        raise ValueError("no training instances; every user needs >= 2 train items")
    seq = np.stack(seqs)
    return TrainingInstances(seq=seq, target=np.asarray(targets, dtype=np.int64),
                             last_item=seq[:, -1].copy())


@dataclass
class FitResult:
    model: RecModel
    sched: DiffusionSchedule
    log: list
    best_epoch: int
    best_val_ndcg: float


def _gather_batch(idx, inst, tensors):
    visual, frames, text = tensors
    seq = torch.from_numpy(inst.seq[idx])
    return {
        "seq": seq,
        "target": torch.from_numpy(inst.target[idx]),
        "hist_visual": visual[seq],
        "frames": frames[torch.from_numpy(inst.last_item[idx])],
        "text": text[torch.from_numpy(inst.last_item[idx])],
    }


def fit(dataset: SplitDataset, store: FeatureStore, cfg: RunConfig,
        progress=None) -> FitResult:
    """Adam training with gradient clipping, per-epoch validation, early
    stopping on validation NDCG@10, and best-checkpoint retention.

    Deterministic given cfg.train.seed. Raises TrainingDiverged when the
    loss goes non-finite.
    """
    sched = build_schedule(cfg.train.T, cfg.train.beta_start, cfg.train.beta_end)
    model = build_model(cfg, dataset.n_items, store.n_frames, store.d_v, store.d_h)
    torch.manual_seed(derive_seed(cfg.train.seed, "dropout"))
    aligned_np = aligned_feature_arrays(store, dataset)
    aligned_t = tuple(torch.from_numpy(a) for a in aligned_np)
    inst = build_training_instances(dataset)
    n = inst.seq.shape[0]
    batch_size = max(1, min(cfg.train.batch_size, n))

    shuffle_rng = torch_generator(derive_seed(cfg.train.seed, "shuffle"))
    diffusion_rng = torch_generator(derive_seed(cfg.train.seed, "diffusion"))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.train.learning_rate)

    log = []
    best_state = None
    best_metric = -np.inf
    best_epoch = 0
    since_best = 0
    for epoch in range(1, cfg.train.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = torch.randperm(n, generator=shuffle_rng).numpy()
        part_sums = {"total": 0.0, "rec": 0.0, "tcd": 0.0, "npd": 0.0}
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            batch = _gather_batch(idx, inst, aligned_t)
            total, parts = total_loss(model, batch, sched, cfg, diffusion_rng)
            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} "
                    f"(rec={float(parts['rec'])}, tcd={float(parts['tcd'])}, "
                    f"npd={float(parts['npd'])})")
            optimizer.zero_grad()
            total.backward()
            if cfg.train.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()
            w = len(idx) / n
            part_sums["total"] += float(total.detach()) * w
            for key in ("rec", "tcd", "npd"):
                part_sums[key] += float(parts[key].detach()) * w

        record = {
            "epoch": epoch,
            "loss_total": part_sums["total"],
            "loss_rec": part_sums["rec"],
            "loss_tcd": part_sums["tcd"],
            "loss_npd": part_sums["npd"],
            "val_hr10": None,
            "val_ndcg10": None,
            "wall_time_s": None,
        }
        if epoch % max(cfg.train.eval_every, 1) == 0 or epoch == cfg.train.epochs:
            val = evaluate(model, dataset, store, sched, cfg, split="val", ks=(10,))
            record["val_hr10"] = val.hr[10]
            record["val_ndcg10"] = val.ndcg[10]
            if val.ndcg[10] > best_metric:
                best_metric = val.ndcg[10]
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                since_best = 0
            else:
                since_best += 1
        record["wall_time_s"] = time.perf_counter() - t0
        log.append(record)
        if progress is not None:
            progress(record)
        if since_best >= cfg.train.patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    return FitResult(model=model, sched=sched, log=log,
                     best_epoch=best_epoch, best_val_ndcg=best_metric)


def write_train_log(path, log):
    """JSON-lines training log; wall-clock goes to the timing sidecar so the
    log itself is byte-stable across reruns."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in log:
            row = {k: v for k, v in record.items() if k != "wall_time_s"}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_timing_log(path, log):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in log:
            fh.write(json.dumps({"epoch": record["epoch"],
                                 "wall_time_s": record["wall_time_s"]}) + "\n")
