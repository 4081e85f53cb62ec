"""Full-ranking top-k evaluation: HR@k and NDCG@k under leave-one-out.

Per-user reverse-chain noise is drawn from a seed derived from
(run seed, "eval", split, user_id), so results are independent of user
iteration order and batch size; metric averages use compensated summation
for order-robust accumulation.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .data import SplitDataset, aligned_feature_arrays
from .model import RecModel
from .schedule import DiffusionSchedule
from .seeds import derive_seed, torch_generator


@dataclass
class EvalReport:
    split: str
    n_users: int
    hr: dict            # k -> hit ratio in [0, 1]
    ndcg: dict          # k -> NDCG in [0, 1]
    condition: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "n_users": self.n_users,
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "condition": self.condition,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def score_items(x_hat, item_embeddings):
    """Dot product of one preference vector against each embedding row."""
    if x_hat.shape[-1] != item_embeddings.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {x_hat.shape[-1]} vs {item_embeddings.shape[-1]}"
        )
    return x_hat @ item_embeddings.T


def target_rank(scores, target: int) -> int:
    """1-based rank of the target under descending score, ties broken by
    ascending item index."""
    scores = np.asarray(scores)
    s_t = scores[target]
    better = int(np.sum(scores > s_t))
    ties_before = int(np.sum(scores[:target] == s_t))
    return better + ties_before + 1


def topk_metrics(scores, target: int, ks) -> dict:
    """Per-user contributions {k: (hit, ndcg)} for a single held-out target."""
    rank = target_rank(scores, target)
    out = {}
    for k in ks:
        hit = 1.0 if rank <= k else 0.0
        out[k] = (hit, (1.0 / math.log2(rank + 1)) if rank <= k else 0.0)
    return out


class _KahanSum:
    """Compensated summation so user order cannot shift the average."""

    def __init__(self):
        self.total = 0.0
        self._c = 0.0

    def add(self, value: float):
        y = value - self._c
        t = self.total + y
        self._c = (t - self.total) - y
        self.total = t


def eval_sequence(user, split: str, max_len: int):
    """The input window and target for one user on one split."""
    if split == "val":
        return list(user.train[-max_len:]), user.val
    if split == "test":
        seq = list(user.train) + [user.val]
        return seq[-max_len:], user.test
    raise ValueError(f"unknown split {split!r}")


def pad_sequences(seqs, max_len: int) -> np.ndarray:
    out = np.zeros((len(seqs), max_len), dtype=np.int64)
    for i, seq in enumerate(seqs):
        if seq:
            out[i, max_len - len(seq):] = seq
    return out


def draw_eval_noise(seed: int, T: int, n_frames: int, d_v: int, dim: int,
                    dtype=torch.float32) -> dict:
    """All reverse-chain noise one user needs, in a fixed draw order.

    Every component is drawn regardless of variant or start mode, so runs
    with the same seed stay comparable across configurations.
    """
    gen = torch_generator(seed)
    draw = lambda *shape: torch.randn(shape, generator=gen, dtype=dtype)
    return {
        "z_start": draw(n_frames, d_v),
        "z_steps": draw(max(T - 1, 0), n_frames, d_v),
        "x_corrupt": draw(dim),
        "x_start": draw(dim),
        "x_steps": draw(max(T - 1, 0), dim),
    }


def _stack_noise(packs) -> dict:
    return {
        "z_start": torch.stack([p["z_start"] for p in packs]),
        "z_steps": torch.stack([p["z_steps"] for p in packs], dim=1),
        "x_corrupt": torch.stack([p["x_corrupt"] for p in packs]),
        "x_start": torch.stack([p["x_start"] for p in packs]),
        "x_steps": torch.stack([p["x_steps"] for p in packs], dim=1),
    }


def user_scores(model: RecModel, dataset: SplitDataset, aligned, sched, cfg: RunConfig,
                split: str, users) -> np.ndarray:
    """Score matrix (len(users), n_items) for non-padding items, computed
    with the full evaluation chains."""
    visual, frames, text = aligned
    max_len = cfg.backbone.max_len
    seqs, _targets = zip(*(eval_sequence(u, split, max_len) for u in users))
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
        draw_eval_noise(
            derive_seed(cfg.train.seed, "eval", split, u.user_id),
            sched.T, model.n_frames, visual.shape[1], cfg.backbone.dim)
        for u in users
    ]
    with torch.no_grad():
        rep, _ = model.eval_representation(
            batch, sched, _stack_noise(packs), npd_start=cfg.npd.eval_start)
        scores = model.item_scores(rep)
    return scores.numpy()


def evaluate(model: RecModel, dataset: SplitDataset, store, sched: DiffusionSchedule,
             cfg: RunConfig, split: str | None = None, ks=None,
             condition: dict | None = None) -> EvalReport:
    """Average HR@k / NDCG@k over all users on the requested split.

    Candidate items exclude the padding row always, and (when
    eval.mask_history is set) the items already in the user's input window,
    except the target itself.
    """
    split = split or cfg.eval.split
    ks = tuple(ks or cfg.eval.ks)
    model.eval()
    aligned = aligned_feature_arrays(store, dataset)
    sums = {k: (_KahanSum(), _KahanSum()) for k in ks}
    users = dataset.users
    bs = max(1, cfg.eval.batch_size)
    for start in range(0, len(users), bs):
        chunk = users[start:start + bs]
        scores = user_scores(model, dataset, aligned, sched, cfg, split, chunk)
        for row, user in zip(scores, chunk):
            seq, target = eval_sequence(user, split, cfg.backbone.max_len)
            if cfg.eval.mask_history:
                for idx in seq:
                    if idx != target:
                        row[idx - 1] = -np.inf
            per_k = topk_metrics(row, target - 1, ks)
            for k, (hit, ndcg) in per_k.items():
                sums[k][0].add(hit)
                sums[k][1].add(ndcg)
    n = len(users)
    return EvalReport(
        split=split,
        n_users=n,
        hr={k: sums[k][0].total / n for k in ks},
        ndcg={k: sums[k][1].total / n for k in ks},
        condition=dict(condition or {}),
    )


def popularity_report(dataset: SplitDataset, cfg: RunConfig, split: str = "test",
                      ks=None) -> EvalReport:
    """Null model: rank items by train-split interaction counts."""
    ks = tuple(ks or cfg.eval.ks)
    counts = np.zeros(dataset.n_items, dtype=np.float64)
    for user in dataset.users:
        for idx in user.train:
            counts[idx - 1] += 1
    sums = {k: (_KahanSum(), _KahanSum()) for k in ks}
    for user in dataset.users:
        seq, target = eval_sequence(user, split, cfg.backbone.max_len)
        row = counts.copy()
        if cfg.eval.mask_history:
            for idx in seq:
                if idx != target:
                    row[idx - 1] = -np.inf
        per_k = topk_metrics(row, target - 1, ks)
        for k, (hit, ndcg) in per_k.items():
            sums[k][0].add(hit)
            sums[k][1].add(ndcg)
    n = len(dataset.users)
    return EvalReport(
        split=split, n_users=n,
        hr={k: sums[k][0].total / n for k in ks},
        ndcg={k: sums[k][1].total / n for k in ks},
        condition={"model": "popularity"},
    )
