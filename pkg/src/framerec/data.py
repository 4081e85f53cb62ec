"""Dataset ingestion, filtering, chronological splitting, synthetic
generation, and feature-noise injection.

File formats:
  * interactions: UTF-8 TSV with header ``user_id<TAB>item_id<TAB>timestamp``,
    LF line endings, one record per line.
  * features: a JSON manifest naming the item order, dimensions, and three
    raw binary files (little-endian IEEE-754 float32, row-major): global
    visuals (N, d_v), frame features (N, K, d_v), text features (N, d_h).
"""

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

INTERACTIONS_HEADER = "user_id\titem_id\ttimestamp"


class InteractionRecord(NamedTuple):
    user_id: str
    item_id: str
    timestamp: int


class DataFormatError(ValueError):
    """Raised for malformed interaction or feature files."""


def parse_interactions(path) -> list:
    """Read an interactions TSV, preserving file order and duplicates."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header != INTERACTIONS_HEADER:
            raise DataFormatError(
                f"{path}:1: unknown header {header!r}, expected {INTERACTIONS_HEADER!r}"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            user_id, item_id, ts_text = parts
            try:
                timestamp = int(ts_text)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: timestamp {ts_text!r} is not an integer"
                ) from None
            if timestamp < 0:
                raise DataFormatError(f"{path}:{lineno}: negative timestamp")
            records.append(InteractionRecord(user_id, item_id, timestamp))
    return records


def write_interactions(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(INTERACTIONS_HEADER + "\n")
        for rec in records:
            fh.write(f"{rec.user_id}\t{rec.item_id}\t{rec.timestamp}\n")


def four_core_filter(records, min_count: int = 4) -> list:
    """Iteratively drop users and items with < min_count interactions until
    a fixed point, preserving the original record order."""
    current = list(records)
    while True:
        user_counts = Counter(r.user_id for r in current)
        item_counts = Counter(r.item_id for r in current)
        kept = [
            r for r in current
            if user_counts[r.user_id] >= min_count and item_counts[r.item_id] >= min_count
        ]
        if len(kept) == len(current):
            return kept
        current = kept


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    train: tuple          # vocab indices, oldest first, truncated to max_len
    val: int
    test: int
    val_ts: int
    test_ts: int
    train_ts: tuple


@dataclass(frozen=True)
class SplitDataset:
    users: tuple          # UserSplit entries, sorted by user_id
    item_ids: tuple       # vocabulary in index order; index 0 is padding
    vocab: dict           # item_id -> index (1-based)
    max_len: int

    @property
    def n_items(self) -> int:
        return len(self.item_ids) - 1


def leave_one_out_split(records, max_len: int) -> SplitDataset:
    """Per user: chronologically last interaction -> test, second last ->
    validation, remainder -> train (truncated to the most recent max_len).
    Equal timestamps keep file order (stable sort)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    by_user = {}
    for rec in records:
        by_user.setdefault(rec.user_id, []).append(rec)

    item_ids = sorted({r.item_id for r in records})
    vocab = {item: idx + 1 for idx, item in enumerate(item_ids)}

    users = []
    for user_id in sorted(by_user):
        seq = sorted(by_user[user_id], key=lambda r: r.timestamp)
        if len(seq) < 3:
            raise ValueError(
                f"user {user_id!r} has {len(seq)} interactions; need >= 3 for leave-one-out"
            )
        *train, val, test = seq
        train = train[-max_len:]
        users.append(UserSplit(
            user_id=user_id,
            train=tuple(vocab[r.item_id] for r in train),
            val=vocab[val.item_id],
            test=vocab[test.item_id],
            val_ts=val.timestamp,
            test_ts=test.timestamp,
            train_ts=tuple(r.timestamp for r in train),
        ))
    return SplitDataset(users=tuple(users), item_ids=tuple([""] + item_ids),
                        vocab=vocab, max_len=max_len)


@dataclass(frozen=True)
class FeatureStore:
    """Per-item multimodal features, keyed by item_id, uniform dimensions."""

    item_ids: tuple
    global_visual: np.ndarray   # (N, d_v) float32
    frames: np.ndarray          # (N, K, d_v) float32
    text: np.ndarray            # (N, d_h) float32
    index: dict = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self.index:
            object.__setattr__(
                self, "index", {item: i for i, item in enumerate(self.item_ids)}
            )

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def n_frames(self):
        return self.frames.shape[1]

    @property
    def d_v(self):
        return self.global_visual.shape[1]

    @property
    def d_h(self):
        return self.text.shape[1]

    def row(self, item_id: str) -> int:
        if item_id not in self.index:
            raise KeyError(f"item {item_id!r} has no features")
        return self.index[item_id]


def save_features(store: FeatureStore, out_dir, manifest_name: str = "features.json") -> str:
    """Write the manifest plus raw float32 binaries; bit-exact round trip."""
    os.makedirs(out_dir, exist_ok=True)
    names = {"global_file": "global.f32", "frames_file": "frames.f32", "text_file": "text.f32"}
    arrays = {"global_file": store.global_visual, "frames_file": store.frames,
              "text_file": store.text}
    for key, fname in names.items():
        with open(os.path.join(out_dir, fname), "wb") as fh:
            fh.write(np.ascontiguousarray(arrays[key], dtype="<f4").tobytes())
    manifest = {
        "items": list(store.item_ids),
        "K": int(store.n_frames),
        "d_v": int(store.d_v),
        "d_h": int(store.d_h),
        **names,
    }
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def _read_binary(path, shape) -> np.ndarray:
    expected = int(np.prod(shape)) * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)}, found {actual}"
        )
    with open(path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype="<f4")
    return flat.reshape(shape).copy()


def load_features(manifest_path) -> FeatureStore:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    required = {"items", "K", "d_v", "d_h", "global_file", "frames_file", "text_file"}
    missing = required - manifest.keys()
    if missing:
        raise DataFormatError(f"{manifest_path}: manifest missing keys {sorted(missing)}")
    items = tuple(manifest["items"])
    n, k, d_v, d_h = len(items), manifest["K"], manifest["d_v"], manifest["d_h"]
    base = os.path.dirname(os.path.abspath(manifest_path))
    path = lambda key: os.path.join(base, manifest[key])
    return FeatureStore(
        item_ids=items,
        global_visual=_read_binary(path("global_file"), (n, d_v)),
        frames=_read_binary(path("frames_file"), (n, k, d_v)),
        text=_read_binary(path("text_file"), (n, d_h)),
    )


def aligned_feature_arrays(store: FeatureStore, dataset: SplitDataset):
    """Reindex store rows by vocabulary index, with a zero row at padding
    index 0. Raises KeyError for items lacking features."""
    n = dataset.n_items
    visual = np.zeros((n + 1, store.d_v), dtype=np.float32)
    frames = np.zeros((n + 1, store.n_frames, store.d_v), dtype=np.float32)
    text = np.zeros((n + 1, store.d_h), dtype=np.float32)
    for item_id, idx in dataset.vocab.items():
        row = store.row(item_id)
        visual[idx] = store.global_visual[row]
        frames[idx] = store.frames[row]
        text[idx] = store.text[row]
    return visual, frames, text


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 500
    n_items: int = 300
    n_frames: int = 5
    d_v: int = 32
    d_h: int = 16
    n_clusters: int = 8
    seq_len_range: tuple = (6, 12)
    noise: float = 0.2
    drift: float = 0.05


def synth_generate(config: SynthConfig, seed: int):
    """Generate a planted-cluster interaction dataset with full features.

    Items draw their frames from 1-2 latent interest clusters (the dominant
    one is the item's label); each user follows a slowly drifting cluster
    preference, picking an unseen item from the current argmax cluster with
    probability 1 - noise and uniformly otherwise. Deterministic per seed.
    """
    if min(config.n_users, config.n_items, config.n_frames, config.d_v,
           config.d_h, config.n_clusters) < 1:
        raise ValueError("all synthetic sizes must be positive")
    lo, hi = config.seq_len_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad seq_len_range {config.seq_len_range}")
    rng = np.random.default_rng(int(seed))

    centroids = rng.normal(size=(config.n_clusters, config.d_v))
    text_map = rng.normal(size=(config.d_h, config.d_v)) / np.sqrt(config.d_v)

    labels = np.empty(config.n_items, dtype=np.int64)
    frames = np.empty((config.n_items, config.n_frames, config.d_v), dtype=np.float64)
    for i in range(config.n_items):
        dominant = int(rng.integers(config.n_clusters))
        labels[i] = dominant
        mix = centroids[dominant][None, :].repeat(config.n_frames, axis=0)
        if config.n_clusters > 1 and rng.random() < 0.5:
            secondary = int(rng.integers(config.n_clusters - 1))
            secondary += secondary >= dominant
            n_minor = int(rng.integers(1, max(config.n_frames // 2, 1) + 1))
            minor = rng.choice(config.n_frames, size=n_minor, replace=False)
            mix[minor] = 0.35 * centroids[dominant] + 0.65 * centroids[secondary]
        frames[i] = mix + 0.3 * rng.normal(size=mix.shape)
    global_visual = frames.mean(axis=1)
    text = centroids[labels] @ text_map.T + 0.2 * rng.normal(
        size=(config.n_items, config.d_h))

    digits_u = len(str(config.n_users - 1))
    digits_i = len(str(config.n_items - 1))
    item_names = [f"i{idx:0{digits_i}d}" for idx in range(config.n_items)]
    by_cluster = [np.flatnonzero(labels == c) for c in range(config.n_clusters)]

    records = []
    for u in range(config.n_users):
        user_id = f"u{u:0{digits_u}d}"
        pref = 1.5 * rng.normal(size=config.n_clusters)
        length = int(rng.integers(lo, hi + 1))
        ts = int(rng.integers(0, 1_000_000))
        seen = set()
        for _ in range(length):
            if rng.random() < config.noise:
                cluster = int(rng.integers(config.n_clusters))
            else:
                cluster = int(np.argmax(pref))
            pool = [i for i in by_cluster[cluster] if i not in seen]
            if not pool:
                pool = [i for i in range(config.n_items) if i not in seen]
            if not pool:
                break
            item = int(pool[rng.integers(len(pool))])
            seen.add(item)
            records.append(InteractionRecord(user_id, item_names[item], ts))
            ts += int(rng.integers(1, 3600))
            if config.drift > 0:
                pref = pref + config.drift * rng.normal(size=config.n_clusters)

    store = FeatureStore(
        item_ids=tuple(item_names),
        global_visual=global_visual.astype(np.float32),
        frames=frames.astype(np.float32),
        text=text.astype(np.float32),
    )
    return records, store


def inject_noise(store: FeatureStore, sigma: float, seed: int) -> FeatureStore:
    """Add sigma * standard Gaussian noise to every visual entry (global and
    frame features); text is untouched. sigma=0 returns a bit-identical copy."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return replace(store, global_visual=store.global_visual.copy(),
                       frames=store.frames.copy(), text=store.text.copy())
    rng = np.random.default_rng(int(seed))
    noisy_global = store.global_visual + sigma * rng.standard_normal(
        store.global_visual.shape, dtype=np.float32)
    noisy_frames = store.frames + sigma * rng.standard_normal(
        store.frames.shape, dtype=np.float32)
    return replace(store, global_visual=noisy_global.astype(np.float32),
                   frames=noisy_frames.astype(np.float32), text=store.text.copy())
