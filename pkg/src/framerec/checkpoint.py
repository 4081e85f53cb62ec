"""Self-describing binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(array names/dtypes/shapes/offsets plus the config echo and free-form
metadata), then the raw array buffers in header order. Writing the same
state twice produces byte-identical files.
"""

import json

import numpy as np
import torch

MAGIC = b"FRCHKPT1"

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


def save_checkpoint(path, state_dict, config_echo: dict, extra: dict | None = None):
    arrays = []
    buffers = []
    offset = 0
    for name in sorted(state_dict):
        tensor = state_dict[name].detach().cpu().contiguous()
        arr = tensor.numpy()
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        arrays.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        buffers.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": 1, "arrays": arrays, "config": config_echo, "extra": extra or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in buffers:
            fh.write(raw)


def load_checkpoint(path):
    """Returns (state_dict of torch tensors, config echo dict, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    state = {}
    for spec in header["arrays"]:
        raw = payload[spec["offset"]: spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("<"))
        state[spec["name"]] = torch.from_numpy(
            arr.reshape(spec["shape"]).astype(spec["dtype"], copy=True))
    return state, header["config"], header["extra"]
