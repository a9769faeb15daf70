"""Versioned binary checkpoints.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON header,
then every block listed in the header as little-endian float32 in order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .network import Network, NetworkConfig

MAGIC = b"HTRCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path,
    net: Network,
    alphabet_chars: str,
    train_cfg: Optional[dict] = None,
    optimizer=None,
    epoch: int = 0,
    extra: Optional[dict] = None,
) -> None:
    blocks: list[tuple[str, str, np.ndarray]] = []
    for name, p in net.params.items():
        blocks.append(("param", name, p.data))
    for name, st in net.bn.items():
        blocks.append(("bn_mean", name, st.running_mean))
        blocks.append(("bn_var", name, st.running_var))
    adam_t = 0
    if optimizer is not None:
        adam_t = optimizer.t
        for name in sorted(optimizer.m):
            blocks.append(("adam_m", name, optimizer.m[name]))
            blocks.append(("adam_v", name, optimizer.v[name]))
    header = {
        "network": net.cfg.to_dict(),
        "train": train_cfg or {},
        "alphabet": alphabet_chars,
        "epoch": epoch,
        "adam_step": adam_t,
        "dropout_rng": net.dropout_rng.bit_generator.state,
        "blocks": [{"kind": k, "name": n, "shape": list(a.shape)} for k, n, a in blocks],
    }
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for _, _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Header dict and a {(kind, name): array} map."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    off = 8 + 12
    header = json.loads(buf[off : off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"], dtype=np.int64))
        if off + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated block {blk['name']}")
        arrays[(blk["kind"], blk["name"])] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(blk["shape"])
        off += 4 * n
    return header, arrays


def load_checkpoint(path, optimizer=None) -> tuple[Network, dict]:
    """Rebuild the network (and optionally fill an optimizer) from a checkpoint."""
    header, arrays = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(header["network"])
    net = Network(cfg, seed=0)
    for name in list(net.params):
        key = ("param", name)
        if key not in arrays:
            if name.startswith("shortcut."):
                net.params.pop(name)
                continue
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[key].shape != net.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {arrays[key].shape} vs {net.params[name].shape}")
        net.params[name].data = arrays[key].astype(net.dtype)
    for name, st in net.bn.items():
        st.running_mean = arrays[("bn_mean", name)].astype(net.dtype)
        st.running_var = arrays[("bn_var", name)].astype(net.dtype)
    if header.get("dropout_rng"):
        net.dropout_rng.bit_generator.state = header["dropout_rng"]
    if optimizer is not None:
        optimizer.t = header.get("adam_step", 0)
        for (kind, name), arr in arrays.items():
            if kind == "adam_m":
                optimizer.m[name] = arr.astype(net.dtype)
            elif kind == "adam_v":
                optimizer.v[name] = arr.astype(net.dtype)
    return net, header
