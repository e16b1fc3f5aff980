"""Checkpoints: a JSON header next to one flat binary buffer.

The parameter buffer of every sub-scene is stored as little-endian
float32 per the external contract; auxiliary sections (Adam moments and
pose-table bases, float64) follow so a resumed run reproduces the
uninterrupted loss trace exactly. The header records section offsets,
parameter layouts, the scheduler state, RNG state and the config hash.
"""

from __future__ import annotations

import os

import numpy as np

from . import dataio


class CheckpointError(RuntimeError):
    pass


def _rng_state(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: int(v) if isinstance(v, (int, np.integer)) else v
                      for k, v in st["state"].items()},
            "has_uint32": int(st.get("has_uint32", 0)),
            "uinteger": int(st.get("uinteger", 0))}


def _restore_rng(spec):
    rng = np.random.default_rng()
    rng.bit_generator.state = spec
    return rng


def save_checkpoint(path_prefix, subscenes, train_state, rng, config,
                    extra=None):
    """subscenes: list of dicts with keys models, table, adams (dict of
    name -> Adam), frames. Writes <prefix>.json and <prefix>.bin."""
    sections = []
    blobs = []
    offset = 0

    def push(name, arr, dtype):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        sections.append({"name": name, "offset": offset,
                         "count": int(np.asarray(arr).size),
                         "dtype": np.dtype(dtype).str})
        blobs.append(raw)
        offset += len(raw)

    header_scenes = []
    for i, sub in enumerate(subscenes):
        models, table = sub["models"], sub["table"]
        push(f"scene{i}.params", models.store.flat, "<f4")
        push(f"scene{i}.pose_base_R", table.base_R, "<f8")
        push(f"scene{i}.pose_base_t", table.base_t, "<f8")
        adam_states = {}
        for gname, opt in sub["adams"].items():
            push(f"scene{i}.adam.{gname}.m", opt.m, "<f8")
            push(f"scene{i}.adam.{gname}.v", opt.v, "<f8")
            adam_states[gname] = opt.state_dict()
        header_scenes.append({
            "layout": models.store.layout(),
            "n_frames": models.n_frames,
            "frames": list(map(int, sub["frames"])),
            "adam": adam_states,
        })
    header = {
        "format": "dynrad-checkpoint-1",
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "train_state": train_state.to_dict(),
        "rng": _rng_state(rng),
        "scenes": header_scenes,
        "sections": sections,
        "extra": extra or {},
    }
    dataio.write_json(path_prefix + ".json", header)
    with open(path_prefix + ".bin", "wb") as fh:
        for raw in blobs:
            fh.write(raw)
    return path_prefix + ".json"


def load_checkpoint(path_prefix):
    """Returns (header, {section name: array})."""
    hdr_path = path_prefix + ".json"
    bin_path = path_prefix + ".bin"
    if not os.path.exists(hdr_path) or not os.path.exists(bin_path):
        raise CheckpointError(f"missing checkpoint files at {path_prefix}")
    header = dataio.read_json(hdr_path)
    if header.get("format") != "dynrad-checkpoint-1":
        raise CheckpointError("unrecognized checkpoint format")
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    sections = {}
    for sec in header["sections"]:
        dt = np.dtype(sec["dtype"])
        start = sec["offset"]
        end = start + sec["count"] * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint section {sec['name']}")
        sections[sec["name"]] = np.frombuffer(blob[start:end], dtype=dt).copy()
    return header, sections


def restore_rng(header):
    spec = dict(header["rng"])
    return _restore_rng(spec)
