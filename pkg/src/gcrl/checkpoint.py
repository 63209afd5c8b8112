"""Versioned binary run checkpoints.

A checkpoint always carries the run config, model config, both parameter sets,
the optimizer moments, episode counter, RNG states and (for routing) the
topology text. A *full* checkpoint additionally embeds the replay buffer so a
run can resume bit-identically; light checkpoints are enough for evaluation
and sweeps.

Layout: magic, u64 header length, JSON header, then the raw array sections in
header order (little-endian, contiguous).
"""

from __future__ import annotations

import io
import json

import numpy as np

from .autodiff import AdamState, ParamSet, StructuralError
from .config import RunConfig, config_from_text, config_to_text
from .learner import Transition
from .model import ModelConfig, read_params, write_params

_MAGIC = b"GCKP"
_VERSION = 1


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _blob(arr: np.ndarray):
    dt = arr.dtype.newbyteorder("<")
    return {"dtype": dt.str, "shape": list(arr.shape)}, \
        np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()


def save_checkpoint(path, *, run_config: RunConfig, model_config: ModelConfig,
                    params: ParamSet, target_params: ParamSet, adam: AdamState,
                    episode: int, rng_states: dict, topology_text: str | None = None,
                    buffer=None):
    params_buf = io.BytesIO()
    write_params(params_buf, params, model_config)
    target_buf = io.BytesIO()
    write_params(target_buf, target_params, model_config)

    sections = [("params", params_buf.getvalue()), ("target", target_buf.getvalue())]
    arrays = []
    for name, t in sorted(adam.m.items()):
        arrays.append((f"adam.m.{name}", t))
    for name, t in sorted(adam.v.items()):
        arrays.append((f"adam.v.{name}", t))

    header = {
        "version": _VERSION,
        "run_config": config_to_text(run_config),
        "episode": episode,
        "adam": {"t": adam.t, "learning_rate": adam.learning_rate,
                 "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "rng_states": rng_states,
        "topology": topology_text,
        "sections": [],
        "arrays": [],
        "buffer": None,
    }

    buffer_arrays = []
    if buffer is not None:
        items, next_slot = buffer.state()
        header["buffer"] = {"count": len(items), "next": next_slot,
                            "capacity": buffer.capacity}
        if items:
            limit = max(max((len(nb) for nb in tr.neighbors), default=0)
                        for tr in items)
            limit2 = max(max((len(nb) for nb in tr.next_neighbors), default=0)
                         for tr in items)
            limit = max(limit, limit2, 1)
            n = len(items[0].obs)

            def pad_neighbors(lists):
                arr = np.full((len(items), n, limit), -1, dtype=np.int16)
                for ti, tr in enumerate(items):
                    for ai, nbrs in enumerate(lists(tr)):
                        arr[ti, ai, :len(nbrs)] = nbrs
                return arr

            buffer_arrays = [
                ("buf.obs", np.stack([tr.obs for tr in items])),
                ("buf.next_obs", np.stack([tr.next_obs for tr in items])),
                ("buf.actions", np.stack([tr.actions for tr in items])),
                ("buf.rewards", np.stack([tr.rewards for tr in items])),
                ("buf.terminals", np.stack([tr.terminals for tr in items])),
                ("buf.active", np.stack([tr.active for tr in items])),
                ("buf.neighbors", pad_neighbors(lambda tr: tr.neighbors)),
                ("buf.next_neighbors", pad_neighbors(lambda tr: tr.next_neighbors)),
            ]

    payload = io.BytesIO()
    for name, raw in sections:
        header["sections"].append({"name": name, "size": len(raw)})
        payload.write(raw)
    for name, arr in arrays + buffer_arrays:
        arr = np.asarray(arr)
        meta, raw = _blob(arr)
        meta["name"] = name
        meta["size"] = len(raw)
        header["arrays"].append(meta)
        payload.write(raw)

    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(raw_header).to_bytes(8, "little"))
        f.write(raw_header)
        f.write(payload.getvalue())


class LoadedCheckpoint:
    def __init__(self, run_config, model_config, params, target_params, adam,
                 episode, rng_states, topology_text, buffer_items, buffer_meta):
        self.run_config = run_config
        self.model_config = model_config
        self.params = params
        self.target_params = target_params
        self.adam = adam
        self.episode = episode
        self.rng_states = rng_states
        self.topology_text = topology_text
        self.buffer_items = buffer_items
        self.buffer_meta = buffer_meta

    def restore_rng(self, name: str) -> np.random.Generator:
        return _restore_rng(self.rng_states[name])


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise StructuralError("not a checkpoint file")
        size = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(size).decode("utf-8"))
        if header["version"] != _VERSION:
            raise StructuralError(f"unsupported checkpoint version {header['version']}")

        sections = {}
        for meta in header["sections"]:
            sections[meta["name"]] = f.read(meta["size"])
        arrays = {}
        for meta in header["arrays"]:
            raw = f.read(meta["size"])
            arrays[meta["name"]] = np.frombuffer(raw, dtype=meta["dtype"]).reshape(
                meta["shape"]).copy()

    run_config = config_from_text(header["run_config"])
    params, model_config = read_params(io.BytesIO(sections["params"]))
    target_params, _ = read_params(io.BytesIO(sections["target"]))

    adam = AdamState(params, header["adam"]["learning_rate"],
                     header["adam"]["beta1"], header["adam"]["beta2"],
                     header["adam"]["eps"])
    adam.t = header["adam"]["t"]
    for name in params.names():
        if f"adam.m.{name}" in arrays:
            adam.m[name] = arrays[f"adam.m.{name}"]
            adam.v[name] = arrays[f"adam.v.{name}"]

    buffer_items = None
    buffer_meta = header.get("buffer")
    if buffer_meta is not None and buffer_meta["count"] > 0:
        count = buffer_meta["count"]
        items = []
        for ti in range(count):
            def unpack(arr):
                return tuple(tuple(int(j) for j in row if j >= 0) for row in arr)
            items.append(Transition(
                arrays["buf.obs"][ti], arrays["buf.actions"][ti],
                arrays["buf.next_obs"][ti], arrays["buf.rewards"][ti],
                arrays["buf.terminals"][ti], arrays["buf.active"][ti],
                unpack(arrays["buf.neighbors"][ti]),
                unpack(arrays["buf.next_neighbors"][ti])))
        buffer_items = items

    return LoadedCheckpoint(run_config, model_config, params, target_params, adam,
                            header["episode"], header["rng_states"],
                            header["topology"], buffer_items, buffer_meta)
