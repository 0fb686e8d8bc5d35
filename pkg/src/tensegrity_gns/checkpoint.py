"""Model checkpoint persistence.

Single-file format: a fixed magic, a little-endian uint64 header
length, a JSON header (model and graph configs, frozen normalizer
statistics, the parameter manifest, and a training summary), then the
raw float64 little-endian parameter payload in manifest order. Exact
binary storage makes save/load/predict bit-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .gnn import ModelConfig, TensegrityGNN
from .graphgen import FeatureNormalizer, GraphConfig
from .topology import RobotTopology

MAGIC = b"TGNS"
FORMAT_VERSION = 1


def save_checkpoint(path, model: TensegrityGNN, graph_config: GraphConfig,
                    training_summary: dict | None = None) -> None:
    names = model.store.names()
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "graph_config": graph_config.to_dict(),
        "normalizer": (graph_config.normalizer.to_dict()
                       if graph_config.normalizer is not None
                       and graph_config.normalizer.frozen else None),
        "integration_dt": model.integration_dt,
        "params": [{"name": n, "shape": list(model.store.params[n].shape)}
                   for n in names],
        "training_summary": training_summary,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(
                model.store.params[name].values, dtype="<f8").tobytes())


def _read_header(fh) -> dict:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
    version, = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header_len, = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(header_len).decode("utf-8"))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_checkpoint(path, topology: RobotTopology
                    ) -> tuple[TensegrityGNN, GraphConfig]:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        graph_config = GraphConfig(**header["graph_config"])
        if header["normalizer"] is not None:
            graph_config.normalizer = FeatureNormalizer.from_dict(
                header["normalizer"])
        model = TensegrityGNN(ModelConfig.from_dict(header["model_config"]),
                              graph_config, topology,
                              integration_dt=header.get("integration_dt", 0.01))
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            model.store.params[entry["name"]].values[...] = data.reshape(shape)
    return model, graph_config
