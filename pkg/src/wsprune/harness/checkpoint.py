"""Checkpoints: a JSON manifest plus a raw little-endian float32 blob.

The manifest records the layer graph (so pruned networks round-trip), one
record per tensor with its byte offset, and a SHA-256 of the whole blob.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..archzoo import ArchSpec
from ..nncore import Add, BatchNorm2d, Conv2d, Dense, GlobalAvgPool, MaxPool2d, NetworkGraph, ReLU

FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint_error"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint_version"


class CheckpointTruncatedError(CheckpointError):
    code = "checkpoint_truncated"


class CheckpointChecksumError(CheckpointError):
    code = "checkpoint_checksum"


def _layer_record(layer):
    rec = {"kind": layer.kind, "name": layer.name}
    if layer.kind == "conv":
        rec.update(cin=layer.cin, cout=layer.cout, kernel=layer.kernel, stride=layer.stride,
                   padding=layer.padding, groups=layer.groups)
    elif layer.kind == "bn":
        rec.update(channels=layer.channels, eps=layer.eps, momentum=layer.momentum,
                   prunable=bool(layer.prunable), channel_ids=[int(c) for c in layer.channel_ids])
    elif layer.kind == "maxpool":
        rec.update(size=layer.size)
    elif layer.kind == "dense":
        rec.update(fin=layer.fin, fout=layer.fout)
    return rec


def _make_layer(rec):
    kind, name = rec["kind"], rec["name"]
    if kind == "conv":
        return Conv2d(name, rec["cin"], rec["cout"], rec["kernel"], rec["stride"], rec["padding"], rec["groups"])
    if kind == "bn":
        bn = BatchNorm2d(name, rec["channels"], rec["eps"], rec["momentum"])
        bn.prunable = rec["prunable"]
        bn.channel_ids = np.asarray(rec["channel_ids"], dtype=np.int64)
        return bn
    if kind == "maxpool":
        return MaxPool2d(name, rec["size"])
    if kind == "dense":
        return Dense(name, rec["fin"], rec["fout"])
    if kind == "relu":
        return ReLU(name)
    if kind == "gap":
        return GlobalAvgPool(name)
    if kind == "add":
        return Add(name)
    raise CheckpointError(f"unknown layer kind {kind!r}")


def _paths(path):
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return path, path.with_suffix(".bin")


def save_checkpoint(net, metadata, path):
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for layer in net.layers:
        for store, group in ((layer.params, "param"), (layer.buffers, "buffer")):
            for key, value in store.items():
                data = np.ascontiguousarray(value, dtype="<f4").tobytes()
                records.append({"name": f"{layer.name}.{key}", "group": group, "shape": list(value.shape),
                                "dtype": "float32", "offset": offset, "length": len(data)})
                chunks.append(data)
                offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": net.arch.to_dict() if isinstance(net.arch, ArchSpec) else net.arch,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [_layer_record(layer) for layer in net.layers],
        "inputs": [list(s) for s in net.inputs],
        "tensors": records,
        "metadata": metadata or {},
        "blob": blob_path.name,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def read_manifest(path):
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{manifest_path}: invalid manifest ({err})") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{manifest_path}: format version {version}, expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path, with_metadata=False):
    """Rebuild the network saved by :func:`save_checkpoint`."""
    manifest_path, _ = _paths(path)
    manifest = read_manifest(manifest_path)
    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    if len(blob) < manifest["blob_size"]:
        raise CheckpointTruncatedError(f"{blob_path}: {len(blob)} bytes, expected {manifest['blob_size']}")
    if len(blob) != manifest["blob_size"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointChecksumError(f"{blob_path}: checksum mismatch")
    layers = [_make_layer(rec) for rec in manifest["layers"]]
    by_name = {layer.name: layer for layer in layers}
    seen = set()
    for rec in manifest["tensors"]:
        layer_name, key = rec["name"].rsplit(".", 1)
        end = rec["offset"] + rec["length"]
        if end > len(blob):
            raise CheckpointTruncatedError(f"tensor {rec['name']} extends past the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=rec["length"] // 4, offset=rec["offset"])
        arr = arr.astype(np.float32).reshape(rec["shape"])
        store = by_name[layer_name].params if rec["group"] == "param" else by_name[layer_name].buffers
        if key not in store or store[key].shape != arr.shape:
            raise CheckpointError(f"tensor {rec['name']} does not match the layer graph")
        store[key] = arr
        seen.add(rec["name"])
    expected = {f"{layer.name}.{k}" for layer in layers for k in list(layer.params) + list(layer.buffers)}
    if seen != expected:
        raise CheckpointError(f"missing tensors: {sorted(expected - seen)}")
    arch = manifest.get("arch")
    if isinstance(arch, dict) and "family" in arch:
        arch = ArchSpec.from_dict(arch)
    net = NetworkGraph(layers, manifest["inputs"], manifest["input_shape"], manifest["num_classes"], arch=arch)
    return (net, manifest["metadata"]) if with_metadata else net
