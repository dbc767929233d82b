"""Versioned binary container for model parameters and cached datasets.

Layout, all little-endian:

    bytes 0..8    magic b"CTRLAB\\x00\\x01"
    bytes 8..12   format version, uint32
    bytes 12..20  header length H, uint64
    bytes 20..20+H  UTF-8 JSON header
    then          raw array bytes, concatenated in header order

The JSON header carries a ``kind`` tag ("model" or "dataset"), an echo of
the relevant config, and a manifest of arrays (name, dtype string, shape,
byte offset relative to the end of the header). Arrays are written as
C-contiguous little-endian buffers, so files are byte-identical across
platforms for the same content.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import BinaryIO

import numpy as np

from .data import Dataset
from .errors import ParseError
from .model import ModelConfig, ModelParams

MAGIC = b"CTRLAB\x00\x01"
FORMAT_VERSION = 1


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<")


def _write_container(fh: BinaryIO, kind: str, meta: dict,
                     arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest = []
    offset = 0
    buffers = []
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype=_le_dtype(arr)).tobytes()
        manifest.append({"name": name, "dtype": str(arr.dtype.newbyteorder("=")),
                         "shape": list(arr.shape), "offset": offset})
        offset += len(buf)
        buffers.append(buf)
    header = dict(meta)
    header["kind"] = kind
    header["arrays"] = manifest
    hbytes = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(np.uint32(FORMAT_VERSION).tobytes())
    fh.write(np.uint64(len(hbytes)).tobytes())
    fh.write(hbytes)
    for buf in buffers:
        fh.write(buf)


def _read_container(path: str, expect_kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"{path}: not a ctrlab checkpoint (bad magic)")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported format version {version}")
        hlen = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: corrupt header ({exc})") from exc
        if header.get("kind") != expect_kind:
            raise ParseError(
                f"{path}: contains {header.get('kind')!r}, expected {expect_kind!r}")
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(body):
            raise ParseError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(body[start:end], dtype=dt).reshape(shape)
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return header, arrays


def save_checkpoint(path: str, config: ModelConfig, params: ModelParams) -> None:
    meta = {"model_config": dataclasses.asdict(config)}
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        _write_container(fh, "model", meta, params.named_arrays())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelConfig, ModelParams]:
    header, arrays = _read_container(path, "model")
    cfg_dict = header["model_config"]
    cfg_dict["hash_buckets"] = tuple(cfg_dict["hash_buckets"])
    cfg_dict["hidden_sizes"] = tuple(cfg_dict["hidden_sizes"])
    config = ModelConfig(**cfg_dict)
    embeddings = [arrays[f"emb{f}"] for f in range(len(config.hash_buckets))]
    n_hidden = len(config.hidden_sizes)
    params = ModelParams(
        embeddings=embeddings,
        hidden_w=[arrays[f"w{i}"] for i in range(n_hidden)],
        hidden_b=[arrays[f"b{i}"] for i in range(n_hidden)],
        out_w=arrays["out_w"],
        out_b=arrays["out_b"],
    )
    return config, params


def save_dataset_cache(path: str, dataset: Dataset) -> None:
    meta = {
        "cat_fields": list(dataset.cat_fields),
        "num_fields": list(dataset.num_fields),
        "has_true_pctr": dataset.true_pctr is not None,
    }
    arrays = [
        ("cat_tokens", dataset.cat_tokens),
        ("num_values", dataset.num_values),
        ("labels", dataset.labels),
        ("base_weight", dataset.base_weight),
        ("split", dataset.split),
        ("num_mean", dataset.num_mean),
        ("num_std", dataset.num_std),
    ]
    if dataset.true_pctr is not None:
        arrays.append(("true_pctr", dataset.true_pctr))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        _write_container(fh, "dataset", meta, arrays)
    os.replace(tmp, path)


def load_dataset_cache(path: str) -> Dataset:
    header, arrays = _read_container(path, "dataset")
    return Dataset(
        cat_tokens=arrays["cat_tokens"],
        num_values=arrays["num_values"],
        labels=arrays["labels"],
        base_weight=arrays["base_weight"],
        split=arrays["split"],
        true_pctr=arrays.get("true_pctr"),
        num_mean=arrays["num_mean"],
        num_std=arrays["num_std"],
        cat_fields=tuple(header["cat_fields"]),
        num_fields=tuple(header["num_fields"]),
    )
