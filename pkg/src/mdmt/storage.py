"""On-disk containers for datasets and model checkpoints.

Both formats share one layout: a text header followed by a raw payload.

The header is a magic line (``MDMT-DATASET`` or ``MDMT-CHECKPOINT``)
followed by one ``key=<json>`` line per field and a closing
``end_header`` line.  ``format_version``, ``payload_bytes``,
``payload_sha256`` and ``header_sha256`` are always present; the last one
hashes every other header line (magic included) in file order.

Dataset payload: for each record in order, the volume as little-endian
float64 (``D*H*W*8`` bytes), then, when ``has_masks`` is true, its mask as
one byte per voxel.  Checkpoint payload: every parameter as little-endian
float64, in the order listed by the ``groups`` header field.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .datagen import DomainDataset, DomainSpec
from .exceptions import ConfigError, FormatError
from .network import ArchConfig, ModelParams, parameter_shapes
from .tensor import Tensor

FORMAT_VERSION = 1
DATASET_MAGIC = b"MDMT-DATASET\n"
CHECKPOINT_MAGIC = b"MDMT-CHECKPOINT\n"
END = b"end_header\n"


def _dump(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _encode(magic: bytes, fields: dict, payload: bytes) -> bytes:
    head = dict(fields)
    head["format_version"] = FORMAT_VERSION
    head["payload_bytes"] = len(payload)
    head["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    lines = [f"{k}={_dump(head[k])}\n".encode() for k in sorted(head)]
    digest = hashlib.sha256(magic + b"".join(lines)).hexdigest()
    lines.append(f"header_sha256={_dump(digest)}\n".encode())
    lines.sort()
    return magic + b"".join(lines) + END + payload


def _decode(blob: bytes, magic: bytes, what: str) -> tuple[dict, bytes]:
    if not blob.startswith(magic):
        raise FormatError(f"not a {what} file (bad magic)")
    end = blob.find(b"\n" + END, len(magic) - 1)
    if end < 0:
        raise FormatError(f"{what} header is truncated")
    head_text = blob[len(magic):end + 1]
    payload = blob[end + 1 + len(END):]
    fields = {}
    hashed = [magic]
    try:
        for line in head_text.decode("utf-8").splitlines():
            if not line.startswith("header_sha256="):
                hashed.append(line.encode("utf-8") + b"\n")
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"malformed {what} header line {line!r}")
            fields[key] = json.loads(value)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable {what} header: {exc}") from exc
    for key in ("format_version", "payload_bytes", "payload_sha256", "header_sha256"):
        if key not in fields:
            raise FormatError(f"{what} header lacks {key!r}")
    if fields["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{what} format version {fields['format_version']} != {FORMAT_VERSION}")
    if hashlib.sha256(b"".join(hashed)).hexdigest() != fields.pop("header_sha256"):
        raise FormatError(f"{what} header checksum mismatch")
    if len(payload) != fields["payload_bytes"]:
        raise FormatError(f"{what} payload is {len(payload)} bytes, header says {fields['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != fields["payload_sha256"]:
        raise FormatError(f"{what} payload checksum mismatch")
    return fields, payload


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- datasets -------------------------------------------------------------

def dataset_bytes(ds: DomainDataset, extra: dict | None = None) -> bytes:
    vols = np.ascontiguousarray(ds.volumes, dtype="<f8")
    parts = []
    for i in range(len(ds)):
        parts.append(vols[i].tobytes())
        if ds.masks is not None:
            parts.append(np.ascontiguousarray(ds.masks[i], dtype=np.uint8).tobytes())
    fields = {
        "domain_id": int(ds.domain_id),
        "shape": [int(s) for s in ds.shape],
        "n_records": len(ds),
        "has_labels": ds.labels is not None,
        "has_masks": ds.masks is not None,
        "patient_ids": [int(p) for p in ds.patient_ids],
        "labels": None if ds.labels is None else [int(y) for y in ds.labels],
        "splits": None if ds.splits is None else [str(s) for s in ds.splits],
        "stats": None if ds.stats is None else [float(v) for v in ds.stats],
        "normalized": bool(ds.normalized),
        "spec": None if ds.spec is None else ds.spec.to_dict(),
        "blobs": ds.blobs,
        "distractors": ds.distractors,
        "extra": extra or {},
    }
    return _encode(DATASET_MAGIC, fields, b"".join(parts))


def write_dataset(ds: DomainDataset, path, extra: dict | None = None) -> None:
    """Write ``ds`` losslessly; ``extra`` is free-form provenance kept in the header."""
    _atomic_write(path, dataset_bytes(ds, extra))


def read_dataset_bytes(blob: bytes) -> tuple[DomainDataset, dict]:
    fields, payload = _decode(blob, DATASET_MAGIC, "dataset")
    try:
        shape = tuple(int(s) for s in fields["shape"])
        n = int(fields["n_records"])
        has_masks = bool(fields["has_masks"])
        V = int(np.prod(shape))
        rec = V * 8 + (V if has_masks else 0)
        if len(payload) != n * rec:
            raise FormatError(f"dataset payload {len(payload)} bytes, expected {n * rec}")
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, rec) if n else np.empty((0, rec), np.uint8)
        volumes = raw[:, :V * 8].copy().view("<f8").astype(np.float64).reshape((n,) + shape)
        masks = raw[:, V * 8:].copy().reshape((n,) + shape) if has_masks else None
        labels = fields["labels"]
        splits = fields["splits"]
        stats = fields["stats"]
        spec = fields["spec"]
        ds = DomainDataset(
            domain_id=int(fields["domain_id"]),
            volumes=volumes,
            patient_ids=np.asarray(fields["patient_ids"], dtype=np.int64),
            labels=None if labels is None else np.asarray(labels, dtype=np.int64),
            masks=masks,
            splits=None if splits is None else np.asarray(splits, dtype=str),
            stats=None if stats is None else (float(stats[0]), float(stats[1])),
            spec=None if spec is None else DomainSpec(**spec),
            blobs=fields["blobs"],
            distractors=fields["distractors"],
            normalized=bool(fields["normalized"]),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise FormatError(f"inconsistent dataset header: {exc}") from exc
    if len(ds.patient_ids) != n or (ds.labels is not None and len(ds.labels) != n) \
            or (ds.splits is not None and len(ds.splits) != n):
        raise FormatError("dataset header arrays disagree with n_records")
    return ds, fields.get("extra", {})


def read_dataset(path) -> DomainDataset:
    return read_dataset_bytes(Path(path).read_bytes())[0]


def read_dataset_extra(path) -> dict:
    return read_dataset_bytes(Path(path).read_bytes())[1]


# -- checkpoints ------------------------------------------------------------

def checkpoint_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    groups = {}
    parts = []
    for gname, group in params.groups().items():
        groups[gname] = [[name, list(t.shape)] for name, t in group.items()]
        parts.extend(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in group.values())
    fields = {"arch": params.arch.to_dict(), "groups": groups, "meta": meta or {}}
    return _encode(CHECKPOINT_MAGIC, fields, b"".join(parts))


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    _atomic_write(path, checkpoint_bytes(params, meta))


def read_checkpoint_bytes(blob: bytes) -> tuple[ModelParams, dict]:
    fields, payload = _decode(blob, CHECKPOINT_MAGIC, "checkpoint")
    try:
        arch = ArchConfig(**fields["arch"])
        expected = parameter_shapes(arch)
        groups = fields["groups"]
        offset = 0
        out = {}
        for gname in ModelParams.GROUPS:
            listed = {name: tuple(shape) for name, shape in groups[gname]}
            if listed != expected[gname]:
                raise FormatError(f"checkpoint group {gname} does not match its arch header")
            group = {}
            for name, shape in groups[gname]:
                nbytes = int(np.prod(shape)) * 8
                chunk = payload[offset:offset + nbytes]
                if len(chunk) != nbytes:
                    raise FormatError("checkpoint payload truncated")
                arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
                group[name] = Tensor(arr, requires_grad=True)
                offset += nbytes
            out[gname] = group
        if offset != len(payload):
            raise FormatError("checkpoint payload has trailing bytes")
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise FormatError(f"inconsistent checkpoint header: {exc}") from exc
    return ModelParams(arch=arch, **out), fields["meta"]


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Return parameters and the metadata dict stored with them."""
    return read_checkpoint_bytes(Path(path).read_bytes())
