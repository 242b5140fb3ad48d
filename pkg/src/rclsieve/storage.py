"""Dataset/corpus JSONL files, binary checkpoints, run manifests and record files.

Dataset file: a header record ``{"type": "header", "format": "rclsieve-dataset",
"version": 1, "mode": "vector"|"text", "dim": int|null}`` followed by one
record per query ``{"query_id", "query", "positive_id", "negative_ids"}``
(optionally ``"relevant_ids"``). Corpus file: the same header with
``"format": "rclsieve-corpus"`` followed by ``{"passage_id", "passage"}``.

Checkpoint layout (little-endian)::

    magic   8s   b"RCLSCKPT"
    version u32
    sim     u8   0 = dot, 1 = cosine
    tied    u8
    feature_dim u32, embed_dim u32
    scale   f64
    query matrix, then passage matrix unless tied: f32 row-major
    checksum u64 = first 8 bytes of blake2b over everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable

import numpy as np

from rclsieve import __version__
from rclsieve.data import Dataset, DatasetError, Example
from rclsieve.model import EncoderParams

DATASET_FORMAT = "rclsieve-dataset"
CORPUS_FORMAT = "rclsieve-corpus"
FILE_VERSION = 1

CHECKPOINT_MAGIC = b"RCLSCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIBBIId")
_SIM_CODES = {"dot": 0, "cosine": 1}


class CheckpointError(ValueError):
    pass


@contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": "\n"})) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(path, records: Iterable[dict]) -> None:
    with atomic_write(path) as f:
        for rec in records:
            f.write(_dumps(rec) + "\n")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _encode_item(item, mode):
    return item if mode == "text" else [float(x) for x in item]


def _header(fmt: str, mode: str, dim) -> dict:
    return {"type": "header", "format": fmt, "version": FILE_VERSION, "mode": mode, "dim": dim}


def save_dataset(dataset: Dataset, path, corpus_path=None) -> None:
    """Write the query records to ``path`` and, if given, the corpus to ``corpus_path``."""
    dim = dataset.feature_dim if dataset.mode == "vector" else None
    recs = [_header(DATASET_FORMAT, dataset.mode, dim)]
    for ex in dataset.examples:
        rec = {
            "query_id": ex.query_id,
            "query": _encode_item(ex.query, dataset.mode),
            "positive_id": ex.positive_id,
            "negative_ids": list(ex.negative_ids),
        }
        if ex.relevant_ids is not None:
            rec["relevant_ids"] = list(ex.relevant_ids)
        recs.append(rec)
    write_records(path, recs)
    if corpus_path is not None:
        save_corpus(dataset.corpus, dataset.mode, corpus_path)


def save_corpus(corpus: dict, mode: str, path) -> None:
    dim = None
    if mode == "vector" and corpus:
        dim = int(np.asarray(next(iter(corpus.values()))).shape[0])
    recs = [_header(CORPUS_FORMAT, mode, dim)]
    recs += [{"passage_id": pid, "passage": _encode_item(v, mode)} for pid, v in corpus.items()]
    write_records(path, recs)


def _read_jsonl(path, fmt: str):
    with open(path, encoding="utf-8") as f:
        lines = [(i, line) for i, line in enumerate(f, start=1) if line.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty file, expected a header record", 1)
    parsed = []
    for lineno, line in lines:
        try:
            parsed.append((lineno, json.loads(line)))
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: malformed JSON ({e.msg})", lineno) from None
    lineno, header = parsed[0]
    if header.get("type") != "header" or header.get("format") != fmt:
        raise DatasetError(f"{path}: expected a {fmt} header record", lineno)
    if header.get("version") != FILE_VERSION:
        raise DatasetError(f"{path}: unsupported version {header.get('version')} (expected {FILE_VERSION})", lineno)
    mode = header.get("mode")
    if mode not in ("vector", "text"):
        raise DatasetError(f"{path}: unknown mode {mode!r}", lineno)
    dim = header.get("dim")
    if mode == "vector" and not (isinstance(dim, int) and dim >= 1):
        raise DatasetError(f"{path}: vector mode needs a positive integer dim", lineno)
    return mode, dim, parsed[1:]


def _decode_item(value, mode, dim, lineno, what):
    if mode == "text":
        if not isinstance(value, str):
            raise DatasetError(f"{what} must be text in text mode", lineno)
        return value
    if not isinstance(value, list) or any(isinstance(x, (str, bool)) or x is None for x in value):
        raise DatasetError(f"{what} must be a list of numbers in vector mode", lineno)
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (dim,):
        raise DatasetError(f"{what} has length {arr.size}, header declares dim {dim}", lineno)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{what} has non-finite entries", lineno)
    return arr


def load_corpus(path) -> tuple[dict, str]:
    mode, dim, recs = _read_jsonl(path, CORPUS_FORMAT)
    corpus = {}
    for lineno, rec in recs:
        pid = rec.get("passage_id")
        if not isinstance(pid, str) or "passage" not in rec:
            raise DatasetError("corpus record needs passage_id (string) and passage", lineno)
        if pid in corpus:
            raise DatasetError(f"duplicate passage_id {pid!r}", lineno)
        corpus[pid] = _decode_item(rec["passage"], mode, dim, lineno, f"passage {pid!r}")
    return corpus, mode


def load_dataset(path, corpus_path) -> Dataset:
    """Load and validate a dataset against its corpus; errors carry the offending line number."""
    corpus, corpus_mode = load_corpus(corpus_path)
    mode, dim, recs = _read_jsonl(path, DATASET_FORMAT)
    if mode != corpus_mode:
        raise DatasetError(f"dataset mode {mode!r} differs from corpus mode {corpus_mode!r}", 1)
    if mode == "vector" and corpus:
        cdim = next(iter(corpus.values())).shape[0]
        if cdim != dim:
            raise DatasetError(f"dataset dim {dim} differs from corpus dim {cdim}", 1)
    examples = []
    seen = set()
    for lineno, rec in recs:
        for key in ("query_id", "query", "positive_id", "negative_ids"):
            if key not in rec:
                raise DatasetError(f"missing field {key!r}", lineno)
        qid = rec["query_id"]
        if qid in seen:
            raise DatasetError(f"duplicate query_id {qid!r}", lineno)
        seen.add(qid)
        negs = rec["negative_ids"]
        rel = rec.get("relevant_ids")
        if not isinstance(negs, list) or (rel is not None and not isinstance(rel, list)):
            raise DatasetError("negative_ids and relevant_ids must be lists", lineno)
        for pid in [rec["positive_id"], *negs, *(rel or [])]:
            if pid not in corpus:
                raise DatasetError(f"unknown passage_id {pid!r}", lineno)
        if len(set(negs)) != len(negs):
            raise DatasetError(f"duplicate negative ids for query {qid!r}", lineno)
        query = _decode_item(rec["query"], mode, dim, lineno, f"query {qid!r}")
        examples.append(Example(qid, query, rec["positive_id"], list(negs), list(rel) if rel is not None else None))
    return Dataset(examples, corpus, mode)


def save_checkpoint(params: EncoderParams, path) -> None:
    q = np.ascontiguousarray(params.query_matrix, dtype="<f4")
    body = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _SIM_CODES[params.sim_kind], int(params.tied),
                        params.feature_dim, params.embed_dim, float(params.scale))
    body += q.tobytes()
    if not params.tied:
        body += np.ascontiguousarray(params.passage_matrix, dtype="<f4").tobytes()
    checksum = hashlib.blake2b(body, digest_size=8).digest()
    with atomic_write(path, "wb") as f:
        f.write(body + checksum)


def load_checkpoint(path) -> EncoderParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, sim, tied, fdim, edim, scale = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    n = fdim * edim
    expected = _HEADER.size + 4 * n * (1 if tied else 2)
    if len(body) != expected:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    kinds = {v: k for k, v in _SIM_CODES.items()}
    if sim not in kinds:
        raise CheckpointError(f"{path}: unknown similarity code {sim}")
    mats = np.frombuffer(body, dtype="<f4", offset=_HEADER.size).reshape(-1, edim, fdim)
    q = mats[0].astype(np.float64)
    p = q if tied else mats[1].astype(np.float64)
    return EncoderParams(q, p, tied=bool(tied), sim_kind=kinds[sim], scale=scale)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, argv: list[str], config: dict, seed, inputs: Iterable, outputs: Iterable,
                   started: float) -> dict:
    manifest = {
        "tool": "rclsieve",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {str(p): file_digest(p) for p in outputs if p is not None and Path(p).is_file()},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    with atomic_write(path) as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
