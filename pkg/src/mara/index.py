"""Offline hierarchical embedding index and its binary file format.

File layout (all integers little-endian u32, floats little-endian f32)::

    b"MARAIDX1"
    dim, m, k, doc_count
    embedder_id_len, embedder_id (UTF-8)
    timestamp_len, build_timestamp (UTF-8, ISO 8601)
    doc_count x [id_len, id (UTF-8), (1 + m + m*k) * dim floats]
    crc32 of every preceding byte

Floats of one record are in canonical region order: global, coarse
row-major, fine row-major within each coarse region.
"""
from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from mara.corpus import Corpus, DecompositionConfig, decompose, read_region, validate_hierarchy
from mara.errors import (
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    EmbeddingFailed,
    IndexFormatError,
    InvalidConfig,
    InvalidInput,
    Truncated,
)

MAGIC = b"MARAIDX1"
_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<IIII")


@dataclass(eq=False)
class HierarchicalEmbeddings:
    doc_id: str
    global_vec: np.ndarray          # (dim,)
    coarse: np.ndarray              # (m, dim)
    fine: np.ndarray                # (m, k, dim)

    def __post_init__(self):
        self.global_vec = np.asarray(self.global_vec, dtype=np.float32)
        self.coarse = np.asarray(self.coarse, dtype=np.float32)
        self.fine = np.asarray(self.fine, dtype=np.float32)
        dim = self.global_vec.shape[0]
        if self.global_vec.ndim != 1:
            raise DimensionMismatch("global vector must be 1-D")
        if self.coarse.ndim != 2 or self.coarse.shape[1] != dim:
            raise DimensionMismatch(f"{self.doc_id}: coarse block has shape {self.coarse.shape}, dim {dim}")
        if self.fine.ndim != 3 or self.fine.shape[0] != self.coarse.shape[0] or self.fine.shape[2] != dim:
            raise DimensionMismatch(f"{self.doc_id}: fine block has shape {self.fine.shape}")
        for arr in (self.global_vec, self.coarse, self.fine):
            arr.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.global_vec.shape[0]

    @property
    def m(self) -> int:
        return self.coarse.shape[0]

    @property
    def k(self) -> int:
        return self.fine.shape[1]

    def all_vectors(self) -> np.ndarray:
        """Every region vector stacked in canonical order, shape (1+m+m*k, dim)."""
        return np.concatenate([self.global_vec[None, :], self.coarse,
                               self.fine.reshape(-1, self.dim)])

    def __eq__(self, other):
        if not isinstance(other, HierarchicalEmbeddings):
            return NotImplemented
        return (self.doc_id == other.doc_id
                and self.coarse.shape == other.coarse.shape
                and self.fine.shape == other.fine.shape
                and self.all_vectors().tobytes() == other.all_vectors().tobytes())


@dataclass(eq=True)
class EmbeddingIndex:
    dim: int
    m: int
    k: int
    entries: tuple[HierarchicalEmbeddings, ...]
    embedder_id: str = ""
    built_at: str = field(default="")

    def __post_init__(self):
        self.entries = tuple(self.entries)
        seen = set()
        for e in self.entries:
            if e.doc_id in seen:
                raise InvalidInput(f"duplicate doc id {e.doc_id!r} in index")
            seen.add(e.doc_id)
            if (e.dim, e.m, e.k) != (self.dim, self.m, self.k):
                raise DimensionMismatch(
                    f"{e.doc_id}: shape (dim={e.dim}, m={e.m}, k={e.k}) does not match index "
                    f"(dim={self.dim}, m={self.m}, k={self.k})")

    def __len__(self):
        return len(self.entries)

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def get(self, doc_id: str) -> HierarchicalEmbeddings:
        for e in self.entries:
            if e.doc_id == doc_id:
                return e
        raise KeyError(doc_id)


def scan(index: EmbeddingIndex) -> Iterator[HierarchicalEmbeddings]:
    return iter(index.entries)


def _now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def _region_slot(region, m, k):
    if region.level == "global":
        return 0
    if region.level == "coarse":
        return 1 + region.coarse_index
    return 1 + m + region.coarse_index * k + region.fine_index


def build_index(corpus: Corpus, config: DecompositionConfig, embedder,
                max_inflight: int | None = None) -> EmbeddingIndex:
    """Embed every region of every document; exactly ``(1+m+m*k) * len(corpus)`` embed calls."""
    if len(corpus) == 0:
        raise InvalidInput("cannot build an index over an empty corpus")
    m, k = config.m, config.k
    n_regions = config.region_count
    if max_inflight is None:
        provider_cfg = getattr(embedder, "config", None)
        max_inflight = getattr(provider_cfg, "max_inflight", 1)

    def embed_one(region, content):
        try:
            return np.asarray(embedder.embed(content), dtype=np.float32)
        except Exception as exc:
            position = None if region.level == "global" else (
                region.coarse_index if region.level == "coarse" else (region.coarse_index, region.fine_index))
            raise EmbeddingFailed(region.doc_id, region.level, position, exc) from exc

    entries = []
    dim = None
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
        for doc in corpus:
            regions = decompose(doc, config)
            problems = validate_hierarchy(regions, config)
            if problems:
                raise InvalidConfig(f"{doc.id}: " + "; ".join(problems))
            cache: dict = {}
            contents = [read_region(r, cache) for r in regions]
            futures = [pool.submit(embed_one, r, c) for r, c in zip(regions, contents)]
            slots: list = [None] * n_regions
            for region, fut in zip(regions, futures):
                slots[_region_slot(region, m, k)] = fut.result()
            for region, vec in zip(regions, slots):
                if dim is None:
                    dim = vec.shape[0]
                if vec.shape != (dim,):
                    raise DimensionMismatch(f"{doc.id}: embedder returned shape {vec.shape}, expected ({dim},)")
            stacked = np.stack(slots)
            entries.append(HierarchicalEmbeddings(
                doc.id, stacked[0], stacked[1:1 + m], stacked[1 + m:].reshape(m, k, dim)))
    return EmbeddingIndex(dim, m, k, tuple(entries), getattr(embedder, "id", type(embedder).__name__), _now())


# -- persistence -------------------------------------------------------------

def to_bytes(index: EmbeddingIndex) -> bytes:
    parts = [MAGIC, _HEADER.pack(index.dim, index.m, index.k, len(index.entries))]
    for text in (index.embedder_id, index.built_at):
        raw = text.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw]
    for e in index.entries:
        raw = e.doc_id.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, e.all_vectors().astype("<f4").tobytes()]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def persist(index: EmbeddingIndex, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(index))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise Truncated(f"file ends inside {what} (need {end} bytes, have {len(self.data)})")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what: str) -> str:
        raw = self.take(self.u32(what + " length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"{what} is not valid UTF-8") from exc


def from_bytes(data: bytes) -> EmbeddingIndex:
    if data[:len(MAGIC)] != MAGIC[:len(data)] or (len(data) >= len(MAGIC) and data[:len(MAGIC)] != MAGIC):
        raise BadMagic(f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    r = _Reader(data, 0)
    r.take(len(MAGIC), "magic")
    dim, m, k, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if dim == 0 or m == 0 or k == 0:
        raise IndexFormatError(f"invalid header dims dim={dim} m={m} k={k}")
    embedder_id = r.text("embedder id")
    built_at = r.text("build timestamp")
    n_regions = 1 + m + m * k
    rec_floats = n_regions * dim
    entries = []
    for i in range(count):
        doc_id = r.text(f"record {i} id")
        vecs = np.frombuffer(r.take(rec_floats * 4, f"record {i} vectors"), dtype="<f4")
        vecs = vecs.astype(np.float32).reshape(n_regions, dim)
        entries.append(HierarchicalEmbeddings(doc_id, vecs[0], vecs[1:1 + m], vecs[1 + m:].reshape(m, k, dim)))
    body_end = r.pos
    stored = r.u32("checksum")
    if r.pos != len(data):
        raise IndexFormatError(f"{len(data) - r.pos} unexpected trailing bytes after checksum")
    actual = zlib.crc32(data[:body_end])
    if stored != actual:
        raise ChecksumMismatch(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")
    return EmbeddingIndex(dim, m, k, tuple(entries), embedder_id, built_at)


def load(path) -> EmbeddingIndex:
    return from_bytes(Path(path).read_bytes())


def from_arrays(doc_ids: Sequence[str], global_vecs, coarse, fine, embedder_id="arrays") -> EmbeddingIndex:
    """Assemble an index from stacked arrays of shape (N,dim), (N,m,dim), (N,m,k,dim)."""
    global_vecs = np.asarray(global_vecs, dtype=np.float32)
    coarse = np.asarray(coarse, dtype=np.float32)
    fine = np.asarray(fine, dtype=np.float32)
    entries = tuple(HierarchicalEmbeddings(d, g, c, f) for d, g, c, f in zip(doc_ids, global_vecs, coarse, fine))
    if not entries:
        raise InvalidInput("cannot build an index with no documents")
    e = entries[0]
    return EmbeddingIndex(e.dim, e.m, e.k, entries, embedder_id, _now())
