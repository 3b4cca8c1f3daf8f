"""Documents, regions and the three-level page decomposition.

A page is split into one global region, ``m`` coarse regions laid out on a
``rows x cols`` grid, and ``k`` fine patches inside every coarse region.
Region order is fixed (global, coarse row-major, fine row-major nested in
each coarse region) so embedding files can be addressed by position.

Image pages are cropped on the 2-D grid. Text pages are sliced by character
range: the same grid cells are read as consecutive horizontal bands.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from mara.errors import DuplicateId, InvalidConfig, ParseError, UnresolvablePayload

PAYLOAD_KINDS = ("image", "text")
LEVELS = ("global", "coarse", "fine")
_BBOX_EPS = 1e-9


@dataclass(frozen=True)
class DecompositionConfig:
    coarse_grid: tuple[int, int] = (2, 2)
    fine_grid: tuple[int, int] = (2, 2)

    def __post_init__(self):
        for name in ("coarse_grid", "fine_grid"):
            grid = tuple(getattr(self, name))
            if len(grid) != 2 or any(int(v) != v for v in grid):
                raise InvalidConfig(f"{name} must be a pair of integers, got {grid!r}")
            if min(grid) < 1:
                raise InvalidConfig(f"{name} dimensions must be positive, got {grid!r}")
            object.__setattr__(self, name, (int(grid[0]), int(grid[1])))

    @property
    def m(self) -> int:
        return self.coarse_grid[0] * self.coarse_grid[1]

    @property
    def k(self) -> int:
        return self.fine_grid[0] * self.fine_grid[1]

    @property
    def region_count(self) -> int:
        return 1 + self.m + self.m * self.k

    @classmethod
    def parse(cls, coarse: str, fine: str) -> "DecompositionConfig":
        """Build from ``"RxC"`` strings as used on the command line."""
        return cls(_parse_grid(coarse, "coarse"), _parse_grid(fine, "fine"))

    def to_dict(self) -> dict:
        return {"coarse_grid": list(self.coarse_grid), "fine_grid": list(self.fine_grid)}


def _parse_grid(text: str, name: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        rows, cols = (int(p) for p in parts)
    except ValueError:
        raise InvalidConfig(f"{name} grid must look like RxC, got {text!r}") from None
    return rows, cols


@dataclass(frozen=True)
class Region:
    doc_id: str
    level: str
    bbox: tuple[float, float, float, float]
    payload_ref: str
    coarse_index: int | None = None
    fine_index: int | None = None

    def to_dict(self) -> dict:
        d = {"doc_id": self.doc_id, "level": self.level, "bbox": list(self.bbox),
             "payload_ref": self.payload_ref}
        if self.coarse_index is not None:
            d["coarse_index"] = self.coarse_index
        if self.fine_index is not None:
            d["fine_index"] = self.fine_index
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Region":
        bbox = d.get("bbox", (0.0, 0.0, 1.0, 1.0))
        if len(bbox) != 4:
            raise ValueError(f"bbox must have 4 entries, got {bbox!r}")
        level = d["level"]
        if level not in LEVELS:
            raise ValueError(f"unknown region level {level!r}")
        return cls(
            doc_id=str(d["doc_id"]),
            level=level,
            bbox=tuple(float(v) for v in bbox),
            payload_ref=str(d.get("payload_ref", "")),
            coarse_index=d.get("coarse_index"),
            fine_index=d.get("fine_index"),
        )


@dataclass(frozen=True)
class Document:
    id: str
    source_uri: str
    payload_kind: str = "text"
    metadata: Mapping[str, str] = field(default_factory=dict)
    regions: tuple[Region, ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("document id must be non-empty")
        if self.payload_kind not in PAYLOAD_KINDS:
            raise ValueError(f"payload_kind must be one of {PAYLOAD_KINDS}, got {self.payload_kind!r}")

    def path(self) -> Path:
        return Path(self.source_uri)

    def read_text(self) -> str:
        try:
            return self.path().read_text(encoding="utf-8")
        except OSError as exc:
            raise UnresolvablePayload(f"{self.id}: cannot read {self.source_uri}: {exc}") from exc

    def to_dict(self) -> dict:
        d = {"id": self.id, "source_uri": self.source_uri, "payload_kind": self.payload_kind}
        if self.metadata:
            d["metadata"] = dict(self.metadata)
        if self.regions is not None:
            d["regions"] = [r.to_dict() for r in self.regions]
        return d


class Corpus:
    """Ordered, immutable collection of documents with unique ids."""

    def __init__(self, documents: Sequence[Document] = ()):
        docs = tuple(documents)
        by_id = {}
        for doc in docs:
            if doc.id in by_id:
                raise DuplicateId(doc.id)
            by_id[doc.id] = doc
        self._docs = docs
        self._by_id = by_id

    def __len__(self):
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __getitem__(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def __contains__(self, doc_id):
        return doc_id in self._by_id

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self._docs]


# -- decomposition -----------------------------------------------------------

def _grid_cells(rows: int, cols: int):
    for r in range(rows):
        for c in range(cols):
            yield r, c


def _image_ref(uri, bbox):
    return f"{uri}#bbox={bbox[0]!r},{bbox[1]!r},{bbox[2]!r},{bbox[3]!r}"


def _text_ref(uri, start, stop):
    return f"{uri}#chars={start}-{stop}"


def decompose(document: Document, config: DecompositionConfig) -> list[Region]:
    """Split a document into ``1 + m + m*k`` regions.

    Documents that carry pre-supplied regions (from an external segmenter)
    are returned as given after the payload check.
    """
    if not isinstance(config, DecompositionConfig):
        raise InvalidConfig("config must be a DecompositionConfig")
    uri = document.source_uri
    if not document.path().is_file():
        raise UnresolvablePayload(f"{document.id}: cannot resolve {uri}")
    if document.regions is not None:
        return list(document.regions)

    cr, cc = config.coarse_grid
    fr, fc = config.fine_grid
    m, k = config.m, config.k
    doc_id = document.id

    if document.payload_kind == "image":
        regions = [Region(doc_id, "global", (0.0, 0.0, 1.0, 1.0), _image_ref(uri, (0.0, 0.0, 1.0, 1.0)))]
        coarse_cells = list(_grid_cells(cr, cc))
        for i, (r, c) in enumerate(coarse_cells):
            bbox = (c / cc, r / cr, (c + 1) / cc, (r + 1) / cr)
            regions.append(Region(doc_id, "coarse", bbox, _image_ref(uri, bbox), coarse_index=i))
        # fine cells are addressed on the global fine lattice so that
        # boundaries coincide exactly with their parent's edges
        rows, cols = cr * fr, cc * fc
        for i, (r, c) in enumerate(coarse_cells):
            for l, (fr_i, fc_i) in enumerate(_grid_cells(fr, fc)):
                gr, gc = r * fr + fr_i, c * fc + fc_i
                bbox = (gc / cols, gr / rows, (gc + 1) / cols, (gr + 1) / rows)
                regions.append(Region(doc_id, "fine", bbox, _image_ref(uri, bbox),
                                      coarse_index=i, fine_index=l))
        return regions

    n = len(document.read_text())
    regions = [Region(doc_id, "global", (0.0, 0.0, 1.0, 1.0), _text_ref(uri, 0, n))]
    for i in range(m):
        bbox = (0.0, i / m, 1.0, (i + 1) / m)
        regions.append(Region(doc_id, "coarse", bbox, _text_ref(uri, n * i // m, n * (i + 1) // m),
                              coarse_index=i))
    total = m * k
    for i in range(m):
        for l in range(k):
            j = i * k + l
            bbox = (0.0, j / total, 1.0, (j + 1) / total)
            regions.append(Region(doc_id, "fine", bbox,
                                  _text_ref(uri, n * j // total, n * (j + 1) // total),
                                  coarse_index=i, fine_index=l))
    return regions


def read_payload(ref: str, _cache: dict | None = None) -> str | bytes:
    """Resolve a payload ref: a text slice, or PNG bytes of an image crop."""
    uri, _, frag = ref.partition("#")
    cache = {} if _cache is None else _cache
    try:
        if frag.startswith("chars="):
            if uri not in cache:
                cache[uri] = Path(uri).read_text(encoding="utf-8")
            start, stop = (int(v) for v in frag[len("chars="):].split("-"))
            return cache[uri][start:stop]
        if frag.startswith("bbox=") or not frag:
            from PIL import Image

            if uri not in cache:
                with Image.open(uri) as img:
                    img.load()
                    cache[uri] = img.convert("RGB")
            img = cache[uri]
            x0, y0, x1, y1 = (float(v) for v in frag[len("bbox="):].split(",")) if frag else (0.0, 0.0, 1.0, 1.0)
            w, h = img.size
            left, top = round(x0 * w), round(y0 * h)
            box = (left, top, max(round(x1 * w), left + 1), max(round(y1 * h), top + 1))
            buf = io.BytesIO()
            img.crop(box).save(buf, format="PNG")
            return buf.getvalue()
    except (OSError, ValueError) as exc:
        raise UnresolvablePayload(f"cannot read {ref}: {exc}") from exc
    raise UnresolvablePayload(f"unrecognised payload ref {ref!r}")


def read_region(region: Region, _cache: dict | None = None) -> str | bytes:
    try:
        return read_payload(region.payload_ref, _cache)
    except UnresolvablePayload as exc:
        raise UnresolvablePayload(f"{region.doc_id}: {exc}") from exc


def _contains(outer, inner):
    return (inner[0] >= outer[0] - _BBOX_EPS and inner[1] >= outer[1] - _BBOX_EPS
            and inner[2] <= outer[2] + _BBOX_EPS and inner[3] <= outer[3] + _BBOX_EPS)


def validate_hierarchy(regions: Sequence[Region], config: DecompositionConfig) -> list[str]:
    """List structural violations; an empty list means the hierarchy is well formed."""
    problems = []
    m, k = config.m, config.k
    globals_ = [r for r in regions if r.level == "global"]
    coarse = [r for r in regions if r.level == "coarse"]
    fine = [r for r in regions if r.level == "fine"]

    if not globals_:
        problems.append("missing global")
    elif len(globals_) > 1:
        problems.append(f"expected 1 global region, found {len(globals_)}")
    elif tuple(globals_[0].bbox) != (0.0, 0.0, 1.0, 1.0):
        problems.append(f"global bbox {globals_[0].bbox} is not the full page")
    if len(coarse) != m:
        problems.append(f"expected {m} coarse regions, found {len(coarse)}")
    if len(fine) != m * k:
        problems.append(f"expected {m * k} fine regions, found {len(fine)}")
    if len(regions) != 1 + m + m * k:
        problems.append(f"expected {1 + m + m * k} regions in total, found {len(regions)}")

    parents = {}
    for r in coarse:
        if r.coarse_index is None:
            problems.append("coarse region without coarse_index")
            continue
        if r.coarse_index in parents:
            problems.append(f"duplicate coarse region {r.coarse_index}")
        parents[r.coarse_index] = r
    seen = set()
    for r in fine:
        key = (r.coarse_index, r.fine_index)
        if r.coarse_index is None or r.fine_index is None:
            problems.append("fine region without coarse_index/fine_index")
            continue
        if key in seen:
            problems.append(f"duplicate fine region {key}")
        seen.add(key)
        parent = parents.get(r.coarse_index)
        if parent is None:
            problems.append(f"fine region {key} has no parent coarse region {r.coarse_index}")
        elif not _contains(parent.bbox, r.bbox):
            problems.append(f"fine region {key} bbox {r.bbox} not contained in parent bbox {parent.bbox}")
    for r in regions:
        if any(v < -_BBOX_EPS or v > 1 + _BBOX_EPS for v in r.bbox) or r.bbox[0] > r.bbox[2] or r.bbox[1] > r.bbox[3]:
            problems.append(f"{r.level} region of {r.doc_id} has invalid bbox {r.bbox}")
    return problems


# -- manifests ---------------------------------------------------------------

def _document_from_record(rec, base: Path, line_no: int) -> Document:
    if not isinstance(rec, dict):
        raise ParseError("record must be a JSON object", line_no)
    for key in ("id", "source_uri", "payload_kind"):
        if key not in rec:
            raise ParseError(f"missing field {key!r}", line_no)
    unknown = set(rec) - {"id", "source_uri", "payload_kind", "metadata", "regions"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", line_no)
    metadata = rec.get("metadata") or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ParseError("metadata must map strings to strings", line_no)
    uri = str(rec["source_uri"])
    path = Path(uri)
    if not path.is_absolute():
        uri = str((base / path).resolve())
    regions = None
    try:
        if rec.get("regions") is not None:
            regions = tuple(Region.from_dict({"doc_id": rec["id"], **r}) for r in rec["regions"])
        return Document(str(rec["id"]), uri, rec["payload_kind"], dict(metadata), regions)
    except (ValueError, TypeError, KeyError) as exc:
        raise ParseError(str(exc), line_no) from exc


def load_manifest(path) -> Corpus:
    """Read a line-delimited JSON manifest. Relative URIs resolve against its directory."""
    path = Path(path)
    base = path.parent
    docs = []
    seen = set()
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            doc = _document_from_record(rec, base, line_no)
            if doc.id in seen:
                raise DuplicateId(doc.id)
            seen.add(doc.id)
            docs.append(doc)
    return Corpus(docs)


CORPUS_FILE = "corpus.jsonl"
DECOMPOSITION_FILE = "decomposition.json"


def write_corpus_dir(corpus: Corpus, config: DecompositionConfig, out_dir) -> Path:
    """Decompose every document and write the result as a corpus directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / CORPUS_FILE).open("w", encoding="utf-8") as fh:
        for doc in corpus:
            regions = decompose(doc, config)
            problems = validate_hierarchy(regions, config)
            if problems:
                raise InvalidConfig(f"{doc.id}: " + "; ".join(problems))
            rec = doc.to_dict()
            rec["regions"] = [{k: v for k, v in r.to_dict().items() if k != "doc_id"} for r in regions]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    (out / DECOMPOSITION_FILE).write_text(json.dumps(config.to_dict()) + "\n", encoding="utf-8")
    return out


def load_corpus_dir(path) -> tuple[Corpus, DecompositionConfig]:
    path = Path(path)
    cfg = json.loads((path / DECOMPOSITION_FILE).read_text(encoding="utf-8"))
    config = DecompositionConfig(tuple(cfg["coarse_grid"]), tuple(cfg["fine_grid"]))
    return load_manifest(path / CORPUS_FILE), config
