"""OCR ingestion: Tesseract TSV and canonical JSON into a :class:`Document`.

A document is one page. Tokens are kept in OCR reading order and grouped
into paragraphs whose token ranges are contiguous and ascending. Geometry is
in page pixels until :func:`normalize_document` maps it onto the unit square.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import EmptyDocumentError, FormatError, InvariantError, RowError, SchemaError

PAD_ID = 0
MASK_ID = 1
SUP_ID = 2
UNK_ID = 3
N_RESERVED = 4

TSV_COLUMNS = (
    "level", "page_num", "block_num", "par_num", "line_num", "word_num",
    "left", "top", "width", "height", "conf", "text",
)

CONTAINMENT_EPS = 1e-6


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvariantError(f"non-finite bbox {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvariantError(f"bbox has x2 < x1 or y2 < y1: {vals}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def union(cls, boxes: Sequence["BBox"]) -> "BBox":
        return cls(
            min(b.x1 for b in boxes), min(b.y1 for b in boxes),
            max(b.x2 for b in boxes), max(b.y2 for b in boxes),
        )

    def contains(self, other: "BBox", eps: float = 0.0) -> bool:
        return (other.x1 >= self.x1 - eps and other.y1 >= self.y1 - eps
                and other.x2 <= self.x2 + eps and other.y2 <= self.y2 + eps)


@dataclass(frozen=True)
class Token:
    text: str
    bbox: BBox
    para_index: int
    read_index: int
    token_id: int = UNK_ID


@dataclass(frozen=True)
class Paragraph:
    bbox: BBox
    token_range: tuple  # (first_read_index, last_read_index), inclusive


@dataclass(frozen=True)
class Document:
    id: str
    page_width: float
    page_height: float
    paragraphs: tuple
    tokens: tuple
    label: Optional[int] = None
    normalized: bool = False

    def __post_init__(self):
        if not (self.page_width > 0 and self.page_height > 0):
            raise InvariantError(
                f"page dimensions must be positive, got {self.page_width}x{self.page_height}")

    @property
    def n_tokens(self):
        return len(self.tokens)

    def paragraph_tokens(self, p):
        first, last = self.paragraphs[p].token_range
        return self.tokens[first:last + 1]


def build_document(doc_id, page_width, page_height, paragraphs, label=None,
                   normalized=False):
    """Assemble a :class:`Document` from ``[(para_bbox, [(text, bbox), ...]), ...]``.

    ``para_bbox`` may be ``None``, in which case the union of the member token
    boxes is used.
    """
    paras, tokens = [], []
    for p, (pbox, items) in enumerate(paragraphs):
        if not items:
            continue
        first = len(tokens)
        for text, box in items:
            tokens.append(Token(text=text, bbox=box, para_index=len(paras),
                                read_index=len(tokens)))
        boxes = [t.bbox for t in tokens[first:]]
        paras.append(Paragraph(bbox=pbox if pbox is not None else BBox.union(boxes),
                               token_range=(first, len(tokens) - 1)))
    return Document(id=doc_id, page_width=page_width, page_height=page_height,
                    paragraphs=tuple(paras), tokens=tuple(tokens), label=label,
                    normalized=normalized)


def validate_document(doc: Document) -> None:
    """Raise :class:`InvariantError` if any structural invariant is broken."""
    n = len(doc.tokens)
    for i, tok in enumerate(doc.tokens):
        if tok.read_index != i:
            raise InvariantError(f"token {i} has read_index {tok.read_index}")
        if not 0 <= tok.para_index < len(doc.paragraphs):
            raise InvariantError(f"token {i} has para_index {tok.para_index}")
    expected = 0
    for p, para in enumerate(doc.paragraphs):
        first, last = para.token_range
        if first != expected or last < first:
            raise InvariantError(f"paragraph {p} token_range {para.token_range} not contiguous")
        expected = last + 1
        scale = 1.0 if doc.normalized else max(doc.page_width, doc.page_height)
        for tok in doc.tokens[first:last + 1]:
            if tok.para_index != p:
                raise InvariantError(f"token {tok.read_index} outside paragraph {p}")
            if not para.bbox.contains(tok.bbox, CONTAINMENT_EPS * scale):
                raise InvariantError(
                    f"paragraph {p} bbox {para.bbox.as_tuple()} does not contain "
                    f"token {tok.read_index} bbox {tok.bbox.as_tuple()}")
    if expected != n:
        raise InvariantError(f"paragraphs cover {expected} of {n} tokens")


# -- Tesseract TSV ---------------------------------------------------------

def _num(value, line, column):
    try:
        x = float(value)
    except ValueError:
        raise RowError(line, f"non-numeric {column!r}: {value!r}") from None
    if not math.isfinite(x):
        raise RowError(line, f"non-finite {column!r}: {value!r}")
    return x


def parse_tesseract_tsv(tsv_text: str, doc_id: str = "tsv", label=None) -> Document:
    """Parse Tesseract's 12-column TSV output for a single page.

    Word rows (level 5) with non-empty text and ``conf != -1`` become tokens.
    Paragraph identity is ``(block_num, par_num)`` in order of first
    appearance. Paragraph boxes come from level-3 rows when present, else the
    union of member token boxes.

    Raises:
        FormatError: malformed header.
        RowError: a geometry field is not numeric.
        EmptyDocumentError: no word rows.
    """
    lines = tsv_text.splitlines()
    if not lines or tuple(c.strip() for c in lines[0].split("\t")) != TSV_COLUMNS:
        raise FormatError("malformed Tesseract TSV header")

    page_dims = None
    para_boxes = {}
    groups = {}  # (block, par) -> [(text, bbox)], insertion-ordered
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cols = raw.split("\t")
        if len(cols) < 11:
            raise RowError(lineno, f"expected 12 columns, got {len(cols)}")
        text = cols[11] if len(cols) > 11 else ""
        level = int(_num(cols[0], lineno, "level"))
        block = int(_num(cols[2], lineno, "block_num"))
        par = int(_num(cols[3], lineno, "par_num"))
        left, top, width, height = (
            _num(cols[i], lineno, TSV_COLUMNS[i]) for i in range(6, 10))
        conf = _num(cols[10], lineno, "conf")
        if width < 0 or height < 0:
            raise RowError(lineno, "negative width/height")
        box = BBox(left, top, left + width, top + height)
        if level == 1:
            page_dims = (left + width, top + height)
        elif level == 3:
            para_boxes[(block, par)] = box
        elif level == 5:
            text = text.strip()
            if not text or conf == -1:
                continue
            groups.setdefault((block, par), []).append((text, box))

    if not groups:
        raise EmptyDocumentError("TSV contains no word tokens")
    if page_dims is None or page_dims[0] <= 0 or page_dims[1] <= 0:
        boxes = [b for items in groups.values() for _, b in items]
        page_dims = (max(b.x2 for b in boxes), max(b.y2 for b in boxes))
    paragraphs = [(para_boxes.get(key), items) for key, items in groups.items()]
    return build_document(doc_id, page_dims[0], page_dims[1], paragraphs, label=label)


# -- canonical JSON ----------------------------------------------------------

def _require(obj, key, path, kinds, what):
    if not isinstance(obj, dict):
        raise SchemaError(path or "/", "expected an object")
    if key not in obj:
        raise SchemaError(f"{path}/{key}", "missing required field")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise SchemaError(f"{path}/{key}", f"expected {what}")
    return value


def _parse_bbox(value, path):
    if (not isinstance(value, list) or len(value) != 4
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value)):
        raise SchemaError(path, "expected [x1, y1, x2, y2] numbers")
    try:
        return BBox(*(float(v) for v in value))
    except InvariantError as exc:
        raise InvariantError(f"{path}: {exc}") from None


def document_from_dict(obj) -> Document:
    doc_id = _require(obj, "id", "", str, "a string")
    width = _require(obj, "page_width", "", (int, float), "a number")
    height = _require(obj, "page_height", "", (int, float), "a number")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise SchemaError("/label", "expected an integer or null")
    normalized = obj.get("normalized", False)
    if not isinstance(normalized, bool):
        raise SchemaError("/normalized", "expected a boolean")
    paras = _require(obj, "paragraphs", "", list, "an array")
    parsed = []
    for p, para in enumerate(paras):
        ppath = f"/paragraphs/{p}"
        pbox = _parse_bbox(_require(para, "bbox", ppath, list, "an array"), ppath + "/bbox")
        toks = _require(para, "tokens", ppath, list, "an array")
        if not toks:
            raise SchemaError(ppath + "/tokens", "paragraph must contain at least one token")
        items = []
        for t, tok in enumerate(toks):
            tpath = f"{ppath}/tokens/{t}"
            text = _require(tok, "text", tpath, str, "a string")
            items.append((text, _parse_bbox(_require(tok, "bbox", tpath, list, "an array"),
                                            tpath + "/bbox")))
        parsed.append((pbox, items))
    if width <= 0:
        raise SchemaError("/page_width", "must be positive")
    if height <= 0:
        raise SchemaError("/page_height", "must be positive")
    doc = build_document(doc_id, float(width), float(height), parsed, label=label,
                         normalized=normalized)
    validate_document(doc)
    return doc


def parse_document_json(json_text: str) -> Document:
    """Parse the canonical document JSON; errors carry a JSON-pointer path."""
    try:
        obj = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from None
    return document_from_dict(obj)


def _num_out(x):
    return int(x) if float(x).is_integer() else x


def document_to_dict(doc: Document) -> dict:
    out = {
        "id": doc.id,
        "page_width": _num_out(doc.page_width),
        "page_height": _num_out(doc.page_height),
        "label": doc.label,
        "paragraphs": [
            {
                "bbox": [_num_out(v) for v in para.bbox.as_tuple()],
                "tokens": [{"text": t.text, "bbox": [_num_out(v) for v in t.bbox.as_tuple()]}
                           for t in doc.paragraph_tokens(p)],
            }
            for p, para in enumerate(doc.paragraphs)
        ],
    }
    if doc.normalized:
        out["normalized"] = True
    return out


def serialize_document_json(doc: Document) -> str:
    return json.dumps(document_to_dict(doc), ensure_ascii=False, separators=(",", ":"))


def load_document(path) -> Document:
    return parse_document_json(Path(path).read_text(encoding="utf-8"))


# -- normalization, truncation, tokenization ---------------------------------

def _clamp01(x):
    return min(1.0, max(0.0, x))


def normalize_document(doc: Document) -> Document:
    """Map all boxes onto the unit page; a no-op for already-normalized docs."""
    if doc.normalized:
        return doc
    w, h = doc.page_width, doc.page_height

    def norm(b):
        return BBox(_clamp01(b.x1 / w), _clamp01(b.y1 / h), _clamp01(b.x2 / w), _clamp01(b.y2 / h))

    return replace(
        doc,
        paragraphs=tuple(replace(p, bbox=norm(p.bbox)) for p in doc.paragraphs),
        tokens=tuple(replace(t, bbox=norm(t.bbox)) for t in doc.tokens),
        normalized=True,
    )


def truncate_document(doc: Document, max_tokens: int = 512) -> Document:
    """Keep the first ``max_tokens`` tokens in reading order."""
    if len(doc.tokens) <= max_tokens:
        return doc
    tokens = doc.tokens[:max_tokens]
    paras = []
    for para in doc.paragraphs:
        first, last = para.token_range
        if first >= max_tokens:
            break
        paras.append(replace(para, token_range=(first, min(last, max_tokens - 1))))
    return replace(doc, tokens=tokens, paragraphs=tuple(paras))


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def text_key(text: str) -> str:
    """Lowercase and strip surrounding punctuation; pure punctuation is kept."""
    low = text.strip().lower()
    return low.strip(string.punctuation) or low


@dataclass(frozen=True)
class Vocab:
    """Hashing vocabulary with reserved ids PAD=0, MASK=1, SUP=2, UNK=3.

    With an explicit ``table`` (text key -> id) unknown keys map to UNK;
    otherwise keys are hashed with FNV-1a 64 into ``[4, size)``.
    """

    size: int = 8192
    table: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if self.size <= N_RESERVED:
            raise InvariantError(f"vocab size must exceed {N_RESERVED}, got {self.size}")
        if self.table is not None:
            bad = [k for k, v in self.table.items() if not N_RESERVED <= v < self.size]
            if bad:
                raise InvariantError(f"vocab table ids out of range for keys {bad[:5]}")

    def lookup(self, text: str) -> int:
        key = text_key(text)
        if self.table is not None:
            return self.table.get(key, UNK_ID)
        return N_RESERVED + fnv1a_64(key) % (self.size - N_RESERVED)

    @classmethod
    def from_file(cls, path, size=None):
        """One token per line; line ``i`` gets id ``4 + i``."""
        words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
        table = {text_key(w): N_RESERVED + i for i, w in enumerate(w for w in words if w)}
        return cls(size=size or N_RESERVED + len(table), table=table)


def tokenize(doc: Document, vocab: Vocab) -> Document:
    return replace(doc, tokens=tuple(replace(t, token_id=vocab.lookup(t.text))
                                     for t in doc.tokens))


def prepare_document(doc: Document, vocab: Vocab, max_tokens: int = 512) -> Document:
    """Truncate, normalize and tokenize: the form graph construction expects."""
    if not doc.tokens:
        raise EmptyDocumentError(f"document {doc.id!r} has no tokens")
    return tokenize(normalize_document(truncate_document(doc, max_tokens)), vocab)
