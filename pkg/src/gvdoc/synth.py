"""Deterministic synthetic document corpus with in-domain and held-out classes.

Each class is a :class:`LayoutTemplate`: a list of rectangular blocks on the
unit page, each filled with words drawn from class-specific and shared
vocabulary pools. Documents are rendered onto a 1000x1000 pixel page with
jittered block positions and left-to-right word wrapping.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantError
from .ocr import BBox, build_document, serialize_document_json, validate_document

PAGE = 1000.0
DEFAULT_CLASSES = ("letter", "form", "invoice", "memo", "resume")
OOD_CLASS = "news"

COMMON = ("the", "and", "of", "to", "for", "with", "on", "in", "a", "is", "by", "at",
          "this", "that", "be", "are", "as", "from", "or", "all", "2021", "2022", "01",
          "12", "no", "page", "new", "please")

POOLS = {
    "letter": ("dear", "sincerely", "regards", "writing", "letter", "thank", "hope",
               "kindly", "yours", "faithfully", "request", "enclosed", "regarding",
               "appreciate", "opportunity", "respond", "convenience", "forward",
               "hearing", "truly", "personal", "concern", "discussed", "wish"),
    "form": ("name", "address", "phone", "signature", "applicant", "field", "check",
             "box", "required", "office", "use", "only", "birth", "city", "state",
             "zip", "email", "occupation", "number", "section", "complete", "print",
             "initial", "status"),
    "invoice": ("invoice", "total", "amount", "qty", "price", "tax", "due", "subtotal",
                "item", "unit", "payment", "terms", "bill", "ship", "balance", "paid",
                "order", "description", "discount", "net", "usd", "remit", "account",
                "charges"),
    "memo": ("memo", "memorandum", "subject", "re", "cc", "meeting", "staff", "policy",
             "department", "effective", "immediately", "update", "team", "schedule",
             "attached", "review", "internal", "confidential", "action", "agenda",
             "manager", "deadline", "reminder", "notice"),
    "resume": ("experience", "education", "skills", "university", "degree", "managed",
               "developed", "projects", "references", "objective", "bachelor", "intern",
               "led", "proficient", "languages", "certified", "achievements", "employment",
               "gpa", "volunteer", "leadership", "awards", "summary", "coordinated"),
    "news": ("headline", "reported", "minister", "election", "police", "weather",
             "officials", "sources", "council", "sports", "season", "market", "shares",
             "crowd", "festival", "governor", "storm", "vote", "court", "editor",
             "correspondent", "breaking", "residents", "coach"),
}

FORM_LABELS = ("name:", "date:", "address:", "phone:", "email:", "city:", "state:",
               "zip:", "signature:", "status:")


@dataclass(frozen=True)
class Block:
    """A text region: unit-page rectangle, word-count range and word mix.

    ``kind`` is ``"text"`` or ``"pairs"`` (alternating ``label:`` ``value``
    words); ``own_frac`` is the share of words from the class pool, the rest
    come from the shared pool.
    """

    region: tuple
    n_words: tuple
    kind: str = "text"
    own_frac: float = 0.7
    font: float = 1.0


@dataclass(frozen=True)
class LayoutTemplate:
    name: str
    blocks: tuple
    pool: tuple
    jitter: float = 0.02
    common: tuple = COMMON
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.pool or not self.common:
            raise InvariantError(f"template {self.name!r}: vocabulary pools must be non-empty")
        for b in self.blocks:
            x1, y1, x2, y2 = b.region
            if not (0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1):
                raise InvariantError(f"template {self.name!r}: region {b.region} off the page")
            if not 1 <= b.n_words[0] <= b.n_words[1]:
                raise InvariantError(f"template {self.name!r}: bad word range {b.n_words}")


def _rows(y0, n, height, gap, x=(0.08, 0.55), words=(2, 4), kind="text", **kw):
    return tuple(Block((x[0], y0 + i * (height + gap), x[1], y0 + i * (height + gap) + height),
                       words, kind, **kw) for i in range(n))


def _templates():
    t = {}
    t["letter"] = LayoutTemplate("letter", (
        Block((0.08, 0.05, 0.40, 0.16), (5, 8), font=0.9),            # sender header
        Block((0.65, 0.05, 0.92, 0.09), (2, 3)),                      # date
        Block((0.08, 0.20, 0.30, 0.23), (2, 2)),                      # salutation
        Block((0.08, 0.26, 0.92, 0.42), (14, 20)),
        Block((0.08, 0.45, 0.92, 0.60), (12, 18)),
        Block((0.08, 0.63, 0.92, 0.72), (6, 10)),
        Block((0.08, 0.80, 0.35, 0.88), (2, 4)),                      # signature
    ), POOLS["letter"])
    t["form"] = LayoutTemplate("form", (
        Block((0.25, 0.04, 0.75, 0.09), (2, 4), font=1.4),            # title
        *_rows(0.14, 7, 0.045, 0.035, x=(0.06, 0.48), words=(4, 6), kind="pairs"),
        *_rows(0.14, 7, 0.045, 0.035, x=(0.54, 0.95), words=(4, 6), kind="pairs"),
        Block((0.06, 0.86, 0.60, 0.94), (3, 6), font=0.8),
    ), POOLS["form"])
    t["invoice"] = LayoutTemplate("invoice", (
        Block((0.06, 0.04, 0.40, 0.14), (4, 7), font=1.1),
        Block((0.62, 0.04, 0.94, 0.10), (2, 3), font=1.5),
        Block((0.06, 0.20, 0.45, 0.28), (4, 6)),
        *_rows(0.34, 6, 0.035, 0.02, x=(0.06, 0.50), words=(2, 4)),
        *_rows(0.34, 6, 0.035, 0.02, x=(0.62, 0.72), words=(1, 1), own_frac=0.0),
        *_rows(0.34, 6, 0.035, 0.02, x=(0.80, 0.94), words=(1, 1), own_frac=0.3),
        Block((0.62, 0.74, 0.94, 0.80), (2, 3), font=1.2),
    ), POOLS["invoice"])
    t["memo"] = LayoutTemplate("memo", (
        Block((0.08, 0.04, 0.50, 0.10), (1, 2), font=1.8),
        *_rows(0.14, 4, 0.03, 0.015, x=(0.08, 0.70), words=(2, 4)),
        Block((0.08, 0.34, 0.92, 0.55), (18, 26)),
        Block((0.08, 0.58, 0.92, 0.72), (10, 16)),
    ), POOLS["memo"])
    t["resume"] = LayoutTemplate("resume", (
        Block((0.30, 0.03, 0.70, 0.08), (2, 3), font=1.6),
        Block((0.25, 0.09, 0.75, 0.12), (3, 5), font=0.8),
        Block((0.06, 0.17, 0.30, 0.20), (1, 1), font=1.2),
        *_rows(0.22, 3, 0.04, 0.01, x=(0.12, 0.92), words=(4, 7), font=0.9),
        Block((0.06, 0.40, 0.30, 0.43), (1, 1), font=1.2),
        *_rows(0.45, 3, 0.04, 0.01, x=(0.12, 0.92), words=(4, 7), font=0.9),
        Block((0.06, 0.63, 0.30, 0.66), (1, 1), font=1.2),
        *_rows(0.68, 2, 0.04, 0.01, x=(0.12, 0.92), words=(4, 7), font=0.9),
    ), POOLS["resume"])
    t["news"] = LayoutTemplate("news", (
        Block((0.05, 0.03, 0.95, 0.09), (3, 5), font=2.0),            # masthead
        Block((0.05, 0.11, 0.95, 0.16), (5, 8), font=1.3),            # headline
        *(Block((x, y, x + 0.27, y + 0.22), (12, 18), font=0.75, own_frac=0.8)
          for x in (0.05, 0.365, 0.68) for y in (0.20, 0.46)),
    ), POOLS["news"])
    return t


TEMPLATES = _templates()


def _draw_words(block, template, rng):
    n = int(rng.integers(block.n_words[0], block.n_words[1] + 1))
    if block.kind == "pairs":
        words = []
        while len(words) < n:
            words.append(FORM_LABELS[rng.integers(len(FORM_LABELS))])
            words.append(template.pool[rng.integers(len(template.pool))])
        return words[:max(2, n - n % 2)]
    own = rng.random(n) < block.own_frac
    return [template.pool[rng.integers(len(template.pool))] if o
            else template.common[rng.integers(len(template.common))] for o in own]


def _layout_block(words, region, font, rng):
    """Wrap words left to right inside ``region`` (pixels); returns (text, BBox) items."""
    x1, y1, x2, y2 = region
    h = 14.0 * font
    char_w = 7.0 * font
    gap = 5.0 * font
    x, y, items = x1, y1, []
    for w in words:
        width = char_w * len(w) * float(rng.uniform(0.9, 1.1))
        width = min(width, x2 - x1)
        if x + width > x2 and x > x1:
            x, y = x1, y + h * 1.4
        if y + h > y2 + 2 * h:
            break  # overflowing blocks are truncated just below the region
        items.append((w, BBox(round(x, 1), round(y, 1), round(x + width, 1), round(y + h, 1))))
        x += width + gap
    return items


def generate_document(template: LayoutTemplate, rng, doc_id="synth", label=None):
    """Render one document from ``template`` using ``rng`` (a numpy Generator).

    Block order is reading order; each block becomes one paragraph whose box
    is the union of its tokens. Page is 1000x1000 pixels.
    """
    paragraphs = []
    for block in template.blocks:
        dx, dy = rng.uniform(-template.jitter, template.jitter, size=2)
        bx1, by1, bx2, by2 = block.region
        dx = float(np.clip(dx, -bx1, 1 - bx2))
        dy = float(np.clip(dy, -by1, max(0.0, 0.97 - by2)))
        region = ((bx1 + dx) * PAGE, (by1 + dy) * PAGE, (bx2 + dx) * PAGE, (by2 + dy) * PAGE)
        items = _layout_block(_draw_words(block, template, rng), region, block.font, rng)
        items = [(w, BBox(b.x1, b.y1, min(b.x2, PAGE), min(b.y2, PAGE))) for w, b in items]
        if items:
            paragraphs.append((None, items))
    doc = build_document(doc_id, PAGE, PAGE, paragraphs, label=label)
    validate_document(doc)
    return doc


def class_names(n_classes):
    if not 2 <= n_classes <= len(DEFAULT_CLASSES):
        raise InvariantError(f"classes must be in [2, {len(DEFAULT_CLASSES)}], got {n_classes}")
    return list(DEFAULT_CLASSES[:n_classes])


_SPLIT_CODE = {"train": 0, "test": 1, "ood": 2}


def doc_rng(seed, split, class_index, i):
    """Per-document generator derived from ``(seed, split, class, index)``."""
    return np.random.default_rng([seed, _SPLIT_CODE[split], class_index, i])


def generate_documents(n_classes=4, n_train=200, n_test=50, n_ood=200, seed=0):
    """In-memory corpus: ``{"train": [...], "test": [...], "ood": [...]}``.

    ``n_train`` and ``n_test`` are per class; OOD documents carry no label.
    Documents are ordered class by class.
    """
    names = class_names(n_classes)
    out = {"train": [], "test": [], "ood": []}
    for split, n in (("train", n_train), ("test", n_test)):
        for c, name in enumerate(names):
            for i in range(n):
                out[split].append(generate_document(
                    TEMPLATES[name], doc_rng(seed, split, c, i), f"{split}_{name}_{i:05d}", c))
    for i in range(n_ood):
        out["ood"].append(generate_document(TEMPLATES[OOD_CLASS],
                                            doc_rng(seed, "ood", len(DEFAULT_CLASSES), i),
                                            f"ood_{OOD_CLASS}_{i:05d}"))
    return out


def generate_corpus(out_dir, n_classes=4, n_train=200, n_test=50, n_ood=200, seed=0):
    """Write a corpus directory: ``{train,test,ood}/*.json`` plus ``manifest.json``.

    Returns the manifest dict. Split lists hold paths relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    docs = generate_documents(n_classes, n_train, n_test, n_ood, seed)
    manifest = {"classes": class_names(n_classes), "ood_class": OOD_CLASS, "seed": seed,
                "splits": {}}
    for split, items in docs.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        rels = []
        for doc in items:
            rel = f"{split}/{doc.id}.json"
            (out_dir / rel).write_text(serialize_document_json(doc) + "\n")
            rels.append(rel)
        manifest["splits"][split] = rels
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(corpus_dir):
    """Read a corpus directory; returns ``(manifest, {split: [Document, ...]})``."""
    from .ocr import load_document

    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    splits = {split: [load_document(os.path.join(corpus_dir, rel)) for rel in rels]
              for split, rels in manifest["splits"].items()}
    return manifest, splits
