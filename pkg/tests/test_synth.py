import json

import numpy as np
import pytest

from gvdoc.errors import InvariantError
from gvdoc.ocr import serialize_document_json
from gvdoc.synth import (DEFAULT_CLASSES, OOD_CLASS, PAGE, TEMPLATES, Block, LayoutTemplate,
                         doc_rng, generate_corpus, generate_document, generate_documents,
                         load_corpus)


def test_generation_is_deterministic():
    a = generate_document(TEMPLATES["invoice"], doc_rng(3, "train", 2, 7), "x", 2)
    b = generate_document(TEMPLATES["invoice"], doc_rng(3, "train", 2, 7), "x", 2)
    assert serialize_document_json(a) == serialize_document_json(b)
    c = generate_document(TEMPLATES["invoice"], doc_rng(4, "train", 2, 7), "x", 2)
    assert serialize_document_json(a) != serialize_document_json(c)


@pytest.mark.parametrize("name", list(DEFAULT_CLASSES) + [OOD_CLASS])
def test_documents_are_well_formed(name):
    for i in range(5):
        doc = generate_document(TEMPLATES[name], doc_rng(0, "test", 0, i))
        assert doc.page_width == doc.page_height == PAGE and doc.n_tokens > 10
        for para in doc.paragraphs:
            first, last = para.token_range
            boxes = np.array([[t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2]
                              for t in doc.tokens[first:last + 1]])
            assert (boxes[:, :2] >= 0).all() and (boxes[:, 2:] <= PAGE).all()
            assert (boxes[:, 2:] >= boxes[:, :2]).all()
            union = (boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())
            assert (para.bbox.x1, para.bbox.y1, para.bbox.x2, para.bbox.y2) == \
                pytest.approx(union)


def test_form_has_label_value_pairs():
    doc = generate_document(TEMPLATES["form"], doc_rng(0, "train", 1, 0))
    words = [t.text for t in doc.tokens]
    assert sum(w.endswith(":") for w in words) >= 4


def test_template_validation():
    with pytest.raises(InvariantError, match="off the page"):
        LayoutTemplate("x", blocks=(Block((0.5, 0.1, 0.2, 0.3), (1, 2)),), pool=("a",))
    with pytest.raises(InvariantError, match="word range"):
        LayoutTemplate("x", blocks=(Block((0.1, 0.1, 0.2, 0.3), (3, 2)),), pool=("a",))
    with pytest.raises(InvariantError, match="non-empty"):
        LayoutTemplate("x", blocks=(), pool=())


def test_corpus_counts_and_labels(tmp_path):
    manifest = generate_corpus(tmp_path, n_classes=3, n_train=2, n_test=1, n_ood=4, seed=1)
    assert manifest["classes"] == list(DEFAULT_CLASSES[:3])
    assert manifest["ood_class"] == OOD_CLASS
    assert {k: len(v) for k, v in manifest["splits"].items()} == {"train": 6, "test": 3, "ood": 4}
    loaded, docs = load_corpus(tmp_path)
    assert loaded == json.loads((tmp_path / "manifest.json").read_text())
    assert sorted(d.label for d in docs["train"]) == [0, 0, 1, 1, 2, 2]
    assert all(d.label is None for d in docs["ood"])
    with pytest.raises(InvariantError):
        generate_documents(n_classes=1)


def test_seeds_change_content_not_shape():
    a = generate_documents(2, 2, 1, 2, seed=0)
    b = generate_documents(2, 2, 1, 2, seed=1)
    assert [d.id for d in a["train"]] == [d.id for d in b["train"]]
    for x, y in zip(a["train"], b["train"]):
        assert serialize_document_json(x) != serialize_document_json(y)
