import numpy as np
import pytest
from hypothesis import settings

from gvdoc.graph import GraphConfig, build_graph
from gvdoc.ocr import BBox, Vocab, build_document, prepare_document
from gvdoc.synth import TEMPLATES, generate_document

settings.register_profile("gvdoc", deadline=None, max_examples=60)
settings.load_profile("gvdoc")


def make_doc(paragraphs, w=100, h=100, label=None, vocab_size=64):
    """``paragraphs``: list of lists of (text, (x1, y1, x2, y2)) in page pixels."""
    doc = build_document("t", w, h, [(None, [(t, BBox(*b)) for t, b in p]) for p in paragraphs],
                         label=label)
    return prepare_document(doc, Vocab(size=vocab_size))


def synth_doc(name="letter", seed=0, vocab_size=8192, label=None):
    doc = generate_document(TEMPLATES[name], np.random.default_rng(seed), f"{name}{seed}", label)
    return prepare_document(doc, Vocab(size=vocab_size))


@pytest.fixture
def tiny_doc():
    return make_doc([[("total", (10, 10, 30, 20)), ("due", (35, 10, 50, 20))],
                     [("paid", (12, 60, 40, 72))]], label=1)


@pytest.fixture
def tiny_graph(tiny_doc):
    return build_graph(tiny_doc, GraphConfig())


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(
            f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
