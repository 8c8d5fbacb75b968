import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_doc, synth_doc
from gvdoc.errors import EmptyDocumentError, SchemaError
from gvdoc.graph import (EDGE_DIM, KIND_CODE, GraphConfig, beta_skeleton_edges,
                         beta_skeleton_edges_bruteforce, build_graph, edge_features,
                         graph_to_dict, paragraph_knn_edges, paragraph_link_edges,
                         parse_graph, serialize_graph, super_node_edges)
from gvdoc.ocr import BBox, build_document, normalize_document


def oracle_admitted(boxes):
    """Independent clamp-based circle/rectangle test over all pairs."""
    n = len(boxes)
    cen = [((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for b in boxes]
    out = set()
    for a in range(n):
        for b in range(a + 1, n):
            mx, my = (cen[a][0] + cen[b][0]) / 2, (cen[a][1] + cen[b][1]) / 2
            r = math.dist(cen[a], cen[b]) / 2
            blocked = False
            for c in range(n):
                if c in (a, b):
                    continue
                x1, y1, x2, y2 = boxes[c]
                qx, qy = min(max(mx, x1), x2), min(max(my, y1), y2)
                if (qx - mx) ** 2 + (qy - my) ** 2 <= r * r:
                    blocked = True
                    break
            if not blocked:
                out.add((a, b))
    return out, cen


def oracle_beta(boxes, cap):
    admitted, cen = oracle_admitted(boxes)
    keep = {}
    for a in range(len(boxes)):
        partners = [b for e in admitted for b in e if a in e and b != a]
        partners.sort(key=lambda b: (math.dist(cen[a], cen[b]), b))
        keep[a] = set(partners[:cap])
    return sorted((a, b) for a, b in admitted if b in keep[a] and a in keep[b])


unit_boxes = st.lists(
    st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(0, 8), st.integers(0, 3))
    .map(lambda t: (t[0] / 50, t[1] / 50, (t[0] + t[2]) / 50, (t[1] + t[3]) / 50)),
    min_size=0, max_size=28)


def test_two_boxes_one_edge():
    assert beta_skeleton_edges([(0, 0, 0.1, 0.1), (0.5, 0.5, 0.6, 0.6)]) == [(0, 1)]


def test_blocking_example():
    doc = normalize_document(build_document("b", 50, 10, [(None, [
        ("a", BBox(0, 0, 10, 10)), ("b", BBox(20, 0, 30, 10)), ("c", BBox(40, 0, 50, 10))])]))
    boxes = [t.bbox for t in doc.tokens]
    assert beta_skeleton_edges(boxes) == [(0, 1), (1, 2)]
    assert beta_skeleton_edges_bruteforce(boxes) == [(0, 1), (1, 2)]


def test_line_of_thirty_respects_cap():
    boxes = [(i / 30, 0.5, (i + 0.5) / 30, 0.52) for i in range(30)]
    edges = beta_skeleton_edges(boxes, 25)
    deg = np.bincount(np.array(edges).ravel(), minlength=30)
    assert deg.max() <= 25


@given(unit_boxes, st.sampled_from([2, 3, 25]))
def test_grid_search_matches_oracle(boxes, cap):
    assert beta_skeleton_edges(boxes, cap) == oracle_beta(boxes, cap)


@given(unit_boxes)
def test_degree_cap_and_symmetric_output(boxes):
    edges = beta_skeleton_edges(boxes, 3)
    assert all(a < b for a, b in edges)
    if edges:
        assert np.bincount(np.array(edges).ravel()).max() <= 3


@given(unit_boxes, st.tuples(st.integers(0, 45), st.integers(0, 45)))
def test_adding_a_box_only_blocks(boxes, corner):
    x, y = corner[0] / 50, corner[1] / 50
    before = set(beta_skeleton_edges(boxes, 10_000))
    after = set(beta_skeleton_edges(boxes + [(x, y, x + 0.05, y + 0.02)], 10_000))
    n = len(boxes)
    assert {e for e in after if e[1] < n} <= before


def test_paragraph_knn_examples():
    doc = make_doc([[(f"w{i}", (i * 5, 0, i * 5 + 4, 4)) for i in range(12)]])
    knn = lambda k: {v for u, v in paragraph_knn_edges(doc, k) if u == 5}  # noqa: E731
    assert knn(4) == {4, 6, 3, 7}
    assert knn(3) == {4, 6, 3}
    small = make_doc([[("a", (0, 0, 4, 4)), ("b", (5, 0, 9, 4)), ("c", (10, 0, 14, 4))]])
    assert set(paragraph_knn_edges(small, 10)) == {(u, v) for u in range(3) for v in range(3)
                                                   if u != v}


def _five_five():
    return make_doc([[(f"a{i}", (i * 8, 0, i * 8 + 6, 5)) for i in range(5)],
                     [(f"b{i}", (i * 8, 20, i * 8 + 6, 25)) for i in range(5)]])


def test_paragraph_links_and_super_edges():
    doc = _five_five()
    assert paragraph_link_edges(doc) == [(4, 5)]
    assert super_node_edges(doc) == [(0, 1), (0, 5), (0, 6), (0, 10)]
    assert paragraph_link_edges(make_doc([[("x", (0, 0, 5, 5))]])) == []
    three = make_doc([[("x", (0, 0, 5, 5))], [("y", (0, 10, 5, 15))], [("z", (0, 20, 5, 25))]])
    assert len(paragraph_link_edges(three)) == 2
    assert super_node_edges(make_doc([[("x", (0, 0, 5, 5))]])) == [(0, 1)]


def test_edge_features_identical_full_page():
    f = edge_features((0, 0, 1, 1), (0, 0, 1, 1))
    r2 = math.sqrt(2)
    # corner order TL, TR, BL, BR; i corner major
    expected = [0, 1, 1, r2, 1, 0, r2, 1, 1, r2, 0, 1, r2, 1, 1, 0, 0, 0, 0, 0, 0]
    assert np.allclose(f, expected, atol=1e-12, rtol=0)


def test_edge_features_side_by_side_example():
    a, b = (0, 0, 0.2, 0.2), (0.4, 0, 0.6, 0.2)
    f = edge_features(a, b)
    assert len(f) == EDGE_DIM
    assert f[16] == pytest.approx(0.4) and f[17] == pytest.approx(0.4) and f[18] == 0
    assert f[19:] == pytest.approx([0, 0], abs=1e-12)
    assert f[1 * 4 + 0] == pytest.approx(0.2)  # TR(a) - TL(b)


box = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(
    lambda t: (min(t[0], t[2]), min(t[1], t[3]), max(t[0], t[2]), max(t[1], t[3])))


@given(box, box)
def test_reverse_edge_features(a, b):
    f, g = edge_features(a, b), edge_features(b, a)
    assert np.isfinite(f).all() and len(f) == 21
    assert np.array_equal(f[:16].reshape(4, 4), g[:16].reshape(4, 4).T)
    assert np.array_equal(f[16:19], g[16:19])
    assert np.array_equal(f[19:], -g[19:])
    assert (np.abs(f[19:]) <= 1).all()


def test_one_token_graph():
    g = build_graph(make_doc([[("x", (0, 0, 5, 5))]]))
    assert g.n_nodes == 2
    assert g.edge_set() == {(0, 1), (1, 0), (0, 0), (1, 1)}
    assert g.bboxes[0].tolist() == [0, 0, 1, 1] and g.token_ids[0] == 2
    no_self = build_graph(make_doc([[("x", (0, 0, 5, 5))]]), GraphConfig(add_self_loops=False))
    assert no_self.edge_set() == {(0, 1), (1, 0)}


def test_three_token_paragraph_graph():
    doc = make_doc([[("a", (0, 0, 5, 5)), ("b", (10, 0, 15, 5)), ("c", (20, 0, 25, 5))]])
    g = build_graph(doc, GraphConfig(mode="both"))
    beta = {(a + 1, b + 1) for a, b in beta_skeleton_edges([t.bbox for t in doc.tokens])}
    complete = {(u, v) for u in (1, 2, 3) for v in (1, 2, 3) if u < v}
    token = {(u, v) for u, v in g.edge_set() if u and v and u < v}
    assert token == beta | complete
    assert {v for u, v in g.edge_set(["SUPER"]) if u == 0} == {1, 3}
    kinds = dict(zip(zip(g.src.tolist(), g.dst.tolist()), g.kinds.tolist()))
    assert kinds[(1, 2)] == KIND_CODE["BETA"] and kinds[(1, 3)] == KIND_CODE["PARA_KNN"]


def test_defaults():
    cfg = GraphConfig()
    assert (cfg.beta, cfg.max_beta_neighbors, cfg.para_k_test) == (1.0, 25, 10)
    assert cfg.para_k_train_range == (2, 10)


def test_empty_document_rejected():
    doc = build_document("e", 10, 10, [])
    with pytest.raises(EmptyDocumentError):
        build_graph(normalize_document(doc))


@pytest.mark.parametrize("seed", range(4))
def test_graph_invariants_on_synthetic_docs(seed):
    name = ["letter", "form", "invoice", "news"][seed]
    doc = synth_doc(name, seed)
    rng = np.random.default_rng(seed)
    g = build_graph(doc, GraphConfig(seed=seed), rng=rng, train=True)
    edges = list(zip(g.src.tolist(), g.dst.tolist()))
    assert len(set(zip(edges, g.kinds.tolist()))) == len(edges)
    lookup = dict(zip(edges, range(len(edges))))
    for (u, v), e in lookup.items():
        r = lookup[(v, u)]
        assert g.kinds[e] == g.kinds[r]
        assert np.array_equal(g.features[e, 16:19], g.features[r, 16:19])
        assert np.array_equal(g.features[e, 19:], -g.features[r, 19:])
    assert (g.kinds[g.src == g.dst] == KIND_CODE["SELF"]).all()
    para = {r + 1: t.para_index for r, t in enumerate(doc.tokens)}
    for u, v in g.edge_set(["PARA_KNN"]):
        assert para[u] == para[v]
    for u, v in g.edge_set(["PARA_LINK"]):
        assert abs(para[u] - para[v]) == 1
    for p in doc.paragraphs:
        assert {(0, p.token_range[0] + 1), (0, p.token_range[1] + 1)} <= g.edge_set()
    deg = np.bincount(np.array([u for u, v in g.edge_set(["BETA"])]), minlength=g.n_nodes)
    assert deg.max() <= 25
    assert build_graph(doc, GraphConfig(seed=seed), rng=np.random.default_rng(seed),
                       train=True) == g


def test_union_of_modes():
    doc = synth_doc("form", 3)
    sets = {}
    for mode in ("beta", "paragraph", "both"):
        g = build_graph(doc, GraphConfig(mode=mode), rng=np.random.default_rng(7), train=True)
        sets[mode] = {(u, v) for u, v in g.edge_set() if u and v and u != v}
    assert sets["both"] == sets["beta"] | sets["paragraph"]


def test_graph_json_round_trip_and_errors(tiny_graph):
    text = serialize_graph(tiny_graph)
    assert parse_graph(text) == tiny_graph
    assert serialize_graph(parse_graph(text)) == text
    obj = graph_to_dict(tiny_graph)
    obj["edges"][3]["features"] = obj["edges"][3]["features"][:20]
    with pytest.raises(SchemaError) as err:
        parse_graph(json.dumps(obj))
    assert err.value.path == "/edges/3/features"


def test_build_is_byte_deterministic():
    doc = synth_doc("memo", 5)
    texts = [serialize_graph(build_graph(doc, GraphConfig(seed=4), train=True)) for _ in range(2)]
    assert texts[0] == texts[1]
