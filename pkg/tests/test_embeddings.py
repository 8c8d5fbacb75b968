import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gvdoc import autograd as ag
from gvdoc.embeddings import (FUSION_WEIGHTS, PARA_BOX_TABLES, TOKEN_BOX_TABLES,
                              fusion_neighborhood, fuse, layout_embed, position_ids,
                              quantize_bbox, text_embed)
from gvdoc.errors import InvariantError, ShapeError


def nodes(token_ids, read_index, type_ids, bboxes=None, para=None):
    n = len(token_ids)
    bboxes = np.zeros((n, 4)) if bboxes is None else np.asarray(bboxes, float)
    return SimpleNamespace(token_ids=np.asarray(token_ids), read_index=np.asarray(read_index),
                           type_ids=np.asarray(type_ids), bboxes=bboxes,
                           para_bboxes=bboxes if para is None else np.asarray(para, float))


def text_tables(rng, v=10, d=4, max_pos=6):
    return {"emb.token": rng.normal(size=(v, d)), "emb.type": rng.normal(size=(2, d)),
            "emb.pos": rng.normal(size=(max_pos + 1, d))}


def layout_tables(rng, bins=10, d=4):
    p = {k: rng.normal(size=(bins + 1, d)) for k in TOKEN_BOX_TABLES + PARA_BOX_TABLES}
    p["layout.w"] = rng.normal(size=(2 * d, d))
    p["layout.b"] = rng.normal(size=d)
    return p


def test_text_embed_hand_sum():
    rng = np.random.default_rng(0)
    p = text_tables(rng)
    nd = nodes([2, 7], [0, 0], [1, 0])
    out = text_embed(nd, p).data
    assert np.allclose(out[0], p["emb.token"][2] + p["emb.type"][1] + p["emb.pos"][0])
    assert np.allclose(out[1], p["emb.token"][7] + p["emb.type"][0] + p["emb.pos"][1])


def test_text_embed_zero_and_one_hot():
    p = {"emb.token": np.eye(4), "emb.type": np.zeros((2, 4)), "emb.pos": np.zeros((5, 4))}
    nd = nodes([1, 3], [0, 1], [0, 0])
    assert np.array_equal(text_embed(nd, p).data, np.eye(4)[[1, 3]])
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    assert not text_embed(nd, zero).data.any()
    with pytest.raises(InvariantError):
        text_embed(nodes([9], [0], [0]), p)


def test_position_ids_cap_and_super_node():
    assert position_ids([0, 0, 5, 900], [1, 0, 0, 0], 512).tolist() == [0, 1, 6, 512]


def test_quantize_examples():
    assert quantize_bbox([0, 0, 1, 1]).tolist() == [0, 0, 1000, 1000]
    assert quantize_bbox([0.1234, 0.5, 0.9999, 1.0000001]).tolist() == [123, 500, 999, 1000]


def test_layout_embed_zero_identity_and_matmul_oracle():
    rng = np.random.default_rng(1)
    p = layout_tables(rng, bins=10, d=2)
    boxes = np.array([[0.0, 0.0, 1.0, 1.0], [0.15, 0.31, 0.47, 0.52]])
    para = np.array([[0.0, 0.0, 1.0, 1.0], [0.1, 0.3, 0.9, 0.6]])
    nd = nodes([2, 4], [0, 0], [1, 0], boxes, para)
    q, qp = np.floor(boxes * 10).astype(int), np.floor(para * 10).astype(int)
    e_tl = sum(p[TOKEN_BOX_TABLES[c]][q[:, c]] for c in range(4))
    e_pl = sum(p[PARA_BOX_TABLES[c]][qp[:, c]] for c in range(4))
    expected = np.hstack([e_tl, e_pl]) @ p["layout.w"] + p["layout.b"]
    assert np.allclose(layout_embed(nd, p).data, expected, atol=1e-12)
    p["layout.w"] = np.vstack([np.eye(2), np.zeros((2, 2))])
    p["layout.b"] = np.zeros(2)
    assert np.allclose(layout_embed(nd, p).data, e_tl, atol=1e-12)
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    assert not layout_embed(nd, zero).data.any()


def test_tables_are_linear():
    rng = np.random.default_rng(2)
    p = {**text_tables(rng), **layout_tables(rng)}
    p["layout.b"] = np.zeros(4)
    nd = nodes([1, 5, 9], [0, 0, 3], [1, 0, 0], rng.random((3, 4)), rng.random((3, 4)))
    scaled = {k: 3.0 * v for k, v in p.items()}
    assert np.allclose(text_embed(nd, scaled).data, 3 * text_embed(nd, p).data)
    # layout scales by c**2 when both tables and projection are scaled; scale tables only
    tables_only = {k: (v if k == "layout.w" else 3.0 * v) for k, v in p.items()}
    assert np.allclose(layout_embed(nd, tables_only).data, 3 * layout_embed(nd, p).data)


# -- fusion --------------------------------------------------------------------

def fusion_params(rng, d):
    return {k: rng.normal(size=(d, d)) for k in FUSION_WEIGHTS}


def literal_fuse(e_t, e_l, nbrs, p, heads, normalize):
    """Direct per-node, per-head evaluation of the cross-attention formulas."""
    n, d = e_t.shape
    dk = d // heads
    out = np.zeros((n, d))
    for i in range(n):
        for h in range(heads):
            cols = slice(h * dk, (h + 1) * dk)
            W = {k.split(".")[1]: p[k][:, cols] for k in FUSION_WEIGHTS}
            at = [float(e_t[i] @ W["wq_t"] @ (e_l[j] @ W["wk_l"])) / math.sqrt(dk) for j in nbrs[i]]
            al = [float(e_l[i] @ W["wq_l"] @ (e_t[j] @ W["wk_t"])) / math.sqrt(dk) for j in nbrs[i]]
            if normalize:
                at = np.exp(np.array(at) - max(at)) / np.exp(np.array(at) - max(at)).sum()
                al = np.exp(np.array(al) - max(al)) / np.exp(np.array(al) - max(al)).sum()
            for a_t, a_l, j in zip(at, al, nbrs[i]):
                out[i, cols] += a_t * (e_l[j] @ W["wv_l"]) + a_l * (e_t[j] @ W["wv_t"])
    return out


def random_graph(rng, n):
    src, dst = [], []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < 0.5:
                src += [u, v]
                dst += [v, u]
    return np.array(src, dtype=int), np.array(dst, dtype=int)


@pytest.mark.parametrize("normalize", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_fuse_matches_literal_formula(seed, normalize):
    rng = np.random.default_rng(seed)
    n, d, heads = int(rng.integers(1, 6)), 6, [1, 2, 3][seed % 3]
    e_t, e_l = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    src, dst = random_graph(rng, n)
    recv, nbr = fusion_neighborhood(src, dst, n)
    nbrs = {i: sorted(set(src[dst == i].tolist()) | {i}) for i in range(n)}
    p = fusion_params(rng, d)
    got = fuse(e_t, e_l, recv, nbr, p, heads, normalize=normalize).data
    assert np.abs(got - literal_fuse(e_t, e_l, nbrs, p, heads, normalize)).max() < 1e-10


def test_fuse_single_node_head_one():
    rng = np.random.default_rng(9)
    e_t, e_l = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    p = fusion_params(rng, 2)
    a_t = float(e_t[0] @ p["fusion.wq_t"] @ (e_l[0] @ p["fusion.wk_l"])) / math.sqrt(2)
    a_l = float(e_l[0] @ p["fusion.wq_l"] @ (e_t[0] @ p["fusion.wk_t"])) / math.sqrt(2)
    v = a_t * (e_l[0] @ p["fusion.wv_l"]) + a_l * (e_t[0] @ p["fusion.wv_t"])
    got = fuse(e_t, e_l, [0], [0], p, 1, normalize=False).data[0]
    assert np.allclose(got, v, atol=1e-12)


def test_fuse_zero_weights_and_width():
    rng = np.random.default_rng(4)
    e = rng.normal(size=(3, 64))
    recv, nbr = fusion_neighborhood([0, 1], [1, 0], 3)
    zero = {k: np.zeros((64, 64)) for k in FUSION_WEIGHTS}
    for normalize in (False, True):
        assert not fuse(e, e, recv, nbr, zero, 4, normalize=normalize).data.any()
    out = fuse(e, e, recv, nbr, fusion_params(rng, 64), 4)
    assert out.shape == (3, 64)
    with pytest.raises(ShapeError):
        fuse(e, e[:, :32], recv, nbr, zero, 4)


@given(st.integers(0, 10_000))
def test_fuse_attention_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 7)), 4
    src, dst = random_graph(rng, n)
    recv, nbr = fusion_neighborhood(src, dst, n)
    _, a_t, a_l = fuse(rng.normal(size=(n, d)), rng.normal(size=(n, d)), recv, nbr,
                       fusion_params(rng, d), 2, return_attention=True)
    for a in (a_t.data, a_l.data):
        sums = ag.scatter_rows(recv, a, n)
        assert np.abs(sums - 1).max() < 1e-9


@given(st.integers(0, 10_000))
def test_fuse_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 7)), 4
    e_t, e_l = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    src, dst = random_graph(rng, n)
    p = fusion_params(rng, d)
    perm = rng.permutation(n)
    inv = np.argsort(perm)  # new index of old node
    base = fuse(e_t, e_l, *fusion_neighborhood(src, dst, n), p, 2).data
    moved = fuse(e_t[perm], e_l[perm], *fusion_neighborhood(inv[src], inv[dst], n), p, 2).data
    assert np.allclose(moved, base[perm], atol=1e-10)
