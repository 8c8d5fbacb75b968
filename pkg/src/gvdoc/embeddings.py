"""Text and layout input embeddings and the cross-modal fusion module.

All functions take a ``params`` mapping of name -> array or Tensor and a
``nodes`` object exposing ``token_ids``, ``type_ids``, ``read_index``,
``bboxes`` and ``para_bboxes`` (a :class:`~gvdoc.graph.DocumentGraph` or a
collated batch).
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .errors import InvariantError, ShapeError

COORDS = ("x1", "y1", "x2", "y2")
TOKEN_BOX_TABLES = tuple(f"emb.tok_{c}" for c in COORDS)
PARA_BOX_TABLES = tuple(f"emb.par_{c}" for c in COORDS)
FUSION_WEIGHTS = ("fusion.wq_t", "fusion.wk_t", "fusion.wv_t",
                  "fusion.wq_l", "fusion.wk_l", "fusion.wv_l")


def _p(params, name):
    return ag.as_tensor(params[name])


def position_ids(read_index, type_ids, max_pos):
    """``min(read_index + 1, max_pos)`` for tokens, 0 for the super node."""
    read_index = np.asarray(read_index)
    return np.where(np.asarray(type_ids) == 1, 0, np.minimum(read_index + 1, max_pos))


def text_embed(nodes, params):
    """Token + token-type + 1-D position embeddings, one row per node."""
    tok, typ, pos = _p(params, "emb.token"), _p(params, "emb.type"), _p(params, "emb.pos")
    ids = np.asarray(nodes.token_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= tok.shape[0]):
        raise InvariantError(f"token id out of range [0, {tok.shape[0]})")
    types = np.asarray(nodes.type_ids)
    if types.size and (types.min() < 0 or types.max() >= typ.shape[0]):
        raise InvariantError(f"type id out of range [0, {typ.shape[0]})")
    pids = position_ids(nodes.read_index, types, pos.shape[0] - 1)
    return ag.take(tok, ids) + ag.take(typ, types) + ag.take(pos, pids)


def quantize_bbox(b, bins=1000):
    """Map normalized coordinates to integer bins ``floor(c * bins)`` in ``[0, bins]``."""
    b = np.asarray(b, dtype=np.float64)
    return np.clip(np.floor(b * bins), 0, bins).astype(np.int64)


def _box_embed(params, names, q):
    out = ag.take(_p(params, names[0]), q[:, 0])
    for c in range(1, 4):
        out = out + ag.take(_p(params, names[c]), q[:, c])
    return out


def layout_embed(nodes, params):
    """Token-box and paragraph-box embeddings, concatenated and projected to d."""
    bins = _p(params, TOKEN_BOX_TABLES[0]).shape[0] - 1
    e_tl = _box_embed(params, TOKEN_BOX_TABLES, quantize_bbox(nodes.bboxes, bins))
    e_pl = _box_embed(params, PARA_BOX_TABLES, quantize_bbox(nodes.para_bboxes, bins))
    return ag.concat([e_tl, e_pl], axis=1) @ _p(params, "layout.w") + _p(params, "layout.b")


def fusion_neighborhood(src, dst, n):
    """Unique ``(receiver, neighbour)`` pairs from the edge list plus self pairs."""
    src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
    keys = np.concatenate([dst * n + src, np.arange(n, dtype=np.int64) * (n + 1)])
    keys = np.unique(keys)
    return keys // n, keys % n


def fuse(e_t, e_l, recv, nbr, params, heads, normalize=True, return_attention=False):
    """Cross-attention fusion of text and layout embeddings over neighbourhoods.

    For each head, text queries attend over layout keys (and vice versa), the
    resulting weights mix the *other* modality's values, and head outputs are
    concatenated back to width ``d``.

    Args:
        e_t, e_l: ``(N, d)`` text and layout embeddings.
        recv, nbr: neighbourhood pairs; node ``recv[e]`` aggregates from
            ``nbr[e]``. Must contain every self pair.
        heads: number of attention heads ``H``; ``d % H == 0``.
        normalize: softmax each modality's weights over the neighbourhood;
            ``False`` uses the raw scaled dot products.
    """
    e_t, e_l = ag.as_tensor(e_t), ag.as_tensor(e_l)
    n, d = e_t.shape
    if e_l.shape != (n, d):
        raise ShapeError(f"text {e_t.shape} and layout {e_l.shape} embeddings differ")
    if d % heads:
        raise ShapeError(f"d={d} not divisible by {heads} fusion heads")
    w = {k.split(".")[1]: _p(params, k) for k in FUSION_WEIGHTS}
    for k, m in w.items():
        if m.shape != (d, d):
            raise ShapeError(f"fusion.{k} has shape {m.shape}, expected {(d, d)}")
    dk = d // heads
    recv = np.asarray(recv, dtype=np.int64)
    nbr = np.asarray(nbr, dtype=np.int64)

    def proj(x, name):
        return (x @ w[name]).reshape((n, heads, dk))

    q_t, k_l, v_l = proj(e_t, "wq_t"), proj(e_l, "wk_l"), proj(e_l, "wv_l")
    q_l, k_t, v_t = proj(e_l, "wq_l"), proj(e_t, "wk_t"), proj(e_t, "wv_t")
    scale = 1.0 / math.sqrt(dk)
    a_t = (ag.take(q_t, recv) * ag.take(k_l, nbr)).sum(axis=-1) * scale
    a_l = (ag.take(q_l, recv) * ag.take(k_t, nbr)).sum(axis=-1) * scale
    if normalize:
        a_t = ag.segment_softmax(a_t, recv, n)
        a_l = ag.segment_softmax(a_l, recv, n)
    msg = (a_t.reshape((-1, heads, 1)) * ag.take(v_l, nbr)
           + a_l.reshape((-1, heads, 1)) * ag.take(v_t, nbr))
    out = ag.segment_sum(msg, recv, n).reshape((n, d))
    if return_attention:
        return out, a_t, a_l
    return out
