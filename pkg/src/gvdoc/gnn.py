"""Graph attention network with edge features, super-node readout and task heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .embeddings import (FUSION_WEIGHTS, PARA_BOX_TABLES, TOKEN_BOX_TABLES, fuse,
                         fusion_neighborhood, layout_embed, text_embed)
from .errors import InvariantError, NonFiniteError, ShapeError
from .graph import EDGE_DIM

HEADS = ("cls", "mlm", "mpm", "cpp")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    fusion_heads: int = 4
    gat_layers: int = 4
    gat_heads: int = 4
    num_classes: int = 4
    vocab_size: int = 8192
    cpp_k: int = 4
    max_pos: int = 512
    max_tokens: int = 512
    bins: int = 1000
    fusion_softmax: bool = True
    leaky_slope: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.fusion_heads:
            raise InvariantError("model.d must be divisible by model.fusion_heads")
        if self.d % self.gat_heads:
            raise InvariantError("model.d must be divisible by model.gat_heads")
        if self.num_classes < 2:
            raise InvariantError("model.num_classes must be >= 2")
        if self.cpp_k < 1:
            raise InvariantError("model.cpp_k must be >= 1")
        if self.gat_layers < 1:
            raise InvariantError("model.gat_layers must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvariantError("model.dtype must be float32 or float64")

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict:
    d, dk = cfg.d, cfg.d // cfg.gat_heads
    shapes = {
        "emb.token": (cfg.vocab_size, d),
        "emb.type": (2, d),
        "emb.pos": (cfg.max_pos + 1, d),
    }
    for name in TOKEN_BOX_TABLES + PARA_BOX_TABLES:
        shapes[name] = (cfg.bins + 1, d)
    shapes["layout.w"] = (2 * d, d)
    shapes["layout.b"] = (d,)
    for name in FUSION_WEIGHTS:
        shapes[name] = (d, d)
    shapes["edge.w"] = (EDGE_DIM, d)
    shapes["edge.b"] = (d,)
    for layer in range(cfg.gat_layers):
        shapes[f"gat.{layer}.w"] = (d, d)
        shapes[f"gat.{layer}.we"] = (d, d)
        for part in ("att_i", "att_j", "att_e"):
            shapes[f"gat.{layer}.{part}"] = (cfg.gat_heads, dk)
    for head, width in (("cls", cfg.num_classes), ("mlm", cfg.vocab_size), ("mpm", 4),
                        ("cpp", cfg.cpp_k ** 2)):
        shapes[f"head.{head}.w"] = (d, width)
        shapes[f"head.{head}.b"] = (width,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Xavier-uniform matrices, zero biases, N(0, 0.02) embedding tables."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("emb."):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            if ".att_" in name:
                fan_in, fan_out = 3 * shape[1], 1
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(cfg.dtype)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    """Raise :class:`ShapeError` naming the first tensor that does not fit ``cfg``."""
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name!r} has shape {tuple(params[name].shape)}, "
                             f"config expects {shape}")


# -- batching ------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of graphs with node/edge offsets applied."""

    token_ids: np.ndarray
    type_ids: np.ndarray
    read_index: np.ndarray
    bboxes: np.ndarray
    para_bboxes: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray
    graph_index: np.ndarray
    super_index: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return len(self.token_ids)

    @property
    def n_graphs(self):
        return len(self.super_index)

    @property
    def token_nodes(self):
        return np.flatnonzero(self.type_ids == 0)


def collate(graphs) -> GraphBatch:
    if not isinstance(graphs, (list, tuple)):
        graphs = [graphs]
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
    cat = np.concatenate
    return GraphBatch(
        token_ids=cat([g.token_ids for g in graphs]),
        type_ids=cat([g.type_ids for g in graphs]),
        read_index=cat([g.read_index for g in graphs]),
        bboxes=cat([g.bboxes for g in graphs]),
        para_bboxes=cat([g.para_bboxes for g in graphs]),
        src=cat([g.src + o for g, o in zip(graphs, offsets)]),
        dst=cat([g.dst + o for g, o in zip(graphs, offsets)]),
        features=cat([g.features for g in graphs]),
        graph_index=cat([np.full(g.n_nodes, i) for i, g in enumerate(graphs)]),
        super_index=np.asarray([o + int(np.flatnonzero(g.type_ids == 1)[0])
                                for g, o in zip(graphs, offsets)], dtype=np.int64),
        labels=[g.label for g in graphs],
    )


# -- GAT -----------------------------------------------------------------------

def _locate_nonfinite(h, e_proj, params, layer, heads):
    w = np.asarray(params[f"gat.{layer}.w"].data if isinstance(params[f"gat.{layer}.w"], ag.Tensor)
                   else params[f"gat.{layer}.w"])
    with np.errstate(all="ignore"):
        wh = (h @ w).reshape(len(h), heads, -1)
        bad = ~np.isfinite(wh).all(axis=(0, 2))
        if e_proj is not None:
            we = params[f"gat.{layer}.we"]
            we = we.data if isinstance(we, ag.Tensor) else we
            ee = (e_proj @ we).reshape(len(e_proj), heads, -1)
            bad |= ~np.isfinite(ee).all(axis=(0, 2))
    hits = np.flatnonzero(bad)
    return int(hits[0]) if len(hits) else 0


def gat_layer(h, src, dst, e_proj, params, layer, heads, last=False, slope=0.2,
              return_attention=False):
    """One multi-head graph attention layer with edge features.

    Per head, the logit of edge ``j -> i`` is
    ``LeakyReLU(att_i . Wh_i + att_j . Wh_j + att_e . e_ij)``, normalized by
    softmax over the incoming edges of ``i``; the message is ``Wh_j + e_ij``.
    Heads are concatenated, ELU applied unless ``last``, then a residual add.

    Args:
        h: ``(N, d)`` node states.
        src, dst: edge endpoints; every node needs at least one incoming edge
            (self loops).
        e_proj: ``(E, d)`` edge features after the shared 21 -> d projection.
    """
    h = ag.as_tensor(h)
    e_proj = ag.as_tensor(e_proj)
    n, d = h.shape
    if d % heads:
        raise ShapeError(f"d={d} not divisible by {heads} GAT heads")
    dk = d // heads
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    p = {k: ag.as_tensor(params[f"gat.{layer}.{k}"]) for k in ("w", "we", "att_i", "att_j", "att_e")}
    try:
        wh = (h @ p["w"]).reshape((n, heads, dk))
        ee = (e_proj @ p["we"]).reshape((-1, heads, dk))
        s_i = (wh * p["att_i"]).sum(axis=-1)
        s_j = (wh * p["att_j"]).sum(axis=-1)
        s_e = (ee * p["att_e"]).sum(axis=-1)
        logits = ag.leaky_relu(ag.take(s_i, dst) + ag.take(s_j, src) + s_e, slope)
        att = ag.segment_softmax(logits, dst, n)
        msg = att.reshape((-1, heads, 1)) * (ag.take(wh, src) + ee)
        out = ag.segment_sum(msg, dst, n).reshape((n, d))
        if not last:
            out = ag.elu(out)
        out = out + h
    except NonFiniteError as exc:
        head = _locate_nonfinite(h.data, e_proj.data, params, layer, heads)
        raise NonFiniteError(f"GAT layer {layer} head {head}: {exc}") from None
    if return_attention:
        return out, att
    return out


# -- full model ----------------------------------------------------------------

@dataclass
class Forward:
    node_embeddings: ag.Tensor
    class_logits: ag.Tensor = None
    mlm_logits: ag.Tensor = None
    mpm_pred: ag.Tensor = None
    cpp_logits: ag.Tensor = None
    token_nodes: np.ndarray = None
    mlm_nodes: np.ndarray = None
    params: dict = None


def as_param_tensors(params):
    return {k: (v if isinstance(v, ag.Tensor) else ag.parameter(v, name=k))
            for k, v in params.items()}


def model_forward(graphs, params, cfg: ModelConfig, heads=HEADS, mlm_nodes=None) -> Forward:
    """Embeddings -> fusion -> GAT stack -> task heads.

    Args:
        graphs: a DocumentGraph, list of graphs, or a GraphBatch.
        params: name -> array (wrapped as leaf tensors) or Tensor.
        heads: subset of ``("cls", "mlm", "mpm", "cpp")`` to evaluate.
        mlm_nodes: batch node indices for the MLM head; defaults to all
            token nodes (the ``(T, V)`` matrix can be large).

    Class logits are read from each graph's super node; token heads exclude it.
    """
    batch = graphs if isinstance(graphs, GraphBatch) else collate(graphs)
    pt = as_param_tensors(params)
    n = batch.n_nodes
    e_t = text_embed(batch, pt)
    e_l = layout_embed(batch, pt)
    recv, nbr = fusion_neighborhood(batch.src, batch.dst, n)
    h = fuse(e_t, e_l, recv, nbr, pt, cfg.fusion_heads, normalize=cfg.fusion_softmax)
    feats = ag.as_tensor(batch.features.astype(pt["edge.w"].dtype))
    e_proj = feats @ pt["edge.w"] + pt["edge.b"]
    for layer in range(cfg.gat_layers):
        h = gat_layer(h, batch.src, batch.dst, e_proj, pt, layer, cfg.gat_heads,
                      last=layer == cfg.gat_layers - 1, slope=cfg.leaky_slope)
    out = Forward(node_embeddings=h, token_nodes=batch.token_nodes, params=pt)

    def head(name, rows):
        return ag.take(h, rows) @ pt[f"head.{name}.w"] + pt[f"head.{name}.b"]

    if "cls" in heads:
        out.class_logits = head("cls", batch.super_index)
    if "mlm" in heads:
        out.mlm_nodes = out.token_nodes if mlm_nodes is None else np.asarray(mlm_nodes)
        out.mlm_logits = head("mlm", out.mlm_nodes)
    if "mpm" in heads:
        out.mpm_pred = head("mpm", out.token_nodes)
    if "cpp" in heads:
        out.cpp_logits = head("cpp", out.token_nodes)
    return out


def backward(loss, fwd: Forward) -> dict:
    """Gradients of ``loss`` for every named parameter (zeros where unused)."""
    return ag.backward(loss, fwd.params)


# -- gradient verification -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict
    worst_entry: dict
    tolerance: float
    passed: bool

    def failing(self):
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]


def finite_diff_check(loss_fn, params, tolerance=1e-4, step=1e-5, abs_floor=1e-8,
                      grads=None, names=None):
    """Compare analytic gradients with central finite differences.

    Args:
        loss_fn: ``params -> (loss Tensor, Forward)``; evaluated in float64.
        params: name -> float64 array. Not modified.
        grads: analytic gradients to check; computed via backward when None.
        names: restrict the check to these parameters.

    The error of an entry is ``|g - fd| / max(|g|, |fd|, abs_floor / tolerance)``:
    relative for ordinary magnitudes, ``|g - fd| < abs_floor`` near zero.
    """
    if not tolerance > 0 or not step > 0:
        raise InvariantError("gradcheck tolerance and step must be > 0")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if grads is None:
        loss, fwd = loss_fn(params)
        grads = backward(loss, fwd)
    names = list(params) if names is None else list(names)
    max_rel, worst = {}, {}
    with ag.no_grad():
        for name in names:
            arr = params[name]
            fd = np.zeros_like(arr)
            flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss_fn(params)[0].data)
                flat[i] = orig - step
                down = float(loss_fn(params)[0].data)
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * step)
            g = np.asarray(grads[name], dtype=np.float64)
            # near zero (|g|, |fd| < abs_floor / tolerance) this is an absolute test
            denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), abs_floor / tolerance)
            rel = np.abs(g - fd) / denom
            max_rel[name] = float(rel.max()) if rel.size else 0.0
            worst[name] = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
    passed = all(v < tolerance for v in max_rel.values())
    return GradCheckReport(max_rel, worst, tolerance, passed)
