"""Pre-training tasks (MLM, MPM, CPP), fine-tuning, AdamW and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import FormatError, InvariantError, ShapeError
from .gnn import ModelConfig, backward, check_params, collate, init_params, model_forward
from .graph import GraphConfig, beta_skeleton_edges, build_graph, edge_feature_matrix
from .ocr import MASK_ID


@dataclass(frozen=True)
class TrainConfig:
    mask_rate: float = 0.15
    mlm_weight: float = 1.0
    mpm_weight: float = 1.0
    cpp_weight: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mask_rate < 1:
            raise InvariantError("train.mask_rate must be in [0, 1)")
        if not self.lr > 0:
            raise InvariantError("train.lr must be > 0")
        if self.batch_size < 1:
            raise InvariantError("train.batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvariantError("train.beta1/beta2 must be in [0, 1)")


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    loss_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, seed):
        return cls(rng=np.random.default_rng(seed))


# -- masking and labels --------------------------------------------------------

def mask_count(rate, n):
    """``max(1, round(rate * n))`` with half-up rounding; 0 when ``rate == 0``."""
    if rate <= 0 or n == 0:
        return 0
    return max(1, int(math.floor(rate * n + 0.5)))


def _select(graph, rate, rng, exclude):
    tokens = np.flatnonzero(graph.type_ids == 0)
    k = mask_count(rate, len(tokens))
    cands = np.setdiff1d(tokens, np.asarray(list(exclude), dtype=np.int64))
    k = min(k, len(cands))
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(cands, size=k, replace=False))


def apply_mlm_mask(graph, rate, rng, exclude=()):
    """Replace the ids of ``mask_count(rate, N)`` random token nodes with MASK.

    Returns:
        ``(masked_graph, targets)`` with ``targets`` an ``(k, 2)`` int array of
        ``(node, original_id)``. The super node is never selected.
    """
    nodes = _select(graph, rate, rng, exclude)
    targets = np.column_stack([nodes, graph.token_ids[nodes]]).astype(np.int64)
    ids = graph.token_ids.copy()
    ids[nodes] = MASK_ID
    return graph.copy(token_ids=ids), targets.reshape(-1, 2)


def apply_mpm_mask(graph, rate, rng, exclude=()):
    """Replace token boxes of random token nodes with ``[0, 0, 0, 0]``.

    Paragraph boxes are untouched. Features of edges incident to a masked
    node are recomputed from the masked box so geometry does not leak.

    Returns:
        ``(masked_graph, (nodes, original_boxes))``.
    """
    nodes = _select(graph, rate, rng, exclude)
    orig = graph.bboxes[nodes].copy()
    if len(nodes) == 0:
        return graph.copy(), (nodes, orig)
    boxes = graph.bboxes.copy()
    boxes[nodes] = 0.0
    feats = graph.features.copy()
    hit = np.isin(graph.src, nodes) | np.isin(graph.dst, nodes)
    feats[hit] = edge_feature_matrix(boxes[graph.src[hit]], boxes[graph.dst[hit]])
    return graph.copy(bboxes=boxes, features=feats), (nodes, orig)


def cpp_labels(boxes, k):
    """Grid cell ``row * K + col`` containing each box centre (clamped)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    col = np.minimum(np.floor(cx * k), k - 1).clip(0).astype(np.int64)
    row = np.minimum(np.floor(cy * k), k - 1).clip(0).astype(np.int64)
    return row * k + col


def graph_cpp_labels(graph, k):
    return cpp_labels(graph.bboxes[graph.type_ids == 0], k)


# -- optimizer -----------------------------------------------------------------

def adamw_update(param, grad, m, v, step, cfg: TrainConfig):
    """One AdamW step with bias correction and decoupled weight decay.

    ``step`` is the 1-based index of this update. Returns new
    ``(param, m, v)``; inputs are not modified.
    """
    param, grad = np.asarray(param), np.asarray(grad)
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeError(f"AdamW shape mismatch: param {param.shape}, grad {grad.shape}")
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** step)
    v_hat = v / (1 - cfg.beta2 ** step)
    new = param - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - cfg.lr * cfg.weight_decay * param
    return new.astype(param.dtype), m, v


def apply_gradients(params, grads, state: TrainState, cfg: TrainConfig):
    state.step += 1
    for name in params:
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        params[name], state.m[name], state.v[name] = adamw_update(
            p, grads[name], m, state.v[name], state.step, cfg)
    return params


# -- steps ---------------------------------------------------------------------

def pretrain_losses(graphs, params, mcfg: ModelConfig, tcfg: TrainConfig, rng):
    """Mask each graph, run the model and return ``(total, terms, fwd)``.

    ``terms`` maps ``mlm``/``mpm``/``cpp`` to a Tensor, or None if skipped.
    """
    masked, mlm_nodes, mlm_ids, mpm_nodes, mpm_boxes, cpp = [], [], [], [], [], []
    offset = 0
    for g in graphs:
        cpp.append(graph_cpp_labels(g, mcfg.cpp_k))
        g1, mlm_t = apply_mlm_mask(g, tcfg.mask_rate, rng)
        g2, (mpm_n, mpm_b) = apply_mpm_mask(g1, tcfg.mask_rate, rng, exclude=mlm_t[:, 0])
        masked.append(g2)
        mlm_nodes.append(mlm_t[:, 0] + offset)
        mlm_ids.append(mlm_t[:, 1])
        mpm_nodes.append(mpm_n + offset)
        mpm_boxes.append(mpm_b)
        offset += g.n_nodes
    batch = collate(masked)
    mlm_nodes, mlm_ids = np.concatenate(mlm_nodes), np.concatenate(mlm_ids)
    mpm_nodes, mpm_boxes = np.concatenate(mpm_nodes), np.concatenate(mpm_boxes)
    fwd = model_forward(batch, params, mcfg, mlm_nodes=mlm_nodes)
    terms = {"mlm": None, "mpm": None, "cpp": None}
    if len(mlm_nodes):
        terms["mlm"] = ag.cross_entropy(fwd.mlm_logits, mlm_ids)
    if len(mpm_nodes):
        rows = np.searchsorted(fwd.token_nodes, mpm_nodes)
        terms["mpm"] = ag.mse(ag.take(fwd.mpm_pred, rows), mpm_boxes)
    terms["cpp"] = ag.cross_entropy(fwd.cpp_logits, np.concatenate(cpp))
    weights = {"mlm": tcfg.mlm_weight, "mpm": tcfg.mpm_weight, "cpp": tcfg.cpp_weight}
    total = None
    for name, term in terms.items():
        if term is not None:
            total = term * weights[name] if total is None else total + term * weights[name]
    return total, terms, fwd


def pretrain_step(graphs, params, state: TrainState, mcfg: ModelConfig, tcfg: TrainConfig):
    """Joint MLM + MPM + CPP step with an AdamW update.

    Returns a breakdown ``{"total", "mlm", "mpm", "cpp", "skipped"}``; a term
    with an empty mask set is reported as skipped and contributes 0.
    """
    total, terms, fwd = pretrain_losses(graphs, params, mcfg, tcfg, state.rng)
    grads = backward(total, fwd)
    apply_gradients(params, grads, state, tcfg)
    out = {name: (float(t.data) if t is not None else 0.0) for name, t in terms.items()}
    out["total"] = float(total.data)
    out["skipped"] = [name for name, t in terms.items() if t is None]
    out["step"] = state.step
    state.loss_history.append({k: out[k] for k in ("step", "total", "mlm", "mpm", "cpp")})
    return out, params, state


def finetune_loss(graphs, params, mcfg: ModelConfig):
    labels = [g.label for g in graphs]
    if any(lab is None for lab in labels):
        raise InvariantError("fine-tuning requires every graph to have a label")
    if any(not 0 <= lab < mcfg.num_classes for lab in labels):
        raise InvariantError(f"label outside [0, {mcfg.num_classes})")
    fwd = model_forward(graphs, params, mcfg, heads=("cls",))
    return ag.cross_entropy(fwd.class_logits, labels), fwd


def finetune_step(graphs, params, state: TrainState, mcfg: ModelConfig, tcfg: TrainConfig):
    """Mean cross-entropy of super-node class logits, then an AdamW update."""
    loss, fwd = finetune_loss(graphs, params, mcfg)
    grads = backward(loss, fwd)
    apply_gradients(params, grads, state, tcfg)
    preds = fwd.class_logits.data.argmax(1)
    acc = float(np.mean(preds == np.asarray([g.label for g in graphs])))
    out = {"step": state.step, "loss": float(loss.data), "accuracy": acc}
    state.loss_history.append(out)
    return out, params, state


# -- loops ---------------------------------------------------------------------

class GraphSource:
    """Builds graphs for prepared documents, caching beta-skeleton edges.

    Beta edges depend only on geometry, so they are computed once per
    document; paragraph k is resampled on every training-time build.
    """

    def __init__(self, docs, gcfg: GraphConfig):
        self.docs = list(docs)
        self.gcfg = gcfg
        self._beta = {}

    def beta_pairs(self, i):
        if self.gcfg.mode == "paragraph":
            return None
        if i not in self._beta:
            self._beta[i] = beta_skeleton_edges([t.bbox for t in self.docs[i].tokens],
                                                self.gcfg.max_beta_neighbors)
        return self._beta[i]

    def graph(self, i, rng=None, train=False):
        return build_graph(self.docs[i], self.gcfg, rng=rng, train=train,
                           beta_pairs=self.beta_pairs(i))

    def eval_graphs(self):
        return [self.graph(i) for i in range(len(self.docs))]

    def __len__(self):
        return len(self.docs)


def finetune(source: GraphSource, mcfg: ModelConfig, tcfg: TrainConfig, params=None,
             state=None, epochs=None, log=None, callback=None):
    """Fine-tune on labelled documents; returns ``(params, state)``.

    Each epoch shuffles the documents and rebuilds their graphs with
    training-time paragraph k sampling, all driven by ``state.rng``.
    """
    params = params if params is not None else init_params(mcfg, tcfg.seed)
    state = state or TrainState.fresh(tcfg.seed)
    for epoch in range(epochs if epochs is not None else tcfg.epochs):
        order = state.rng.permutation(len(source))
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            graphs = [source.graph(int(i), rng=state.rng, train=True) for i in idx]
            out, params, state = finetune_step(graphs, params, state, mcfg, tcfg)
            out["epoch"] = epoch
            if log:
                log(out)
        if callback and callback(epoch, params, state):
            break
    return params, state


def pretrain(source: GraphSource, mcfg: ModelConfig, tcfg: TrainConfig, params=None,
             state=None, steps=None, log=None):
    """Joint pre-training for ``steps`` updates over shuffled mini-batches."""
    params = params if params is not None else init_params(mcfg, tcfg.seed)
    state = state or TrainState.fresh(tcfg.seed)
    order = []
    for _ in range(steps if steps is not None else tcfg.steps):
        if len(order) < min(tcfg.batch_size, len(source)):
            order.extend(state.rng.permutation(len(source)).tolist())
        idx, order = order[:tcfg.batch_size], order[tcfg.batch_size:]
        graphs = [source.graph(i, rng=state.rng, train=True) for i in idx]
        out, params, state = pretrain_step(graphs, params, state, mcfg, tcfg)
        if log:
            log(out)
    return params, state


def predict_logits(graphs, params, mcfg: ModelConfig, batch_size=64):
    """Class logits ``(len(graphs), C)`` without recording a tape."""
    rows = []
    with ag.no_grad():
        for start in range(0, len(graphs), batch_size):
            fwd = model_forward(graphs[start:start + batch_size], params, mcfg, heads=("cls",))
            rows.append(fwd.class_logits.data)
    return np.concatenate(rows) if rows else np.zeros((0, mcfg.num_classes))


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"GVDK"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, params, config: dict, state: TrainState = None):
    """Write ``GVDK`` | u32 version | u64 manifest length | manifest JSON | payload.

    The manifest lists ``{name, dtype, shape, offset}`` per tensor (offsets
    relative to the payload start); tensors are little-endian, row-major.
    """
    tensors = dict(params)
    meta = {}
    if state is not None:
        for name in state.m:
            tensors[f"state.m/{name}"] = state.m[name]
            tensors[f"state.v/{name}"] = state.v[name]
        meta = {"step": state.step, "loss_history": state.loss_history,
                "rng": state.rng.bit_generator.state if state.rng is not None else None}
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes(order="C")
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = canonical_json({"config": canonical_json(config), "state": meta,
                               "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, model_cfg: ModelConfig = None):
    """Read a checkpoint; returns ``(params, config_dict, state_or_None)``.

    Raises:
        FormatError: bad magic, version or truncated payload.
        ShapeError: a tensor does not match ``model_cfg`` (or the embedded one).
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a GVDK checkpoint (bad magic bytes)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        config = json.loads(manifest["config"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from None
    base = 16 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise FormatError(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    params = {k: v for k, v in tensors.items() if not k.startswith("state.")}
    cfg = model_cfg
    if cfg is None and "model" in config:
        cfg = ModelConfig(**config["model"])
    if cfg is not None:
        check_params(params, cfg)
    state = None
    meta = manifest.get("state") or {}
    if meta:
        rng = np.random.default_rng()
        if meta.get("rng"):
            rng.bit_generator.state = meta["rng"]
        state = TrainState(step=meta["step"], loss_history=meta["loss_history"], rng=rng,
                           m={k[8:]: v for k, v in tensors.items() if k.startswith("state.m/")},
                           v={k[8:]: v for k, v in tensors.items() if k.startswith("state.v/")})
    return params, config, state


# -- gradient check harness ----------------------------------------------------

def tiny_graph(vocab_size=64, gcfg: GraphConfig = None):
    """A fixed 3-token, 2-paragraph document as a 4-node graph (super node + 3)."""
    from .ocr import BBox, Vocab, build_document, prepare_document

    doc = build_document("gradcheck", 100, 100, [
        (None, [("total", BBox(10, 10, 30, 20)), ("due", BBox(35, 10, 50, 20))]),
        (None, [("paid", BBox(12, 60, 40, 72))]),
    ], label=1)
    doc = prepare_document(doc, Vocab(size=vocab_size))
    return build_graph(doc, gcfg or GraphConfig())


def gradcheck_loss(graph, mcfg: ModelConfig):
    """``params -> (loss, fwd)``: sum of all four head losses on ``graph``.

    MLM targets are the unmasked ids, MPM targets the token boxes, so every
    parameter receives gradient without randomness.
    """
    tokens = graph.type_ids == 0
    ids, boxes = graph.token_ids[tokens], graph.bboxes[tokens]
    cells = cpp_labels(boxes, mcfg.cpp_k)
    label = graph.label if graph.label is not None else 0

    def loss_fn(params):
        fwd = model_forward([graph], params, mcfg)
        loss = (ag.cross_entropy(fwd.class_logits, [label])
                + ag.cross_entropy(fwd.mlm_logits, ids)
                + ag.mse(fwd.mpm_pred, boxes)
                + ag.cross_entropy(fwd.cpp_logits, cells))
        return loss, fwd

    return loss_fn
