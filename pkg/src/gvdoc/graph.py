"""Document graph construction: beta-skeleton, paragraph edges, super node.

Node 0 is the virtual super node; token ``r`` (reading order) is node
``r + 1``. Edges are stored directed and symmetrized, one edge per ordered
pair, sorted by ``(src, dst)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDocumentError, FormatError, InvariantError, SchemaError
from .ocr import SUP_ID, Document
from .spatial import UniformGrid, circle_hits_boxes

BETA, PARA_KNN, PARA_LINK, SUPER, SELF = "BETA", "PARA_KNN", "PARA_LINK", "SUPER", "SELF"
KINDS = (BETA, PARA_KNN, PARA_LINK, SUPER, SELF)
KIND_CODE = {k: i for i, k in enumerate(KINDS)}
MODES = ("beta", "paragraph", "both")

EDGE_DIM = 21
FULL_PAGE = (0.0, 0.0, 1.0, 1.0)
RATIO_EPS = 1e-6
LOG_RATIO_SCALE = math.log(100.0)

# Conservative margin for the angular pruning in the grid search.
_PRUNE_EPS = 1e-9


@dataclass(frozen=True)
class GraphConfig:
    mode: str = "both"
    beta: float = 1.0
    max_beta_neighbors: int = 25
    para_k_test: int = 10
    para_k_train_range: tuple = (2, 10)
    add_self_loops: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvariantError(f"graph.mode must be one of {MODES}, got {self.mode!r}")
        if self.beta != 1.0:
            raise InvariantError("graph.beta: only beta = 1 is supported")
        if self.max_beta_neighbors < 1:
            raise InvariantError("graph.max_beta_neighbors must be >= 1")
        if self.para_k_test < 1:
            raise InvariantError("graph.para_k_test must be >= 1")
        lo, hi = self.para_k_train_range
        if not 1 <= lo <= hi:
            raise InvariantError("graph.para_k_train_range must satisfy 1 <= lo <= hi")


# -- edge features -------------------------------------------------------------

def _corners(b):
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    # TL, TR, BL, BR
    return np.stack([np.stack([x1, y1], -1), np.stack([x2, y1], -1),
                     np.stack([x1, y2], -1), np.stack([x2, y2], -1)], axis=1)


def _log_ratio(a, b):
    a = np.where(a > 0, a, RATIO_EPS)
    b = np.where(b > 0, b, RATIO_EPS)
    # ln(a) - ln(b) is exactly antisymmetric under swapping, unlike ln(a / b).
    return np.clip((np.log(a) - np.log(b)) / LOG_RATIO_SCALE, -1.0, 1.0)


def edge_feature_matrix(boxes_i, boxes_j):
    """Vectorized :func:`edge_features` for ``(E, 4)`` box arrays -> ``(E, 21)``."""
    bi = np.asarray(boxes_i, dtype=np.float64).reshape(-1, 4)
    bj = np.asarray(boxes_j, dtype=np.float64).reshape(-1, 4)
    ci, cj = _corners(bi), _corners(bj)
    diff = ci[:, :, None, :] - cj[:, None, :, :]
    corner = np.hypot(diff[..., 0], diff[..., 1]).reshape(-1, 16)
    cxi, cyi = (bi[:, 0] + bi[:, 2]) / 2, (bi[:, 1] + bi[:, 3]) / 2
    cxj, cyj = (bj[:, 0] + bj[:, 2]) / 2, (bj[:, 1] + bj[:, 3]) / 2
    dx, dy = np.abs(cxi - cxj), np.abs(cyi - cyj)
    h = _log_ratio(bi[:, 3] - bi[:, 1], bj[:, 3] - bj[:, 1])
    w = _log_ratio(bi[:, 2] - bi[:, 0], bj[:, 2] - bj[:, 0])
    return np.column_stack([corner, np.hypot(dx, dy), dx, dy, h, w])


def edge_features(box_i, box_j):
    """21 geometric features for the edge ``i -> j`` between normalized boxes.

    Layout: 16 corner-to-corner distances (corners TL, TR, BL, BR; ``i``
    corner major), centre distance, ``|dx|``, ``|dy|``, then the height and
    width log-ratios ``ln(clip(r, 1e-2, 1e2)) / ln(100)``.
    """
    return edge_feature_matrix(np.asarray(box_i)[None], np.asarray(box_j)[None])[0]


# -- beta skeleton -------------------------------------------------------------

def _as_boxes(boxes):
    if hasattr(boxes, "__len__") and len(boxes) and hasattr(boxes[0], "as_tuple"):
        boxes = [b.as_tuple() for b in boxes]
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def _cap_neighbors(n, admitted, centers, max_neighbors):
    """Keep each node's nearest ``max_neighbors`` partners; an edge survives
    only if both endpoints keep it, so the cap holds after symmetrization."""
    partners = [[] for _ in range(n)]
    for a, b in admitted:
        d = math.hypot(centers[a, 0] - centers[b, 0], centers[a, 1] - centers[b, 1])
        partners[a].append((d, b))
        partners[b].append((d, a))
    keep = [set(b for _, b in sorted(p)[:max_neighbors]) for p in partners]
    return sorted((a, b) for a, b in admitted if b in keep[a] and a in keep[b])


def _admit(a, b, centers, boxes, candidates):
    cx = (centers[a, 0] + centers[b, 0]) / 2
    cy = (centers[a, 1] + centers[b, 1]) / 2
    r = math.hypot(centers[a, 0] - centers[b, 0], centers[a, 1] - centers[b, 1]) / 2
    cand = candidates[(candidates != a) & (candidates != b)]
    if len(cand) == 0:
        return True
    return not circle_hits_boxes(cx, cy, r, boxes[cand]).any()


def beta_skeleton_edges_bruteforce(boxes, max_neighbors=25):
    """Reference O(n^3) construction; same admission rule, no pruning."""
    boxes = _as_boxes(boxes)
    n = len(boxes)
    centers = np.column_stack([(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2])
    everyone = np.arange(n)
    admitted = [(a, b) for a in range(n) for b in range(a + 1, n)
                if _admit(a, b, centers, boxes, everyone)]
    return _cap_neighbors(n, admitted, centers, max_neighbors)


def _fully_blocked(a, seen, centers, rho):
    """True if every point at distance >= rho from ``a`` is provably blocked.

    A previously seen centre ``c`` at distance ``r_c`` lies inside the
    diametral circle of ``(a, b)`` whenever ``(b - a) . u_c >= r_c``, i.e. it
    blocks an angular window of half-width ``acos(r_c / rho)`` at radius rho.
    """
    if rho <= 0 or len(seen) == 0:
        return False
    idx = np.asarray(seen)
    d = centers[idx] - centers[a]
    r = np.hypot(d[:, 0], d[:, 1])
    ok = (r > 1e-6) & (r + _PRUNE_EPS < rho)
    if not ok.any():
        return False
    theta = np.arctan2(d[ok, 1], d[ok, 0])
    half = np.arccos((r[ok] + _PRUNE_EPS) / rho) - _PRUNE_EPS
    if (half >= math.pi).any():
        return True
    lo, hi = theta - half, theta + half
    # unwrap onto [-pi, pi] with shifted copies
    lo = np.concatenate([lo, lo + 2 * math.pi, lo - 2 * math.pi])
    hi = np.concatenate([hi, hi + 2 * math.pi, hi - 2 * math.pi])
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    reach = np.maximum.accumulate(hi)
    done = np.flatnonzero(reach >= math.pi)
    if len(done) == 0:
        return False
    prev = np.concatenate([[-math.pi], reach[:-1]])
    return not (lo[:done[0] + 1] > prev[:done[0] + 1]).any()


def beta_skeleton_edges(boxes, max_neighbors=25, grid=None):
    """Beta = 1 ("ball-of-sight") edges between boxes.

    A pair is admitted iff no third box intersects the circle whose diameter
    joins the two box centres. Each node keeps at most ``max_neighbors``
    admitted partners, nearest first (ties: lower index).

    Candidates are enumerated ring by ring on a uniform grid; the search for
    node ``a`` stops once already-seen centres block every farther partner,
    and blockers are looked up only in cells overlapping the circle.

    Returns:
        Sorted list of undirected pairs ``(a, b)`` with ``a < b``.
    """
    boxes = _as_boxes(boxes)
    n = len(boxes)
    if n < 2:
        return []
    grid = grid or UniformGrid(boxes)
    centers = grid.centers
    cells = grid.center_cell
    tested = np.zeros((n, n), dtype=bool)
    admitted = []
    for a in range(n):
        ring_of = np.abs(cells - cells[a]).max(1)
        ring_of[a] = -1
        order = np.argsort(ring_of, kind="stable")
        sorted_rings = ring_of[order]
        pos = 1  # skip a itself
        ring = 0
        while pos < n:
            stop = int(np.searchsorted(sorted_rings, ring, side="right"))
            new = order[pos:stop]
            pos = stop
            fresh = new[~tested[a, new]]
            if len(fresh):
                tested[a, fresh] = tested[fresh, a] = True
                mid = (centers[a] + centers[fresh]) / 2
                r = np.hypot(*(centers[fresh] - centers[a]).T) / 2
                pts = centers[order[1:pos]]
                d2 = ((mid[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
                # a seen centre strictly inside the circle certainly blocks it
                cheap = (d2 < (r * r - _PRUNE_EPS)[:, None]).any(1)
                for b, m, rb in zip(fresh[~cheap], mid[~cheap], r[~cheap]):
                    cand = grid.boxes_in_rect(m[0] - rb, m[1] - rb, m[0] + rb, m[1] + rb)
                    if _admit(a, int(b), centers, boxes, cand):
                        admitted.append((a, int(b)) if a < b else (int(b), a))
            if pos < n and _fully_blocked(a, order[1:pos], centers, ring * grid.cell):
                break
            ring = 2 * ring + 1
    return _cap_neighbors(n, sorted(admitted), centers, max_neighbors)


# -- paragraph neighbourhood -----------------------------------------------------

def paragraph_knn_edges(doc: Document, k):
    """For each token, edges to its ``k`` nearest same-paragraph tokens by
    reading-order distance (ties: lower read index).

    ``k`` is an int or a per-token sequence. Returns directed pairs of read
    indices ``(u, v)``; callers symmetrize.
    """
    n = len(doc.tokens)
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64), (n,))
    if (ks < 1).any():
        raise InvariantError("paragraph k must be >= 1")
    out = []
    for para in doc.paragraphs:
        first, last = para.token_range
        members = np.arange(first, last + 1)
        for u in members:
            others = members[members != u]
            order = np.lexsort((others, np.abs(others - u)))
            out.extend((int(u), int(v)) for v in others[order[:ks[u]]])
    return out


def paragraph_link_edges(doc: Document):
    """Last token of each paragraph to the first token of the next one."""
    return [(doc.paragraphs[p].token_range[1], doc.paragraphs[p + 1].token_range[0])
            for p in range(len(doc.paragraphs) - 1)]


def super_node_edges(doc: Document):
    """Node pairs ``(0, token_node)`` for each paragraph's first and last token."""
    nodes = []
    for para in doc.paragraphs:
        for r in para.token_range:
            if r + 1 not in nodes:
                nodes.append(r + 1)
    return [(0, v) for v in nodes]


# -- graph ---------------------------------------------------------------------

@dataclass(eq=False)
class DocumentGraph:
    doc_id: str
    token_ids: np.ndarray     # (N,) int64
    bboxes: np.ndarray        # (N, 4) float64
    para_bboxes: np.ndarray   # (N, 4) float64
    read_index: np.ndarray    # (N,) int64
    type_ids: np.ndarray      # (N,) int64
    src: np.ndarray           # (E,) int64
    dst: np.ndarray           # (E,) int64
    kinds: np.ndarray         # (E,) int64 codes into KINDS
    features: np.ndarray      # (E, 21) float64
    label: object = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.token_ids)

    @property
    def n_edges(self):
        return len(self.src)

    def edge_set(self, kinds=None):
        """Set of directed ``(src, dst)`` pairs, optionally filtered by kind name."""
        mask = np.ones(self.n_edges, bool)
        if kinds is not None:
            mask = np.isin(self.kinds, [KIND_CODE[k] for k in kinds])
        return set(zip(self.src[mask].tolist(), self.dst[mask].tolist()))

    def copy(self, **changes):
        arrays = {k: getattr(self, k).copy() for k in (
            "token_ids", "bboxes", "para_bboxes", "read_index", "type_ids",
            "src", "dst", "kinds", "features")}
        arrays.update(changes)
        return DocumentGraph(doc_id=self.doc_id, label=self.label, seed=self.seed,
                             meta=dict(self.meta), **arrays)

    def __eq__(self, other):
        if not isinstance(other, DocumentGraph):
            return NotImplemented
        return (self.doc_id == other.doc_id and self.label == other.label
                and self.seed == other.seed
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in (
                    "token_ids", "bboxes", "para_bboxes", "read_index", "type_ids",
                    "src", "dst", "kinds", "features")))


def token_edge_pairs(doc: Document, cfg: GraphConfig, rng=None, train=False,
                     beta_pairs=None):
    """Undirected token-level node pairs mapped to their edge kind.

    Precedence when a pair arises several ways: BETA > PARA_KNN > PARA_LINK.
    """
    pairs = {}

    def put(u, v, kind):
        key = (u, v) if u < v else (v, u)
        if key not in pairs or KIND_CODE[kind] < KIND_CODE[pairs[key]]:
            pairs[key] = kind

    if cfg.mode in ("beta", "both"):
        if beta_pairs is None:
            beta_pairs = beta_skeleton_edges([t.bbox for t in doc.tokens], cfg.max_beta_neighbors)
        for a, b in beta_pairs:
            put(a + 1, b + 1, BETA)
    if cfg.mode in ("paragraph", "both"):
        if train:
            lo, hi = cfg.para_k_train_range
            k = rng.integers(lo, hi + 1, size=len(doc.tokens))
        else:
            k = cfg.para_k_test
        for u, v in paragraph_knn_edges(doc, k):
            put(u + 1, v + 1, PARA_KNN)
    for u, v in paragraph_link_edges(doc):
        put(u + 1, v + 1, PARA_LINK)
    return pairs


def build_graph(doc: Document, cfg: GraphConfig = GraphConfig(), rng=None, train=False,
                beta_pairs=None) -> DocumentGraph:
    """Build the document graph for a normalized, tokenized document.

    Args:
        doc: normalized and tokenized document.
        cfg: graph configuration; ``cfg.seed`` seeds ``rng`` when not given.
        rng: ``numpy.random.Generator`` used for training-time k sampling.
        train: sample paragraph k per token from ``cfg.para_k_train_range``;
            otherwise use ``cfg.para_k_test``.
        beta_pairs: precomputed :func:`beta_skeleton_edges` output (cache).
    """
    if not doc.tokens:
        raise EmptyDocumentError(f"document {doc.id!r} has no tokens")
    if not doc.normalized:
        raise InvariantError("build_graph expects a normalized document")
    if train and rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = len(doc.tokens) + 1

    token_ids = np.array([SUP_ID] + [t.token_id for t in doc.tokens], dtype=np.int64)
    bboxes = np.array([FULL_PAGE] + [t.bbox.as_tuple() for t in doc.tokens], dtype=np.float64)
    para_bboxes = np.array([FULL_PAGE] + [doc.paragraphs[t.para_index].bbox.as_tuple()
                                          for t in doc.tokens], dtype=np.float64)
    read_index = np.array([0] + [t.read_index for t in doc.tokens], dtype=np.int64)
    type_ids = np.zeros(n, dtype=np.int64)
    type_ids[0] = 1

    pairs = token_edge_pairs(doc, cfg, rng=rng, train=train, beta_pairs=beta_pairs)
    for u, v in super_node_edges(doc):
        pairs[(u, v)] = SUPER
    directed = []
    for (u, v), kind in pairs.items():
        directed.append((u, v, KIND_CODE[kind]))
        directed.append((v, u, KIND_CODE[kind]))
    if cfg.add_self_loops:
        directed.extend((i, i, KIND_CODE[SELF]) for i in range(n))
    directed.sort()
    arr = np.array(directed, dtype=np.int64).reshape(-1, 3)
    src, dst, kinds = arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()
    features = edge_feature_matrix(bboxes[src], bboxes[dst])
    return DocumentGraph(doc_id=doc.id, token_ids=token_ids, bboxes=bboxes,
                         para_bboxes=para_bboxes, read_index=read_index, type_ids=type_ids,
                         src=src, dst=dst, kinds=kinds, features=features,
                         label=doc.label, seed=cfg.seed)


# -- JSON ----------------------------------------------------------------------

def graph_to_dict(g: DocumentGraph) -> dict:
    out = {
        "doc_id": g.doc_id,
        "label": g.label,
        "seed": g.seed,
        "nodes": [
            {"token_id": int(g.token_ids[i]), "bbox": g.bboxes[i].tolist(),
             "para_bbox": g.para_bboxes[i].tolist(), "read_index": int(g.read_index[i]),
             "type_id": int(g.type_ids[i])}
            for i in range(g.n_nodes)
        ],
        "edges": [
            {"src": int(g.src[e]), "dst": int(g.dst[e]), "kind": KINDS[g.kinds[e]],
             "features": g.features[e].tolist()}
            for e in range(g.n_edges)
        ],
    }
    if g.meta:
        out["meta"] = g.meta
    return out


def serialize_graph(g: DocumentGraph) -> str:
    return json.dumps(graph_to_dict(g), separators=(",", ":"))


def _get(obj, key, path, kinds, what):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}/{key}", "missing required field")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, kinds):
        raise SchemaError(f"{path}/{key}", f"expected {what}")
    return v


def _floats(v, n, path):
    if (not isinstance(v, list) or len(v) != n
            or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v)):
        raise SchemaError(path, f"expected an array of {n} numbers")
    arr = np.asarray(v, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise SchemaError(path, "non-finite value")
    return arr


def graph_from_dict(obj) -> DocumentGraph:
    doc_id = _get(obj, "doc_id", "", str, "a string")
    seed = _get(obj, "seed", "", int, "an integer")
    label = obj.get("label") if isinstance(obj, dict) else None
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise SchemaError("/label", "expected an integer or null")
    nodes = _get(obj, "nodes", "", list, "an array")
    edges = _get(obj, "edges", "", list, "an array")
    cols = {k: [] for k in ("token_ids", "bboxes", "para_bboxes", "read_index", "type_ids")}
    for i, node in enumerate(nodes):
        p = f"/nodes/{i}"
        cols["token_ids"].append(_get(node, "token_id", p, int, "an integer"))
        cols["bboxes"].append(_floats(_get(node, "bbox", p, list, "an array"), 4, p + "/bbox"))
        cols["para_bboxes"].append(
            _floats(_get(node, "para_bbox", p, list, "an array"), 4, p + "/para_bbox"))
        cols["read_index"].append(_get(node, "read_index", p, int, "an integer"))
        cols["type_ids"].append(_get(node, "type_id", p, int, "an integer"))
    n = len(nodes)
    src, dst, kinds, feats = [], [], [], []
    seen = set()
    for e, edge in enumerate(edges):
        p = f"/edges/{e}"
        s = _get(edge, "src", p, int, "an integer")
        d = _get(edge, "dst", p, int, "an integer")
        if not (0 <= s < n and 0 <= d < n):
            raise SchemaError(p, "node index out of range")
        kind = _get(edge, "kind", p, str, "a string")
        if kind not in KIND_CODE:
            raise SchemaError(p + "/kind", f"unknown edge kind {kind!r}")
        if (s == d) != (kind == SELF):
            raise SchemaError(p, "self edges must have kind SELF and vice versa")
        if (s, d, kind) in seen:
            raise SchemaError(p, "duplicate edge")
        seen.add((s, d, kind))
        feats.append(_floats(_get(edge, "features", p, list, "an array"), EDGE_DIM,
                             p + "/features"))
        src.append(s)
        dst.append(d)
        kinds.append(KIND_CODE[kind])
    meta = obj.get("meta", {})
    return DocumentGraph(
        doc_id=doc_id, label=label, seed=seed, meta=meta,
        token_ids=np.asarray(cols["token_ids"], dtype=np.int64),
        bboxes=np.asarray(cols["bboxes"], dtype=np.float64).reshape(-1, 4),
        para_bboxes=np.asarray(cols["para_bboxes"], dtype=np.float64).reshape(-1, 4),
        read_index=np.asarray(cols["read_index"], dtype=np.int64),
        type_ids=np.asarray(cols["type_ids"], dtype=np.int64),
        src=np.asarray(src, dtype=np.int64), dst=np.asarray(dst, dtype=np.int64),
        kinds=np.asarray(kinds, dtype=np.int64),
        features=np.asarray(feats, dtype=np.float64).reshape(-1, EDGE_DIM),
    )


def parse_graph(json_text: str) -> DocumentGraph:
    try:
        obj = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from None
    return graph_from_dict(obj)
