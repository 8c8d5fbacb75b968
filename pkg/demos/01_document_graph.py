"""Walk through turning one synthetic page into a document graph."""

import numpy as np

from gvdoc.graph import KIND_CODE, GraphConfig, beta_skeleton_edges, build_graph
from gvdoc.ocr import Vocab, prepare_document
from gvdoc.synth import TEMPLATES, generate_document

# one invoice-like page, 1000x1000 pixels
doc = generate_document(TEMPLATES["invoice"], np.random.default_rng(0), "demo", label=2)
print(doc.n_tokens, "tokens in", len(doc.paragraphs), "paragraphs")
print([t.text for t in doc.tokens[:8]])

# normalize boxes to the unit page and hash words into ids
doc = prepare_document(doc, Vocab(size=8192))
print(doc.tokens[0].bbox, doc.tokens[0].token_id)

# visibility edges only: the beta-skeleton over token boxes
pairs = beta_skeleton_edges([t.bbox for t in doc.tokens])
deg = np.bincount(np.ravel(pairs), minlength=doc.n_tokens)
print(len(pairs), "beta edges, mean degree", deg.mean().round(2), "max", deg.max())

# the three graph modes share the super node (0), paragraph links and self loops
for mode in ("beta", "paragraph", "both"):
    g = build_graph(doc, GraphConfig(mode=mode))
    kinds = {k: int((g.kinds == c).sum()) for k, c in KIND_CODE.items()}
    print(f"{mode:9s} nodes={g.n_nodes} edges={g.n_edges} {kinds}")

# each directed edge carries 21 geometric features
g = build_graph(doc)
print(g.features.shape)
print(g.features[g.src == 1][0].round(3))
