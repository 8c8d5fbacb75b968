"""Graph-based visual document classification with OOD evaluation, in numpy."""

from .config import RunConfig, load_config, parse_config
from .errors import (BackwardError, ConfigError, EmptyDocumentError, FormatError, GVDocError,
                     InvariantError, NonFiniteError, RowError, SchemaError, ShapeError)
from .gnn import ModelConfig, finite_diff_check, init_params, model_forward
from .graph import DocumentGraph, GraphConfig, beta_skeleton_edges, build_graph, edge_features
from .ocr import (BBox, Document, Vocab, normalize_document, parse_document_json,
                  parse_tesseract_tsv, prepare_document, serialize_document_json)
from .ood import EvalReport, auroc, energy, evaluate, fpr_at_95_tpr, msp
from .synth import generate_corpus, generate_document, generate_documents
from .train import (TrainConfig, TrainState, adamw_update, finetune, finetune_step,
                    load_checkpoint, pretrain, pretrain_step, save_checkpoint)

__version__ = "0.1.0"
