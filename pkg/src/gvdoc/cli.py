"""Command-line entry point: ``gvdoc <command> [options]``.

Exit codes: 0 success, 1 usage, 2 data error, 3 invariant or check failure.
``GVDOC_THREADS`` caps the worker pool used for per-document stages.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import tomli

from .config import RunConfig, config_from_mapping, load_config, with_changes
from .errors import (BackwardError, ConfigError, EmptyDocumentError, FormatError,
                     GVDocError, InvariantError, NonFiniteError)
from .gnn import finite_diff_check, init_params
from .graph import build_graph, serialize_graph
from .ocr import (Vocab, load_document, parse_document_json, parse_tesseract_tsv,
                  prepare_document, serialize_document_json)
from .ood import evaluate
from .synth import generate_corpus, load_corpus
from .train import (GraphSource, TrainState, finetune, gradcheck_loss, load_checkpoint,
                    pretrain, save_checkpoint, tiny_graph)

log = logging.getLogger("gvdoc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_count():
    raw = os.environ.get("GVDOC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GVDOC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"GVDOC_THREADS must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, items, threads=None):
    """Order-preserving map over at most ``threads`` workers."""
    items = list(items)
    threads = min(threads or thread_count(), max(1, len(items)))
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- config helpers ------------------------------------------------------------

def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _run_config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)))


def _stamp(run: RunConfig, kind):
    cfg = run.to_dict()
    cfg.update({"config_hash": run.hash(), "kind": kind})
    return cfg


def _run_from_checkpoint(config: dict) -> RunConfig:
    flat = {f"{section}.{k}": v for section in ("model", "graph", "train")
            for k, v in config.get(section, {}).items()}
    flat["seed"] = config.get("seed", 0)
    return config_from_mapping(flat)


def _sources(corpus, run: RunConfig, splits):
    _, docs = load_corpus(corpus)
    vocab = Vocab(size=run.model.vocab_size)
    out = {}
    for split in splits:
        if split not in docs:
            raise FormatError(f"{corpus}: manifest has no {split!r} split")
        prepared = parallel_map(lambda d: prepare_document(d, vocab, run.model.max_tokens),
                                docs[split])
        src = GraphSource(prepared, run.graph)
        # warm the beta-skeleton cache in parallel; graphs are then cheap to rebuild
        parallel_map(src.beta_pairs, range(len(src)))
        out[split] = src
    return out


def _csv_logger(path, columns, run: RunConfig):
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(list(columns) + ["config_hash", "seed"])
    stamp = [run.hash(), run.seed]

    def write(row):
        writer.writerow([row.get(c, "") for c in columns] + stamp)
        fh.flush()

    return write, fh


# -- commands ------------------------------------------------------------------

def cmd_ingest(args):
    if args.tsv:
        doc = parse_tesseract_tsv(Path(args.tsv).read_text(encoding="utf-8"),
                                  doc_id=args.doc_id or Path(args.tsv).stem, label=args.label)
    else:
        doc = parse_document_json(Path(args.json).read_text(encoding="utf-8"))
    Path(args.out).write_text(serialize_document_json(doc) + "\n")
    log.info("wrote %s (%d tokens, %d paragraphs)", args.out, doc.n_tokens, len(doc.paragraphs))


def cmd_graph(args):
    flags = {"graph.mode": args.mode, "graph.para_k_test": args.para_k,
             "graph.max_beta_neighbors": args.max_beta_neighbors, "seed": args.seed}
    flat = _overrides(args.set)
    flat.update({k: v for k, v in flags.items() if v is not None})
    run = load_config(args.config, flat)
    doc = prepare_document(load_document(args.doc), Vocab(size=run.model.vocab_size),
                           run.model.max_tokens)
    g = build_graph(doc, run.graph)
    g.meta = {"config_hash": run.hash(), "seed": run.seed, "mode": run.graph.mode}
    Path(args.out).write_text(serialize_graph(g) + "\n")
    log.info("wrote %s (%d nodes, %d edges)", args.out, g.n_nodes, g.n_edges)


def cmd_synth(args):
    manifest = generate_corpus(args.out, n_classes=args.classes, n_train=args.train,
                               n_test=args.test, n_ood=args.ood, seed=args.seed)
    log.info("wrote corpus %s: %s", args.out,
             {k: len(v) for k, v in manifest["splits"].items()})


def cmd_pretrain(args):
    run = _run_config(args)
    src = _sources(args.corpus, run, ["train"])["train"]
    write, fh = _csv_logger(args.log or f"{args.out}.loss.csv",
                            ("step", "total", "mlm", "mpm", "cpp"), run)
    with fh:
        params, state = pretrain(src, run.model, run.train,
                                 params=init_params(run.model, run.seed),
                                 state=TrainState.fresh(run.train.seed), log=write)
    save_checkpoint(args.out, params, _stamp(run, "pretrain"), state)
    log.info("wrote %s after %d steps", args.out, state.step)


def cmd_finetune(args):
    run = _run_config(args)
    if args.ckpt:
        params, _, _ = load_checkpoint(args.ckpt, run.model)
        params = {k: v.copy() for k, v in params.items()}
    else:
        params = init_params(run.model, run.seed)
    src = _sources(args.corpus, run, ["train"])["train"]
    write, fh = _csv_logger(args.log or f"{args.out}.loss.csv",
                            ("epoch", "step", "loss", "accuracy"), run)
    with fh:
        params, state = finetune(src, run.model, run.train, params=params,
                                 state=TrainState.fresh(run.train.seed), log=write)
    save_checkpoint(args.out, params, _stamp(run, "finetune"), state)
    log.info("wrote %s after %d steps", args.out, state.step)


def cmd_eval(args):
    params, config, _ = load_checkpoint(args.model)
    run = _run_from_checkpoint(config)
    srcs = _sources(args.corpus, run, ["test", "ood"])
    report = evaluate(params, run.model, srcs["test"].eval_graphs(), srcs["ood"].eval_graphs(),
                      extra={"config_hash": config.get("config_hash", run.hash()),
                             "seed": run.seed})
    Path(args.report).write_text(report.to_json() + "\n")
    if args.hist:
        report.write_histogram_csv(args.hist)
    if args.roc:
        report.write_roc_csv(args.roc)
    print(json.dumps({"accuracy": report.micro, "auroc": report.auroc}, sort_keys=True))


GRADCHECK_DEFAULTS = {"model.d": 8, "model.fusion_heads": 2, "model.gat_layers": 2,
                      "model.gat_heads": 2, "model.vocab_size": 64, "model.max_pos": 16,
                      "model.bins": 16}


def cmd_gradcheck(args):
    if args.config:
        run = _run_config(args)
    else:
        run = load_config(None, {**GRADCHECK_DEFAULTS, **_overrides(args.set)})
    mcfg = with_changes(run, "model", dtype="float64").model
    graph = tiny_graph(mcfg.vocab_size, run.graph)
    params = init_params(mcfg, run.seed)
    report = finite_diff_check(gradcheck_loss(graph, mcfg), params, tolerance=args.tolerance)
    print(json.dumps({"passed": report.passed, "tolerance": report.tolerance,
                      "max_rel_error": report.max_rel_error, "failing": report.failing(),
                      "config_hash": run.hash(), "seed": run.seed}, indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_CHECK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="gvdoc", description="Graph-based visual document classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="flat-key TOML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=5")

    sp = sub.add_parser("ingest", help="OCR TSV or document JSON -> canonical document JSON")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--tsv")
    src.add_argument("--json")
    sp.add_argument("--out", required=True)
    sp.add_argument("--doc-id")
    sp.add_argument("--label", type=int)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("graph", help="document JSON -> graph JSON")
    sp.add_argument("--doc", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("beta", "paragraph", "both"))
    sp.add_argument("--para-k", type=int)
    sp.add_argument("--max-beta-neighbors", type=int)
    sp.add_argument("--seed", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("synth", help="write a synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--train", type=int, default=200)
    sp.add_argument("--test", type=int, default=50)
    sp.add_argument("--ood", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="joint MLM/MPM/CPP pre-training")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="loss CSV (default: OUT.loss.csv)")
    with_config(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="document classification fine-tuning")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ckpt", help="pre-trained checkpoint to start from")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="loss CSV (default: OUT.loss.csv)")
    with_config(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="accuracy and OOD report for a fine-tuned model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--hist")
    sp.add_argument("--roc")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    with_config(sp)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        thread_count()
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FormatError, EmptyDocumentError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, NonFiniteError, BackwardError) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except GVDocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
