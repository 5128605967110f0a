"""Command-line pipeline driver.

Subcommands: preprocess, lda-fit, kg-pretrain, train, generate, evaluate.
Exit codes: 0 success, 1 usage error, 2 data error. Every run with an
--out-dir drops a manifest.json recording versions, the effective
config and input checksums (no timestamps, so reruns are byte-stable).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__, snapshot
from .dataset import (
    DataError,
    TrainingExample,
    preprocess_dataset,
    read_jsonl,
    write_jsonl,
)
from .equations import EquationSyntaxError
from .gat import GatError, gat_pretrain
from .knowledge import GraphError, load_graph
from .lda import LdaError, LdaModel, assign_topic, lda_fit, write_assignments
from .metrics import evaluate as evaluate_metrics
from .model import ModelConfig, ModelError
from .snapshot import SnapshotError
from .training import (
    TrainConfig,
    TrainError,
    generate as run_generate,
    load_checkpoint,
    train as run_train,
)

log = logging.getLogger("mwpgen")

DATA_ERRORS = (DataError, EquationSyntaxError, GraphError, LdaError, GatError,
               TrainError, ModelError, SnapshotError, OSError, KeyError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, inputs, outputs):
    manifest = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "snapshot_format": snapshot.FORMAT_VERSION,
        "command": command,
        "config": config,
        "inputs": {os.path.basename(p): _sha256_file(p) for p in inputs},
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_examples(path):
    rows = read_jsonl(path)
    examples = []
    for lineno, rec in rows:
        if isinstance(rec, DataError):
            raise DataError(f"{path} line {lineno}: {rec}")
        if "problem_tokens" in rec:
            examples.append(TrainingExample.from_record(rec))
        else:
            raise DataError(f"{path} line {lineno}: not a preprocessed example "
                            "(run the preprocess subcommand first)")
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


def _parse_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    config = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        try:
            config[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            config[key.strip()] = value.strip()
    return config


_TRAIN_KEYS = set(TrainConfig().to_dict()) - {"model"}
_MODEL_KEYS = set(ModelConfig().to_dict())


def _build_train_config(args):
    """Merge defaults <- config file <- command-line flags."""
    raw = {}
    if args.config:
        file_conf = _parse_config_file(args.config)
        model_part = file_conf.pop("model", {})
        if not isinstance(model_part, dict):
            raise UsageError("config key 'model' must be an object")
        for key, value in list(file_conf.items()):
            if key.startswith("model."):
                model_part[key[len("model."):]] = value
                del file_conf[key]
        unknown = (set(file_conf) - _TRAIN_KEYS) | (set(model_part) - _MODEL_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        raw.update(file_conf)
        raw["model"] = model_part

    model_conf = dict(raw.pop("model", {}))
    flag_map = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "learning_rate": args.lr, "warmup_steps": args.warmup_steps,
        "topic_weight": args.topic_weight, "mask_rate": args.mask_rate,
        "delete_rate": args.delete_rate, "vocab_min_freq": args.vocab_min_freq,
    }
    for key, value in flag_map.items():
        if value is not None:
            raw[key] = value
    raw["seed"] = args.seed
    model_flags = {
        "hidden_size": args.hidden_size, "num_topics": args.num_topics,
        "memory_slots": args.memory_slots,
    }
    for key, value in model_flags.items():
        if value is not None:
            model_conf[key] = value
    if args.no_copy:
        model_conf["use_copy"] = False
    if args.no_graph:
        model_conf["use_graph"] = False
    if args.no_topic_memory:
        model_conf["use_topic_memory"] = False
    try:
        model = ModelConfig(**{**ModelConfig().to_dict(), **model_conf})
        config = TrainConfig(**{**TrainConfig().to_dict(), **raw, "model": model})
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    return config


# ---------------------------------------------------------------------------
# subcommands


def _cmd_preprocess(args):
    rows = read_jsonl(args.input)
    examples, report = preprocess_dataset(rows, max_problem_len=args.max_tokens)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "examples.jsonl")
    write_jsonl(out_path, [ex.to_record() for ex in examples])
    report_path = os.path.join(args.out_dir, "report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    sys.stdout.write(report.to_text())
    _write_manifest(args.out_dir, "preprocess", {"max_tokens": args.max_tokens},
                    [args.input], ["examples.jsonl", "report.txt"])
    if not examples:
        raise DataError("preprocessing kept no examples")
    return 0


def _cmd_lda_fit(args):
    examples = _load_examples(args.input)
    model = lda_fit(
        [ex.problem for ex in examples],
        num_topics=args.topics,
        alpha_doc=args.alpha_doc,
        beta_word=args.beta_word,
        iterations=args.iterations,
        seed=args.seed,
        keep_auxiliaries=args.keep_auxiliaries,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    model.save(os.path.join(args.out_dir, "lda.snap"))
    assignments = []
    for ex in examples:
        a = assign_topic(ex.problem, model, doc_id=ex.id, seed=args.seed,
                         keep_auxiliaries=args.keep_auxiliaries)
        ex.topic_id = a.topic_id
        assignments.append(a)
    write_assignments(os.path.join(args.out_dir, "assignments.jsonl"), assignments)
    write_jsonl(os.path.join(args.out_dir, "examples.jsonl"),
                [ex.to_record() for ex in examples])
    _write_manifest(args.out_dir, "lda-fit",
                    {"topics": args.topics, "iterations": args.iterations,
                     "alpha_doc": args.alpha_doc, "beta_word": args.beta_word,
                     "seed": args.seed, "keep_auxiliaries": args.keep_auxiliaries},
                    [args.input], ["lda.snap", "assignments.jsonl", "examples.jsonl"])
    sizes = {t: 0 for t in range(1, model.num_topics + 1)}
    for a in assignments:
        sizes[a.topic_id] += 1
    print("topic sizes: " + " ".join(f"{t}:{n}" for t, n in sorted(sizes.items())))
    return 0


def _cmd_kg_pretrain(args):
    vocab = None
    if args.vocab_from:
        examples = _load_examples(args.vocab_from)
        vocab = {tok for ex in examples for tok in ex.problem}
    graph = load_graph(args.edges, vocab=vocab,
                       allow_new_relations=args.allow_new_relations)
    table = gat_pretrain(graph, layers=args.layers, dim=args.dim, heads=args.heads,
                         epochs=args.epochs, lr=args.lr, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "node_embeddings.snap")
    snapshot.save_arrays(out_path, {"embeddings": table},
                         meta={"kind": "node_embeddings",
                               "node_names": graph.node_names,
                               "relations": graph.relations})
    _write_manifest(args.out_dir, "kg-pretrain",
                    {"dim": args.dim, "layers": args.layers, "heads": args.heads,
                     "epochs": args.epochs, "lr": args.lr, "seed": args.seed},
                    [args.edges], ["node_embeddings.snap"])
    print(f"pretrained {table.shape[0]} node embeddings "
          f"({graph.skipped_malformed} malformed rows skipped, "
          f"{graph.skipped_relations} relation-capped rows rejected)")
    return 0


def _load_node_embeddings(path, graph, dim, seed):
    """Map a pretrained table onto this graph's node ids by name."""
    arrays, meta = snapshot.load_arrays(path)
    if meta.get("kind") != "node_embeddings":
        raise DataError(f"{path} is not a node-embedding snapshot")
    table = arrays["embeddings"]
    if table.shape[1] != dim:
        raise DataError(f"embedding dim {table.shape[1]} != model hidden size {dim}")
    by_name = {name: i for i, name in enumerate(meta["node_names"])}
    rng = np.random.default_rng(seed)
    out = rng.normal(0.0, 0.1, size=(graph.num_nodes, dim))
    for name, nid in graph.nodes.items():
        row = by_name.get(name)
        if row is not None:
            out[nid] = table[row]
    return out


def _cmd_train(args):
    config = _build_train_config(args)
    examples = _load_examples(args.input)
    dev = _load_examples(args.dev) if args.dev else None
    graph = None
    node_embeddings = None
    if args.graph:
        graph = load_graph(args.graph)
    else:
        config.model.use_graph = False
    lda_model = LdaModel.load(args.lda) if args.lda else None
    if args.embeddings:
        if graph is None:
            raise UsageError("--embeddings requires --graph")
        node_embeddings = _load_node_embeddings(args.embeddings, graph,
                                                config.model.hidden_size, config.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    result = run_train(config, examples, lda_model=lda_model, graph=graph,
                       node_embeddings=node_embeddings, dev_examples=dev,
                       out_dir=args.out_dir, resume_from=args.resume,
                       quiet=not args.verbose)
    inputs = [p for p in (args.input, args.dev, args.graph, args.lda,
                          args.embeddings, args.config) if p]
    outputs = ["last.ckpt", "loss_log.csv"]
    if result.best_dev_bleu is not None:
        outputs.append("best.ckpt")
    _write_manifest(args.out_dir, "train", config.to_dict(), inputs, outputs)
    last = result.log_rows[-1] if result.log_rows else {}
    print(f"trained {result.global_step} steps"
          + (f", final nll {last['nll']:.4f}" if last else "")
          + (f", best dev bleu2 {result.best_dev_bleu:.4f}"
             if result.best_dev_bleu is not None else ""))
    return 0


def _cmd_generate(args):
    graph = load_graph(args.graph) if args.graph else None
    model, _, _ = load_checkpoint(args.checkpoint, graph=graph)
    rows = read_jsonl(args.equations)
    ids, eq_sets = [], []
    for lineno, rec in rows:
        if isinstance(rec, DataError):
            raise DataError(f"{args.equations} line {lineno}: {rec}")
        if "equations" not in rec:
            raise DataError(f"{args.equations} line {lineno}: missing 'equations'")
        ids.append(str(rec.get("id", f"gen{lineno:04d}")))
        eq_sets.append(rec["equations"])
    records = run_generate(model, eq_sets, ids=ids, sample=args.sample,
                           seed=args.seed, beam_width=args.beam_width)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "generated.jsonl")
    write_jsonl(out_path, records)
    _write_manifest(args.out_dir, "generate",
                    {"sample": args.sample, "seed": args.seed,
                     "beam_width": args.beam_width},
                    [args.checkpoint, args.equations], ["generated.jsonl"])
    for rec in records:
        print(f"{rec['id']}\t{rec['generated']}")
    return 0


def _read_texts(path):
    """Token lists from JSONL (generated/problem fields) or plain text lines."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                rec = json.loads(line)
                for key in ("generated", "problem", "text"):
                    if key in rec:
                        out.append(rec[key])
                        break
                else:
                    if "problem_tokens" in rec:
                        out.append(list(rec["problem_tokens"]))
                    else:
                        raise DataError(f"{path}: record without text field")
            else:
                out.append(line)
    if not out:
        raise DataError(f"{path}: no usable lines")
    return out


def _cmd_evaluate(args):
    candidates = _read_texts(args.candidates)
    references = _read_texts(args.references)
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} references")
    report = evaluate_metrics(candidates, references)
    text = report.to_json()
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        _write_manifest(args.out_dir, "evaluate", {},
                        [args.candidates, args.references], ["metrics.json"])
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser():
    parser = _Parser(
        prog="mwpgen",
        description="Generate math word problems from equation sets.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--verbose", action="store_true", help="chatty logging")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("preprocess", formatter_class=fmt,
                       help="JSONL dataset -> normalized examples + report")
    p.add_argument("input", help="raw dataset, JSONL with equations/problem")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-tokens", type=int, default=45,
                   help="drop problems longer than this many tokens")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("lda-fit", formatter_class=fmt,
                       help="fit the topic model and assign gold topics")
    p.add_argument("input", help="preprocessed examples.jsonl")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--topics", type=int, default=9)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--alpha-doc", type=float, default=None,
                   help="doc-topic smoothing (default 50/topics)")
    p.add_argument("--beta-word", type=float, default=0.01)
    p.add_argument("--keep-auxiliaries", action="store_true",
                   help="keep auxiliary verbs (do, is, ...) as topic words")
    p.set_defaults(func=_cmd_lda_fit)

    p = sub.add_parser("kg-pretrain", formatter_class=fmt,
                       help="pretrain concept-graph node embeddings")
    p.add_argument("edges", help="TSV edge list: head, relation, tail, weight")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--vocab-from", default=None,
                   help="examples.jsonl whose words restrict the graph")
    p.add_argument("--allow-new-relations", action="store_true",
                   help="grow the relation vocabulary past the cap")
    p.set_defaults(func=_cmd_kg_pretrain)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train the generation model")
    p.add_argument("input", help="examples.jsonl with topics assigned")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="JSON or key=value config file")
    p.add_argument("--dev", default=None, help="dev examples.jsonl for best-BLEU pick")
    p.add_argument("--graph", default=None, help="concept edge TSV")
    p.add_argument("--embeddings", default=None, help="pretrained node_embeddings.snap")
    p.add_argument("--lda", default=None, help="lda.snap for topic-memory init")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--topic-weight", type=float, default=None)
    p.add_argument("--mask-rate", type=float, default=None)
    p.add_argument("--delete-rate", type=float, default=None)
    p.add_argument("--vocab-min-freq", type=int, default=None,
                   help="min token count for the text vocabulary")
    p.add_argument("--hidden-size", type=int, default=None)
    p.add_argument("--num-topics", type=int, default=None)
    p.add_argument("--memory-slots", type=int, default=None)
    p.add_argument("--no-copy", action="store_true", help="ablate the copy mechanism")
    p.add_argument("--no-graph", action="store_true", help="ablate graph conditioning")
    p.add_argument("--no-topic-memory", action="store_true", help="ablate topic memory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", formatter_class=fmt,
                       help="decode problems for equation sets")
    p.add_argument("equations", help="JSONL with {id, equations}")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--graph", default=None, help="concept edge TSV (same as training)")
    p.add_argument("--sample", action="store_true", help="sample z instead of its mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam-width", type=int, default=0, help="0/1 = greedy")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="score candidates against references")
    p.add_argument("candidates", help="JSONL or plain-text candidates")
    p.add_argument("references", help="JSONL or plain-text references")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
