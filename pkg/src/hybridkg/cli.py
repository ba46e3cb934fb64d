"""Command-line driver: ``hybridkg {train,mine,hybrid,eval,rules-eval}``.

Settings resolve as defaults < ``--config`` file < command-line flags. The
config file is flat ``key=value`` text; ``#`` starts a comment. Keys match
the long flag names with dashes replaced by underscores (``inner_steps``,
``topk`` ...). Every run writes ``manifest.json`` with the resolved
settings, where each came from, and SHA-256 digests of the inputs. While a
run is in progress its output directory holds an ``.incomplete`` marker,
which stays behind if the run fails.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import __version__, checkpoint
from .embedding import KGEmbedding, TrainConfig
from .evaluation import (evaluate, rank_triplets, rule_precision, sparse_filter, summarize,
                         write_metrics_csv, write_rank_dump)
from .graph import Dictionary, KnowledgeGraph, load_dataset
from .hybrid import HybridConfig, run, write_history_csv
from .rules import DEFAULT_EC_CAP, mine, read_rules, select_top_k, write_rules
from .scoring import SCORE_FUNCTIONS, make_score_function

logger = logging.getLogger("hybridkg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_SCHEMA = 1
INCOMPLETE = ".incomplete"

CHECKPOINT_FILE = "embedding.ckpt"
RULES_FILE = "rules.tsv"
HISTORY_FILE = "history.csv"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
RANKS_FILE = "ranks.csv"
PRECISION_FILE = "rule_precision.csv"
LOSS_FILE = "train_loss.csv"
ENTITY_DICT = "entities.dict"
RELATION_DICT = "relations.dict"


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text is None or str(text).strip().lower() in ("", "none", "auto") else int(text)


def _opt_float(text):
    return None if text is None or str(text).strip().lower() in ("", "none") else float(text)


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return text
    vals = [int(x) for x in str(text).replace(" ", "").split(",") if x]
    if not vals or any(v < 1 for v in vals):
        raise ValueError("expected a comma-separated list of positive integers")
    return vals


# key -> (type parser, default, help)
SETTINGS: dict[str, tuple] = {
    "model": (str, "rotate", "score model"),
    "dim": (int, 200, "embedding dimension"),
    "norm": (int, 2, "distance norm for transe/rotate (1 or 2)"),
    "lr": (float, 0.5, "learning rate"),
    "batch": (int, 256, "minibatch size (positives per step)"),
    "neg_ratio": (int, 1, "negatives per positive"),
    "inner_steps": (int, 100, "training steps per global iteration"),
    "optimizer": (str, "sgd", "sgd or adagrad"),
    "omega": (float, 0.5, "weight of embedding confidence in rule quality"),
    "beta": (float, 1.0, "sampling temperature"),
    "topk": (int, 50, "rules kept per iteration"),
    "iters": (int, 10, "global iterations"),
    "sample_fraction": (float, 0.5, "share of inferred triples drawn when no budget is set"),
    "sample_budget": (_opt_int, None, "triples drawn per iteration (default: fraction of |G_T|)"),
    "min_hc": (float, 0.01, "minimum head coverage"),
    "max_len": (int, 3, "maximum rule length, head included"),
    "ec_cap": (int, DEFAULT_EC_CAP, "sample cap for embedding confidence"),
    "patience": (_opt_int, 2, "early-stopping patience (none disables)"),
    "warm_start": (_bool, True, "continue from the previous iteration's embedding"),
    "seed": (int, 0, "random seed"),
    "sparse_threshold": (_opt_float, None, "evaluate only triples with an entity sparser than this"),
    "pooled": (_bool, False, "pool head and tail ranks instead of averaging them"),
    "k_list": (_int_list, [10, 20, 50, 100], "k values for rules-eval"),
}

COMMAND_KEYS = {
    "train": ("model", "dim", "norm", "lr", "batch", "neg_ratio", "inner_steps", "optimizer", "seed"),
    "mine": ("omega", "min_hc", "max_len", "ec_cap", "topk", "seed", "model"),
    "hybrid": ("model", "dim", "norm", "lr", "batch", "neg_ratio", "inner_steps", "optimizer",
               "omega", "beta", "topk", "iters", "sample_fraction", "sample_budget", "min_hc",
               "max_len", "ec_cap", "patience", "warm_start", "seed", "pooled"),
    "eval": ("model", "seed", "sparse_threshold", "pooled"),
    "rules-eval": ("k_list",),
}


# per-command default overrides; None model means "whatever the checkpoint holds"
COMMAND_DEFAULTS = {"mine": {"model": None}, "eval": {"model": None}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridkg", description="Embedding-guided rule mining and link prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "train": "train a standalone embedding",
        "mine": "mine rules from the training graph",
        "hybrid": "run the embedding/rule feedback loop",
        "eval": "filtered link-prediction metrics for a checkpoint",
        "rules-eval": "precision of the top-k rules in a rule file",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--train", required=True, help="training triples (TSV)")
        p.add_argument("--valid", help="validation triples (TSV)")
        p.add_argument("--test", help="test triples (TSV)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("mine", "eval"):
            p.add_argument("--checkpoint", help="embedding checkpoint")
        if name == "rules-eval":
            p.add_argument("--rules", required=True, help="rule file written by mine or hybrid")
        for key in COMMAND_KEYS[name]:
            conv, _, text = SETTINGS[key]
            flag = "--" + key.replace("_", "-")
            kwargs = {"dest": key, "default": argparse.SUPPRESS, "help": text}
            if key == "model":
                kwargs["choices"] = sorted(SCORE_FUNCTIONS)
            elif key == "optimizer":
                kwargs["choices"] = ["sgd", "adagrad"]
            else:
                kwargs["type"] = conv if conv is not _int_list else str
            p.add_argument(flag, **kwargs)
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTINGS:
                raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = value
    return out


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Resolved settings for the command plus the source of each value."""
    file_values = read_config(args.config) if args.config else {}
    settings, sources = {}, {}
    for key in COMMAND_KEYS[args.command]:
        conv, default, _ = SETTINGS[key]
        default = COMMAND_DEFAULTS.get(args.command, {}).get(key, default)
        value, source = default, "default"
        if key in file_values:
            value, source = file_values[key], "config"
        if hasattr(args, key):
            value, source = getattr(args, key), "cli"
        if source != "default":
            try:
                value = conv(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {value!r} ({exc})") from None
        settings[key], sources[key] = value, source
    if settings.get("model") is not None and settings["model"] not in SCORE_FUNCTIONS:
        raise UsageError(f"unknown model {settings['model']!r}")
    if "optimizer" in settings and settings["optimizer"] not in ("sgd", "adagrad"):
        raise UsageError(f"unknown optimizer {settings['optimizer']!r}")
    return settings, sources


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _inputs(args) -> dict[str, str]:
    names = ("train", "valid", "test", "config", "checkpoint", "rules")
    return {n: getattr(args, n) for n in names if getattr(args, n, None)}


def _check_inputs(args) -> None:
    for name, path in _inputs(args).items():
        if not os.path.isfile(path):
            raise UsageError(f"--{name}: no such file: {path}")
        if not os.access(path, os.R_OK):
            raise UsageError(f"--{name}: not readable: {path}")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out: not a directory: {out}")


def _precheck(args, s) -> None:
    """Command-specific requirements, checked before anything is written."""
    if args.command == "mine" and not args.checkpoint and s["omega"] > 0:
        raise UsageError("--checkpoint is required when omega > 0")
    if args.command == "eval":
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint")
        if not args.test and not args.valid:
            raise UsageError("eval needs --test or --valid")
    if args.command == "rules-eval" and not args.test:
        raise UsageError("rules-eval needs --test")


def _train_config(s: dict) -> TrainConfig:
    return TrainConfig(learning_rate=s["lr"], batch_size=s["batch"],
                       negatives_per_positive=s["neg_ratio"], inner_steps=s["inner_steps"],
                       seed=s["seed"], optimizer=s["optimizer"])


def _load(args, extra_dicts: Path | None = None):
    entities = relations = None
    if extra_dicts is not None and (extra_dicts / ENTITY_DICT).is_file():
        entities = Dictionary.load(extra_dicts / ENTITY_DICT)
        relations = Dictionary.load(extra_dicts / RELATION_DICT)
    return load_dataset(args.train, args.valid, args.test, entities, relations)


def _dump_dicts(data, out: Path) -> None:
    data.entities.dump(out / ENTITY_DICT)
    data.relations.dump(out / RELATION_DICT)


def _restrict(kg: KnowledgeGraph | None, n_e: int, n_r: int, split: str):
    """Drop triples whose ids the checkpoint does not cover."""
    if kg is None:
        return None
    arr = kg.triples
    ok = (arr[:, 0] < n_e) & (arr[:, 2] < n_e) & (arr[:, 1] < n_r)
    if not ok.all():
        logger.warning("%s: skipping %d triples with entities or relations unknown to the checkpoint",
                       split, int((~ok).sum()))
    return KnowledgeGraph(arr[ok], n_e, n_r)


def cmd_train(args, s, out: Path) -> dict:
    data = _load(args)
    _dump_dicts(data, out)
    est = KGEmbedding(model=s["model"], dim=s["dim"], norm=s["norm"], learning_rate=s["lr"],
                      batch_size=s["batch"], neg_ratio=s["neg_ratio"], n_steps=s["inner_steps"],
                      optimizer=s["optimizer"], random_state=s["seed"])
    est.fit(data.train, n_entities=len(data.entities), n_relations=len(data.relations))
    checkpoint.save(out / CHECKPOINT_FILE, est.state_)
    with open(out / LOSS_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, f"{v:.6f}") for i, v in enumerate(est.loss_curve_))
    final = est.loss_curve_[-1] if est.loss_curve_ else math.nan
    print(f"trained {s['model']} on {len(data.train)} triples; final loss {final:.4f}")
    return {"final_loss": final, "outputs": [CHECKPOINT_FILE, LOSS_FILE, ENTITY_DICT, RELATION_DICT]}


def cmd_mine(args, s, out: Path) -> dict:
    ckpt_dir = Path(args.checkpoint).parent if args.checkpoint else None
    data = _load(args, ckpt_dir)
    state = None
    if args.checkpoint:
        state = checkpoint.load(args.checkpoint, s["model"])
    kg = data.train
    if state is not None:
        kg = _restrict(kg, state.n_entities, state.n_relations, "train")
    mined = mine(kg, state, s["omega"], s["min_hc"], s["max_len"], s["ec_cap"], s["seed"])
    write_rules(out / RULES_FILE, mined, data.entities, data.relations)
    print(f"mined {len(mined)} rules")
    for m in select_top_k(mined, min(s["topk"], 10)):
        print(f"  Q={m.metrics.quality:.3f}  {m.rule.format(data.entities, data.relations)}")
    return {"rules": len(mined), "outputs": [RULES_FILE]}


def cmd_hybrid(args, s, out: Path) -> dict:
    data = _load(args)
    _dump_dicts(data, out)
    cfg = HybridConfig(
        omega=s["omega"], beta=s["beta"], top_k=s["topk"], n_iterations=s["iters"],
        sample_budget=s["sample_budget"], sample_fraction=s["sample_fraction"],
        train=_train_config(s), seed=s["seed"], min_head_coverage=s["min_hc"],
        max_rule_length=s["max_len"], ec_sample_cap=s["ec_cap"], patience=s["patience"],
        warm_start=s["warm_start"], pooled_metrics=s["pooled"],
    )
    scorer = make_score_function(s["model"], s["dim"], s["norm"])
    filter_kg = None
    if data.valid is not None:
        filter_kg = data.train.union(data.valid)
        if data.test is not None:
            filter_kg = filter_kg.union(data.test)
    result = run(data.train, scorer, cfg, data.valid, filter_kg)
    checkpoint.save(out / CHECKPOINT_FILE, result.state)
    write_rules(out / RULES_FILE, result.rules, data.entities, data.relations)
    write_history_csv(out / HISTORY_FILE, result.reports)
    for rep in result.reports:
        print(f"iter {rep.iteration}: rules {rep.rules_selected}/{rep.rules_mined}  "
              f"|G_T| {rep.g_t_size}  sampled {rep.sampled}  loss {rep.train_loss:.4f}  "
              f"valid MRR {rep.valid_mrr:.4f}")
    print(f"best iteration: {result.best_iteration}")
    return {"best_iteration": result.best_iteration,
            "outputs": [CHECKPOINT_FILE, RULES_FILE, HISTORY_FILE, ENTITY_DICT, RELATION_DICT]}


def cmd_eval(args, s, out: Path) -> dict:
    state = checkpoint.load(args.checkpoint, s["model"])
    data = _load(args, Path(args.checkpoint).parent)
    n_e, n_r = state.n_entities, state.n_relations
    train = _restrict(data.train, n_e, n_r, "train")
    valid = _restrict(data.valid, n_e, n_r, "valid")
    test = _restrict(data.test, n_e, n_r, "test")
    filter_kg = train
    for extra in (valid, test):
        if extra is not None:
            filter_kg = filter_kg.union(extra)
    kind = state.model.kind
    rows, outputs = [], [METRICS_FILE]
    if valid is not None and len(valid):
        rows.append(("valid", kind, evaluate(state, valid.triples, filter_kg, s["seed"], s["pooled"])))
    if test is not None and len(test):
        results = rank_triplets(state, test.triples, filter_kg, s["seed"])
        rows.append(("test", kind, summarize(results, pooled=s["pooled"])))
        write_rank_dump(out / RANKS_FILE, results, data.entities, data.relations)
        outputs.append(RANKS_FILE)
        if s["sparse_threshold"] is not None:
            subset = sparse_filter(test.triples, train, s["sparse_threshold"])
            print(f"sparse test subset (threshold {s['sparse_threshold']}): {len(subset)} triples")
            if len(subset):
                rows.append(("test_sparse", kind,
                             evaluate(state, subset, filter_kg, s["seed"], s["pooled"])))
    if not rows:
        raise RuntimeError("no evaluation triples left after matching the checkpoint")
    write_metrics_csv(out / METRICS_FILE, rows)
    for split, _, m in rows:
        print(f"{split}: MRR {m.mrr:.4f}  Hits@1 {m.hits[1]:.4f}  Hits@3 {m.hits[3]:.4f}  "
              f"Hits@10 {m.hits[10]:.4f}  ({m.n_triples} triples)")
    return {"outputs": outputs}


PRECISION_COLUMNS = ("k", "rules_used", "predictions", "correct", "precision")


def cmd_rules_eval(args, s, out: Path) -> dict:
    data = _load(args)
    mined = read_rules(args.rules, data.entities, data.relations)
    if not mined:
        print("no rules")
        return {"rules": 0, "outputs": []}
    from .hybrid import inferred_set

    rows = []
    for k in s["k_list"]:
        top = select_top_k(mined, k)
        if k > len(mined):
            print(f"k={k} exceeds the {len(mined)} available rules; evaluating all of them")
        g_t = inferred_set(data.train, [m.rule for m in top])
        correct = sum(1 for t in g_t if data.test.contains(t))
        prec = rule_precision(top, data.train, data.test)
        rows.append((k, len(top), len(g_t), correct, prec))
        shown = "undefined (no new predictions)" if math.isnan(prec) else f"{prec:.4f}"
        print(f"precision@{k}: {shown}")
    with open(out / PRECISION_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PRECISION_COLUMNS)
        for k, used, n, c, p in rows:
            w.writerow([k, used, n, c, "nan" if math.isnan(p) else f"{p:.6f}"])
    return {"rules": len(mined), "outputs": [PRECISION_FILE]}


COMMANDS = {"train": cmd_train, "mine": cmd_mine, "hybrid": cmd_hybrid, "eval": cmd_eval,
            "rules-eval": cmd_rules_eval}


def _write_manifest(out: Path, args, settings, sources, inputs, started, status, extra) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "settings": settings,
        "sources": sources,
        "seed": settings.get("seed"),
        "inputs": {name: {"path": os.path.abspath(p), "sha256": digest}
                   for name, (p, digest) in inputs.items()},
        "started": started,
        "elapsed_s": round(time.time() - started, 3),
        "status": status,
        **extra,
    }
    with open(out / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_inputs(args)
        settings, sources = resolve(args)
        _precheck(args, settings)
    except UsageError as exc:
        print(f"hybridkg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"hybridkg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    print("resolution order: defaults < config < cli", file=sys.stderr)
    for key, value in settings.items():
        print(f"  {key} = {value!r} ({sources[key]})", file=sys.stderr)

    out = Path(args.out)
    started = time.time()
    inputs = {name: (p, sha256(p)) for name, p in _inputs(args).items()}
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text(f"{args.command} started {time.ctime(started)}\n", encoding="utf-8")
    try:
        extra = COMMANDS[args.command](args, settings, out)
    except UsageError as exc:
        print(f"hybridkg: error: {exc}", file=sys.stderr)
        marker.unlink(missing_ok=True)
        return EXIT_USAGE
    except Exception as exc:  # any module failure is a runtime failure
        logger.debug("run failed", exc_info=True)
        print(f"hybridkg: {args.command} failed: {exc}", file=sys.stderr)
        try:
            _write_manifest(out, args, settings, sources, inputs, started, "failed",
                            {"error": str(exc)})
        except OSError:
            pass
        return EXIT_RUNTIME
    _write_manifest(out, args, settings, sources, inputs, started, "ok", extra)
    marker.unlink(missing_ok=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
