"""``vlmatch`` command line: gen, pretrain, finetune_relevance, finetune_retrieval, index, match, eval, ablation, replay.

Configuration is a JSON file of flat dotted keys (``train.steps``,
``gen.n_items``, ``encoder.dim``, ``match.k_retrieve`` ...); nested objects are
flattened. Command-line flags override the file. A run manifest written by a
previous command is also accepted as ``--config``; ``vlmatch replay MANIFEST``
re-runs the recorded command line with the recorded configuration.

Exit codes: 0 ok, 2 missing input, 3 invalid config or arguments, 4 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import harness, index as ix, pipeline
from .checkpoint import load_checkpoint
from .encoders import EncoderConfig
from .errors import FormatError, ParameterError, ValidationError
from .metrics import EvalConfig
from .synthdata import GenConfig, generate_corpus, load_corpus, save_corpus
from .trainer import TrainConfig, run_stage, write_metrics

log = logging.getLogger("vlmatch")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3, 4

# sections a command reads from the resolved config
SECTIONS = {
    "gen": ("gen",),
    "pretrain": ("train", "encoder"),
    "finetune_relevance": ("train", "encoder"),
    "finetune_retrieval": ("train", "encoder"),
    "index": ("index",),
    "match": ("match", "train"),
    "eval": ("eval",),
    "ablation": ("train", "encoder", "eval", "ablation"),
}

DEFAULTS = {
    "index.ann": True, "index.M": 8, "index.ef_construction": 64,
    "match.k_retrieve": 15, "match.k_final": 5, "match.ef_search": 32, "match.queries": "heldout",
    "match.timings": False,
    "ablation.lams": [0.0, 1.0],
    "train.holdout": 0.2,
}


class MissingInput(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- config resolution -----------------------------------------------------------------

def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not key.endswith("loss_weights"):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config {p} must hold a JSON object")
    if "command" in doc and "config" in doc:  # a run manifest
        doc = doc["config"]
    return flatten(doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(read_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v)
    for key, attr in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    wanted = SECTIONS[args.command]
    return {k: v for k, v in sorted(cfg.items()) if k == "seed" or k.split(".", 1)[0] in wanted}


def section(cfg: dict, name: str) -> dict:
    n = len(name) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(name + ".")}


def train_config(cfg: dict, stage: str) -> TrainConfig:
    d = section(cfg, "train")
    d["stage"] = stage
    d["seed"] = cfg["seed"]
    d["encoder"] = section(cfg, "encoder")
    EncoderConfig.from_dict(d["encoder"])
    unknown = set(d["encoder"]) - set(EncoderConfig().to_dict())
    if unknown:
        raise ValidationError(f"unknown encoder keys: {sorted(unknown)}")
    return TrainConfig.from_dict(d)


def gen_config(cfg: dict) -> GenConfig:
    d = section(cfg, "gen")
    unknown = set(d) - set(GenConfig().to_dict())
    if unknown:
        raise ValidationError(f"unknown gen keys: {sorted(unknown)}")
    d["seed"] = cfg["seed"]
    return GenConfig(**d)


def eval_config(cfg: dict) -> EvalConfig:
    d = section(cfg, "eval")
    if "ks" in d:
        d["ks"] = tuple(d["ks"])
    d.setdefault("seed", cfg["seed"])
    try:
        return EvalConfig(**d)
    except TypeError as exc:
        raise ValidationError(f"bad eval config: {exc}") from exc


def snapshot(io: dict, name: str, d: dict) -> None:
    """Record the fully resolved section (defaults included) for the manifest."""
    io.setdefault("resolved", {}).update(flatten({name: {k: v for k, v in d.items() if k != "seed"}}))


def snapshot_train(io: dict, tcfg: TrainConfig) -> None:
    d = tcfg.to_dict()
    d.pop("encoder")
    snapshot(io, "encoder", tcfg.encoder_config().to_dict())
    for k in ("stage", "base_checkpoint", "teacher_checkpoint"):
        d.pop(k)
    snapshot(io, "train", d)


# -- input helpers -----------------------------------------------------------------------

def need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing argument: {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


def need_dataset(path) -> Path:
    d = need(path, "dataset")
    for name in ("items.jsonl", "relevance.jsonl", "clicks.jsonl"):
        if not (d / name).exists():
            raise MissingInput(f"dataset file not found: {d / name}")
    return d


def checkpoint_encoder(params) -> EncoderConfig:
    return EncoderConfig.from_dict(params.meta.get("encoder", {}))


# -- commands ----------------------------------------------------------------------------

def cmd_gen(args, cfg, io):
    gcfg = gen_config(cfg)
    snapshot(io, "gen", gcfg.to_dict())
    out = Path(args.out)
    io["outputs"] = [str(out)]
    save_corpus(generate_corpus(gcfg), out)


def _train(args, cfg, io, stage, needs):
    data = need_dataset(args.data)
    base = need(args.base, "base checkpoint") if "base" in needs else None
    teacher = need(args.teacher, "teacher checkpoint") if "teacher" in needs else None
    tcfg = train_config(cfg, stage)
    snapshot_train(io, tcfg)
    io["inputs"] = [str(p) for p in (data, base, teacher) if p is not None]
    out = Path(args.out)
    metrics = out.with_name(out.name + ".metrics.jsonl")
    io["outputs"] = [str(out), str(metrics)]
    corpus = load_corpus(data)
    res = run_stage(tcfg, corpus, load_checkpoint(base) if base else None,
                    load_checkpoint(teacher) if teacher else None)
    res.save(out)
    write_metrics(res.log, metrics)


def cmd_pretrain(args, cfg, io):
    _train(args, cfg, io, "pretrain", ())


def cmd_finetune_relevance(args, cfg, io):
    _train(args, cfg, io, "finetune_relevance", ("base",))


def cmd_finetune_retrieval(args, cfg, io):
    _train(args, cfg, io, "finetune_retrieval", ("base", "teacher"))


def cmd_index(args, cfg, io):
    ckpt = need(args.retrieval, "retrieval checkpoint")
    data = need_dataset(args.data)
    io["inputs"] = [str(ckpt), str(data)]
    out = Path(args.out)
    emb_out = out.with_name(out.name + ".emb")
    io["outputs"] = [str(out), str(emb_out)]
    c = section(cfg, "index")
    params = load_checkpoint(ckpt)
    corpus = load_corpus(data)
    ids, vecs = pipeline.embed_catalog(corpus.ids, corpus.patches(), params, checkpoint_encoder(params))
    ix.save_embeddings(ids, vecs, emb_out)
    index = ix.build(ids, vecs, ann=bool(c["ann"]), M=int(c["M"]), ef_construction=int(c["ef_construction"]),
                     seed=cfg["seed"])
    ix.save_index(index, out)


def cmd_match(args, cfg, io):
    idx_path = need(args.index, "index")
    ret_path = need(args.retrieval, "retrieval checkpoint")
    rel_path = need(args.relevance, "relevance checkpoint")
    data = need_dataset(args.data)
    io["inputs"] = [str(p) for p in (idx_path, ret_path, rel_path, data)]
    io["outputs"] = [str(args.out)]
    m = section(cfg, "match")
    k_retrieve, k_final = int(m["k_retrieve"]), int(m["k_final"])
    if k_final > k_retrieve:
        raise ParameterError(f"k_final ({k_final}) must not exceed k_retrieve ({k_retrieve})")
    if m["queries"] not in ("heldout", "all"):
        raise ValidationError("match.queries must be 'heldout' or 'all'")
    corpus = load_corpus(data)
    retrieval, relevance = load_checkpoint(ret_path), load_checkpoint(rel_path)
    ecfg = checkpoint_encoder(retrieval)
    index = ix.load_index(idx_path)
    matcher = pipeline.build_matcher(index, {it.id: it.patches for it in corpus.items}, retrieval, relevance, ecfg)
    if m["queries"] == "all":
        queries = [int(i) for i in corpus.ids]
    else:
        t = section(cfg, "train")
        queries = sorted(harness.heldout_queries(corpus, float(t.get("holdout", 0.2)), cfg["seed"]))
    results = [pipeline.match(matcher, q, corpus.item(q).tokens, k_retrieve, k_final, int(m["ef_search"]),
                              record_timings=bool(m["timings"])) for q in queries]
    pipeline.write_report(results, args.out)


def cmd_eval(args, cfg, io):
    report = need(args.report, "match report")
    data = need_dataset(args.data)
    io["inputs"] = [str(report), str(data)]
    io["outputs"] = [str(args.out)]
    ec = eval_config(cfg)
    snapshot(io, "eval", ec.to_dict())
    metrics = harness.evaluate_report(pipeline.read_report(report), load_corpus(data), ec)
    harness.write_eval_report(metrics, ec, cfg["seed"], args.out)


def cmd_ablation(args, cfg, io):
    data = need_dataset(args.data)
    base = need(args.base, "base checkpoint")
    teacher = need(args.teacher, "teacher checkpoint")
    io["inputs"] = [str(data), str(base), str(teacher)]
    io["outputs"] = [str(args.out)]
    tcfg = train_config(cfg, "finetune_retrieval")
    ec = eval_config(cfg)
    snapshot_train(io, tcfg)
    snapshot(io, "eval", ec.to_dict())
    lams = [float(x) for x in section(cfg, "ablation")["lams"]]
    if not lams or any(x < 0 for x in lams):
        raise ValidationError("ablation.lams must be a non-empty list of non-negative numbers")
    res = harness.run_ablation(tcfg, load_corpus(data), load_checkpoint(base), load_checkpoint(teacher),
                               lams, ec)
    harness.write_eval_report({"table": res.table(), "base": res.base,
                               "arms": {f"lambda={k:g}": v for k, v in res.arms.items()}},
                              ec, cfg["seed"], args.out)


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune_relevance": cmd_finetune_relevance,
    "finetune_retrieval": cmd_finetune_retrieval,
    "index": cmd_index,
    "match": cmd_match,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
}

# flag attribute -> dotted config key
FLAG_KEYS = {
    "train.steps": "steps",
    "train.lam": "lam",
    "train.batch_size": "batch_size",
    "train.lr": "lr",
    "match.k_retrieve": "k_retrieve",
    "match.k_final": "k_final",
    "match.ef_search": "ef_search",
    "match.queries": "queries",
    "match.timings": "timings",
    "index.ann": "ann",
    "gen.n_items": "n_items",
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlmatch", description="Vision-language query-image matching toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config (flat dotted keys) or a previous run manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen", help="generate a synthetic dataset directory")
    common(sp)
    sp.add_argument("--n-items", dest="n_items", type=int)

    for name, needs in (("pretrain", ()), ("finetune_relevance", ("base",)),
                        ("finetune_retrieval", ("base", "teacher"))):
        sp = sub.add_parser(name, help=f"run the {name} stage")
        common(sp)
        sp.add_argument("--data")
        if "base" in needs:
            sp.add_argument("--base")
        if "teacher" in needs:
            sp.add_argument("--teacher")
            sp.add_argument("--lam", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--lr", type=float)

    sp = sub.add_parser("index", help="embed the catalog and build the index")
    common(sp)
    sp.add_argument("--retrieval")
    sp.add_argument("--data")
    sp.add_argument("--ann", action=argparse.BooleanOptionalAction, default=None)

    sp = sub.add_parser("match", help="two-stage matching for a query set")
    common(sp)
    sp.add_argument("--index")
    sp.add_argument("--retrieval")
    sp.add_argument("--relevance")
    sp.add_argument("--data")
    sp.add_argument("--k-retrieve", dest="k_retrieve", type=int)
    sp.add_argument("--k-final", dest="k_final", type=int)
    sp.add_argument("--ef-search", dest="ef_search", type=int)
    sp.add_argument("--queries", choices=("heldout", "all"))
    sp.add_argument("--timings", action=argparse.BooleanOptionalAction, default=None,
                    help="record wall-clock stage timings (makes the report non-reproducible)")

    sp = sub.add_parser("eval", help="metrics of a match report")
    common(sp)
    sp.add_argument("--report")
    sp.add_argument("--data")

    sp = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    sp.add_argument("manifest")

    sp = sub.add_parser("ablation", help="retrieval fine-tuning with and without distillation")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--base")
    sp.add_argument("--teacher")
    sp.add_argument("--steps", type=int)
    return p


def write_manifest(out: str, manifest: dict) -> Path:
    path = Path(str(out) + ".manifest.json")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def replay_argv(manifest_path) -> list[str]:
    """The recorded argv with its config replaced by the manifest's resolved snapshot."""
    p = Path(manifest_path)
    if not p.exists():
        raise MissingInput(f"manifest not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    argv, out, skip = [], [], False
    for tok in doc.get("argv", []):
        if skip:
            skip = False
            continue
        if tok in ("--config", "--set"):
            skip = True
            continue
        if tok.startswith(("--config=", "--set=")):
            continue
        argv.append(tok)
    if doc.get("command") not in argv:
        raise ValidationError(f"manifest {p} does not record a replayable command line")
    return argv + ["--config", str(p)]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vlmatch: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "replay":
        try:
            return main(replay_argv(args.manifest))
        except MissingInput as exc:
            print(f"vlmatch: missing input: {exc}", file=sys.stderr)
            return EXIT_MISSING
        except (ValidationError, json.JSONDecodeError) as exc:
            print(f"vlmatch: invalid manifest: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    io = {"inputs": [], "outputs": []}
    cfg = None
    status = EXIT_INTERNAL
    try:
        cfg = resolve(args)
        COMMANDS[args.command](args, cfg, io)
        status = EXIT_OK
    except MissingInput as exc:
        print(f"vlmatch: missing input: {exc}", file=sys.stderr)
        status = EXIT_MISSING
    except (UsageError, ValidationError, ParameterError, FormatError) as exc:
        print(f"vlmatch: invalid configuration or input: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is an internal invariant breach
        log.exception("internal failure")
        print(f"vlmatch: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = EXIT_INTERNAL
    if cfg is not None:
        write_manifest(args.out, {
            "command": args.command,
            "argv": argv,
            "config_path": args.config,
            "config": dict(sorted({**cfg, **io.get("resolved", {})}.items())),
            "inputs": io["inputs"],
            "outputs": io["outputs"],
            "seed": cfg["seed"],
            "duration_s": round(time.perf_counter() - start, 3),
            "exit_status": status,
        })
    return status


if __name__ == "__main__":
    sys.exit(main())
