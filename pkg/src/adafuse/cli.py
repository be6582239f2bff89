"""Command-line pipeline: ``gen-data`` -> ``train`` -> ``eval`` -> ``compare``.

Each stage reads and writes plain files so stages can be rerun or swapped
independently. Exit codes: 0 ok, 2 config error, 3 I/O error, 4 data-format
error. Diagnostics go to stderr; stdout only carries JSON summaries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import METHODS, EvalReport, evaluate_methods
from .exceptions import AdaFuseError, CheckpointError, ConfigError, DataFormatError
from .model import DEFAULT_STATIC_WEIGHT, FusionConfig
from .retrieval import EmbeddingIndex
from .synthgen import (
    GenConfig,
    generate_corpus,
    generate_dialogues,
    read_corpus,
    read_dialogues,
    read_manifest,
    write_corpus,
    write_dialogues,
    write_dialogues_binary,
    write_manifest,
)
from .training import TrainConfig, train

logger = logging.getLogger("adafuse")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4

CORPUS_FILE = "corpus.adec"
MANIFEST_FILE = "corpus_manifest.jsonl"
CHECKPOINT_FILE = "checkpoint.adfs"
TRAIN_LOG_FILE = "train_log.jsonl"


def dialogue_file(split: str, binary: bool = False) -> str:
    return f"dialogues_{split}.{'addl' if binary else 'jsonl'}"


DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "gen": GenConfig().to_dict(),
    "fusion": FusionConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "eval": {"k": 10, "static_w": DEFAULT_STATIC_WEIGHT, "methods": list(METHODS), "split": "test"},
    "paths": {"out": ".", "data": None, "checkpoint": None},
    "threads": 1,
}


# ---------------------------------------------------------------------------
# config resolution


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_RUN_CONFIG))
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        cfg = _merge(cfg, file_cfg)

    # CLI flags win over the file
    for section, key, attr in _FLAG_MAP:
        value = getattr(args, attr, None)
        if value is not None:
            if section is None:
                cfg[key] = value
            else:
                cfg[section][key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["gen"]["seed"] = cfg["seed"]
    cfg["train"]["seed"] = cfg["seed"]
    if getattr(args, "methods", None):
        cfg["eval"]["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if cfg["paths"]["data"] is None:
        cfg["paths"]["data"] = cfg["paths"]["out"]
    if cfg["paths"]["checkpoint"] is None:
        cfg["paths"]["checkpoint"] = os.path.join(cfg["paths"]["data"], CHECKPOINT_FILE)
    # validate eagerly so bad values surface as config errors
    GenConfig.from_dict(cfg["gen"])
    FusionConfig.from_dict(cfg["fusion"])
    TrainConfig.from_dict(cfg["train"])
    if cfg["fusion"]["d"] != cfg["gen"]["dim"]:
        raise ConfigError(f"fusion.d={cfg['fusion']['d']} must equal gen.dim={cfg['gen']['dim']}")
    ev = cfg["eval"]
    if int(ev["k"]) < 1:
        raise ConfigError("eval.k must be >= 1")
    if not 0.0 <= float(ev["static_w"]) <= 1.0:
        raise ConfigError("eval.static_w must lie in [0, 1]")
    bad = set(ev["methods"]) - set(METHODS)
    if bad or not ev["methods"]:
        raise ConfigError(f"unknown methods {sorted(bad)}; choose from {list(METHODS)}")
    if ev["split"] not in ("train", "test"):
        raise ConfigError("eval.split must be 'train' or 'test'")
    if int(cfg["threads"]) < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


# (section, key, argparse dest); section None means top level
_FLAG_MAP = [
    ("paths", "out", "out"),
    ("paths", "data", "data"),
    ("paths", "checkpoint", "checkpoint"),
    (None, "threads", "threads"),
    ("gen", "corpus_size", "corpus_size"),
    ("gen", "dim", "dim"),
    ("gen", "dialogues", "dialogues"),
    ("gen", "rounds", "rounds"),
    ("gen", "sigma0", "sigma0"),
    ("gen", "gamma", "gamma"),
    ("gen", "rho", "rho"),
    ("gen", "sigma_good", "sigma_good"),
    ("fusion", "d", "dim"),
    ("fusion", "d_proj", "d_proj"),
    ("fusion", "d_mid", "d_mid"),
    ("fusion", "d_hidden", "d_hidden"),
    ("fusion", "n_experts", "n_experts"),
    ("fusion", "d_router", "d_router"),
    ("train", "learning_rate", "lr"),
    ("train", "temperature", "temperature"),
    ("train", "batch_size", "batch_size"),
    ("train", "epochs", "epochs"),
    ("train", "clip_norm", "clip_norm"),
    ("train", "save_every", "save_every"),
    ("eval", "k", "k"),
    ("eval", "static_w", "static_w"),
    ("eval", "split", "split"),
]


def _write_resolved(cfg: dict) -> None:
    path = os.path.join(cfg["paths"]["out"], "resolved_config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(cfg: dict) -> str:
    out = cfg["paths"]["out"]
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out!r} is not writable")
    return out


def _load_data(cfg: dict, split: str):
    data = cfg["paths"]["data"]
    corpus = read_corpus(os.path.join(data, CORPUS_FILE))
    ids = read_manifest(os.path.join(data, MANIFEST_FILE))
    if len(ids) != corpus.shape[0]:
        raise DataFormatError("corpus manifest and matrix disagree on row count")
    dialogues = read_dialogues(os.path.join(data, dialogue_file(split)))
    if not dialogues:
        raise DataFormatError(f"no dialogues in the {split} split")
    d = corpus.shape[1]
    for dlg in dialogues:
        if dlg.z_T.shape[1] != d:
            raise DataFormatError(f"dialogue {dlg.dialogue_id} has dim {dlg.z_T.shape[1]}, corpus has {d}")
    return ids, corpus, dialogues


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, binary: bool = False) -> dict:
    out = _ensure_out(cfg)
    gen = GenConfig.from_dict(cfg["gen"])
    ids, corpus = generate_corpus(gen)
    write_corpus(os.path.join(out, CORPUS_FILE), corpus)
    write_manifest(os.path.join(out, MANIFEST_FILE), ids)
    files = [CORPUS_FILE, MANIFEST_FILE]
    for split in ("train", "test"):
        dialogues = generate_dialogues(gen, corpus, split)
        write_dialogues(os.path.join(out, dialogue_file(split)), dialogues)
        files.append(dialogue_file(split))
        if binary:
            write_dialogues_binary(os.path.join(out, dialogue_file(split, True)), dialogues)
            files.append(dialogue_file(split, True))
    _write_resolved(cfg)
    return {"command": "gen-data", "out": out, "files": files}


def cmd_train(cfg: dict) -> dict:
    out = _ensure_out(cfg)
    ids, corpus, dialogues = _load_data(cfg, "train")
    fusion = FusionConfig.from_dict(cfg["fusion"])
    tc = TrainConfig.from_dict(cfg["train"])
    log_path = os.path.join(out, TRAIN_LOG_FILE)
    ckpt_path = os.path.join(out, CHECKPOINT_FILE)

    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(epoch, mean_loss, params, wall_ms):
            log.write(json.dumps({"epoch": epoch, "mean_loss": mean_loss, "wall_ms": round(wall_ms, 3)}) + "\n")
            log.flush()
            if tc.save_every and epoch % tc.save_every == 0:
                save_checkpoint(params, os.path.join(out, f"checkpoint_epoch{epoch:04d}.adfs"))

        params, curve = train(dialogues, corpus, fusion, tc, corpus_ids=ids, on_epoch=on_epoch)
    save_checkpoint(params, ckpt_path)
    _write_resolved(cfg)
    return {"command": "train", "checkpoint": ckpt_path, "epochs": len(curve),
            "final_loss": curve[-1] if curve else None}


def cmd_eval(cfg: dict) -> dict:
    out = _ensure_out(cfg)
    ev = cfg["eval"]
    ids, corpus, dialogues = _load_data(cfg, ev["split"])
    params = None
    if "adafuse" in ev["methods"]:
        params, _ = load_checkpoint(cfg["paths"]["checkpoint"])
        if params.config.d != corpus.shape[1]:
            raise DataFormatError(f"checkpoint expects d={params.config.d}, data has d={corpus.shape[1]}")
    index = EmbeddingIndex(ids, corpus)
    report = evaluate_methods(index, dialogues, params, static_w=float(ev["static_w"]), k=int(ev["k"]),
                              methods=ev["methods"])
    files = report.write(out)
    _write_resolved(cfg)
    return {"command": "eval", "out": out, "files": files}


def load_report(path) -> EvalReport:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    return EvalReport.from_dict(data)


def _sign_consistent(deltas) -> str | None:
    if deltas and all(x > 0 for x in deltas):
        return "positive"
    if deltas and all(x < 0 for x in deltas):
        return "negative"
    return None


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Per-round ``b - a`` deltas of Hits@K and degradation rate."""
    if a.n_rounds != b.n_rounds:
        raise DataFormatError(f"round counts differ: {a.n_rounds} vs {b.n_rounds}")
    if a.k != b.k:
        raise DataFormatError(f"reports use different k: {a.k} vs {b.k}")
    result = {"n_rounds": a.n_rounds, "k": a.k, "hits_at_k": {}, "degradation_rate": {}}
    for m in [m for m in a.methods if m in b.methods]:
        deltas = [y - x for x, y in zip(a.hits[m], b.hits[m])]
        result["hits_at_k"][m] = {"delta": deltas, "sign_consistent": _sign_consistent(deltas)}
    for m in [m for m in a.degradation if m in b.degradation]:
        deltas = [y - x for x, y in zip(a.degradation[m]["rate"], b.degradation[m]["rate"])]
        result["degradation_rate"][m] = {"delta": deltas, "sign_consistent": _sign_consistent(deltas)}
    return result


def cmd_compare(path_a, path_b) -> dict:
    return compare_reports(load_report(path_a), load_report(path_b))


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads (default 1)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory holding gen-data output (default: --out)")
    p.add_argument("--dim", type=int)
    p.add_argument("--d-proj", type=int)
    p.add_argument("--d-mid", type=int)
    p.add_argument("--d-hidden", type=int)
    p.add_argument("--n-experts", type=int)
    p.add_argument("--d-router", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adafuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus and dialogues")
    _common(g)
    g.add_argument("--corpus-size", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--dialogues", type=int)
    g.add_argument("--rounds", type=int)
    g.add_argument("--sigma0", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--sigma-good", type=float)
    g.add_argument("--binary", action="store_true", help="also write binary dialogue files")

    t = sub.add_parser("train", help="train the fusion module")
    _common(t)
    _model_flags(t)
    t.add_argument("--lr", type=float)
    t.add_argument("--temperature", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--save-every", type=int)

    e = sub.add_parser("eval", help="evaluate fusion methods over all rounds")
    _common(e)
    _model_flags(e)
    e.add_argument("--checkpoint")
    e.add_argument("--k", type=int)
    e.add_argument("--static-w", type=float)
    e.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    e.add_argument("--split", choices=["train", "test"])

    c = sub.add_parser("compare", help="per-round deltas between two eval reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("ADAFUSE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            result = cmd_compare(args.report_a, args.report_b)
        else:
            cfg = resolve_config(args)
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(cfg["threads"])):
                if args.command == "gen-data":
                    result = cmd_gen_data(cfg, binary=args.binary)
                elif args.command == "train":
                    result = cmd_train(cfg)
                else:
                    result = cmd_eval(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError) as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdaFuseError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    json.dump(result, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
