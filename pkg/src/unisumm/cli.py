"""Command-line entry point.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 usage/config, 2 data/checkpoint, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import config as C
from .checkpoint import (
    atomic_write_text,
    load_checkpoint,
    load_train_state,
    read_header,
    save_checkpoint,
    save_train_state,
)
from .data import Dataset, load_jsonl, make_synthetic_task
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
    UnknownTaskError,
)
from .harness import predict, render_tables, run_benchmark, sample_shot_sets
from .model import PrefixParams, build_model
from .rouge import mean_scores, score
from .suite import spec_by_name
from .training import TaskRegistry, pretrain
from .tuning import init_prefix, prefix_tune, verify_frozen

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST = "manifest.json"
logger = logging.getLogger("unisumm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_jsonl(path, records):
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ---------------------------------------------------------------- commands
# each returns the list of input paths it read; outputs are whatever lands in --out


def cmd_pretrain(args, cfg, out):
    vocab = C.build_vocabulary(cfg)
    cfg = C.resolved(cfg, vocab)
    registry = TaskRegistry([(t, ds, target) for t, ds, target in C.pretrain_datasets(cfg)])
    model_cfg, opt_cfg = C.model_config(cfg), C.optimizer_config(cfg)
    state, inputs = None, []
    if args.resume:
        state = load_train_state(args.resume)
        inputs.append(args.resume)
        if state.backbone.vocab != vocab:
            raise DataError("resume state was trained with a different vocabulary")
    # the log holds only the steps run by this invocation
    with open(out / "train_log.jsonl", "w") as fh:
        result = pretrain(registry, model_cfg, opt_cfg, cfg["run"]["seed"], vocab=vocab,
                          state=state, stop_at=args.stop_at, log_fh=fh)
    save_checkpoint(out / "backbone.ckpt", result.backbone, run_config=cfg)
    save_checkpoint(out / "bank.ckpt", result.bank, result.backbone.content_hash, run_config=cfg)
    save_train_state(out / "train_state.ckpt", result.state, opt_cfg)
    atomic_write_text(out / "config.resolved.json", _json_dump(cfg))
    print(json.dumps({"step": result.state.step, "backbone_hash": result.backbone.content_hash,
                      "final_loss": result.log[-1]["loss"] if result.log else None}))
    return inputs, cfg


def _load_backbone(path):
    backbone = load_checkpoint(path)
    if read_header(path)["kind"] != "backbone":
        raise DataError(f"{path} is not a backbone checkpoint")
    return backbone


def _load_bank(path, backbone):
    if path is None:
        return None
    return load_checkpoint(path, backbone_hash=backbone.content_hash)


def cmd_tune(args, cfg, out):
    backbone = _load_backbone(args.backbone)
    bank = _load_bank(args.bank, backbone)
    shots = load_jsonl(args.shots, task_id=args.task)
    tcfg = C.tune_config(cfg, shots=len(shots))
    if tcfg.init.kind != "random" and bank is None:
        raise ConfigError(f"init {tcfg.init.label!r} needs --bank")
    init = init_prefix(tcfg.init, bank, backbone.config, tcfg.seed)
    snapshot = backbone.copy()
    result = prefix_tune(backbone, init, shots, tcfg, task_id=args.task)
    frozen = verify_frozen(snapshot, backbone)
    save_checkpoint(out / "prefix.ckpt", result.prefix, backbone.content_hash, run_config=cfg)
    _write_jsonl(out / "tune_log.jsonl",
                 [{"step": i, "loss": loss, "example_ids": ids}
                  for i, (loss, ids) in enumerate(zip(result.losses, result.batch_ids))])
    print(json.dumps({"initial_loss": result.losses[0], "final_loss": result.losses[-1],
                      "backbone_frozen": frozen}))
    return [args.backbone, args.shots] + ([args.bank] if args.bank else []), cfg


def cmd_generate(args, cfg, out):
    backbone = _load_backbone(args.backbone)
    prefix = None
    if args.prefix:
        prefix = load_checkpoint(args.prefix, backbone_hash=backbone.content_hash)
        if not isinstance(prefix, PrefixParams):
            raise DataError(f"{args.prefix} is not a single-prefix checkpoint")
    data = load_jsonl(args.input, split="test")
    preds = predict(backbone, prefix, data.examples, C.bench_settings(cfg))
    _write_jsonl(out / "predictions.jsonl",
                 [{"id": ex.id, "prediction": p} for ex, p in zip(data.examples, preds)])
    return [args.backbone, args.input] + ([args.prefix] if args.prefix else []), cfg


def cmd_score(args, cfg, out):
    refs = load_jsonl(args.refs, split="test")
    preds = {}
    with open(args.preds) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rec = json.loads(line)
                    preds[str(rec["id"])] = rec["prediction"]
                except (ValueError, KeyError, TypeError):
                    raise DataError(f"{args.preds}:{lineno}: malformed prediction") from None
    missing = [i for i in refs.ids if i not in preds]
    if missing:
        raise DataError(f"{len(missing)} reference id(s) have no prediction, e.g. {missing[0]!r}")
    per = [score(list(ex.summary), preds[ex.id]) for ex in refs]
    result = {"n": len(per), "mean": mean_scores(per).as_dict(),
              "per_example": {ex.id: s.as_dict() for ex, s in zip(refs, per)}}
    atomic_write_text(out / "scores.json", _json_dump(result))
    print(json.dumps({m: v["f1"] for m, v in result["mean"].items()}))
    return [args.refs, args.preds], cfg


def cmd_bench(args, cfg, out):
    backbone = _load_backbone(args.backbone)
    bank = _load_bank(args.bank, backbone)
    tasks = C.heldout_datasets(cfg)
    run_log = []
    report = run_benchmark(backbone, bank, tasks, C.bench_settings(cfg),
                           cfg["run"]["seed"], run_log)
    report.manifest = {"backbone_hash": backbone.content_hash,
                       "bank_hash": bank.content_hash if bank is not None else None,
                       "settings": C.bench_settings(cfg).to_dict(),
                       "master_seed": cfg["run"]["seed"]}
    atomic_write_text(out / "report.json", report.to_json())
    atomic_write_text(out / "tables.md", render_tables(report))
    _write_jsonl(out / "run_log.jsonl", run_log)
    failed = sum(c["status"] != "ok" for c in report.cells)
    print(json.dumps({"cells": len(report.cells), "failed": failed,
                      "leakage": report.leakage["test_ids_in_tuning_batches"]}))
    return [args.backbone] + ([args.bank] if args.bank else []), cfg


def cmd_sample_shots(args, cfg, out):
    pools = {train.task_id: train for train, _ in C.heldout_datasets(cfg)}
    if args.task not in pools:
        raise UnknownTaskError(args.task)
    num_sets = args.num_sets or C.bench_settings(cfg).num_sets
    sets = sample_shot_sets(pools[args.task], args.k, num_sets, cfg["run"]["seed"])
    for s in sets:
        Dataset(args.task, "train_pool", s.examples).to_jsonl(
            out / f"shots_{args.task}_k{args.k}_set{s.set_index}.jsonl")
    atomic_write_text(out / "shot_sets.json", _json_dump([s.to_dict() for s in sets]))
    return [], cfg


def cmd_make_synthetic(args, cfg, out):
    try:
        spec = spec_by_name(args.task)
    except KeyError:
        raise UnknownTaskError(args.task) from None
    train, test = make_synthetic_task(spec)
    train.to_jsonl(out / "train.jsonl")
    test.to_jsonl(out / "test.jsonl")
    return [], cfg


COMMANDS = {
    "pretrain": cmd_pretrain, "tune": cmd_tune, "generate": cmd_generate, "score": cmd_score,
    "bench": cmd_bench, "sample-shots": cmd_sample_shots, "make-synthetic": cmd_make_synthetic,
}

# options holding file paths; stored absolute so replay works from any directory
PATH_OPTIONS = ("config", "resume", "backbone", "bank", "prefix", "shots", "input", "refs",
                "preds")


def build_parser():
    parser = _Parser(prog="unisumm", description="Prefix-tuned few-shot summarization.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=True, help="output directory")
        group = p.add_argument_group("config overrides")
        for key in C.flat_keys():
            group.add_argument(f"--{key}", dest=f"ov:{key}", metavar="VALUE",
                               default=argparse.SUPPRESS)
        return p

    p = add("pretrain", "multi-task pre-training of backbone and prefix bank")
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this many total steps")

    p = add("tune", "prefix-tune a new task on a JSONL shot file")
    p.add_argument("--backbone", required=True)
    p.add_argument("--bank")
    p.add_argument("--shots", required=True)
    p.add_argument("--task", default="unseen", help="task id for the tuned prefix")

    p = add("generate", "decode summaries for a JSONL file")
    p.add_argument("--backbone", required=True)
    p.add_argument("--prefix")
    p.add_argument("--input", required=True)

    p = add("score", "ROUGE F1 of predictions against references")
    p.add_argument("--refs", required=True)
    p.add_argument("--preds", required=True)

    p = add("bench", "few-shot sweep over the held-out tasks")
    p.add_argument("--backbone", required=True)
    p.add_argument("--bank")

    p = add("sample-shots", "write k-shot sets for a held-out task")
    p.add_argument("--task", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--num-sets", type=int)

    p = add("make-synthetic", "write a synthetic task to train/test JSONL")
    p.add_argument("--task", required=True)

    p = sub.add_parser("replay", help="re-run a manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the re-run (default: temporary)")
    return parser


def _overrides(args):
    return {k[3:]: C.parse_value(v) for k, v in vars(args).items() if k.startswith("ov:")}


def _invocation(args):
    """Replayable argv without ``--out``; path options made absolute."""
    argv = [args.command]
    for key, value in sorted(vars(args).items()):
        if key in ("command", "out") or value is None or key.startswith("ov:"):
            continue
        if key in PATH_OPTIONS:
            value = str(Path(value).resolve())
        argv += [f"--{key.replace('_', '-')}", str(value)]
    for key, value in sorted(vars(args).items()):
        if key.startswith("ov:"):
            argv += [f"--{key[3:]}", value]
    return argv


def _run(args):
    started = datetime.now(timezone.utc).isoformat()
    cfg = C.load_config(args.config, _overrides(args))
    logging.getLogger("unisumm").setLevel(str(cfg["run"]["log_level"]).upper())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs, final_cfg = COMMANDS[args.command](args, cfg, out)
    if args.config:
        inputs = [args.config] + list(inputs)
    if args.command in ("pretrain", "bench", "sample-shots"):
        inputs += C.data_files(cfg)
    outputs = {p.name: sha256_file(p) for p in sorted(out.iterdir())
               if p.is_file() and p.name != MANIFEST}
    manifest = {
        "tool": "unisumm", "version": __version__, "command": args.command,
        "argv": _invocation(args), "config": final_cfg,
        "seeds": {"run.seed": final_cfg["run"]["seed"], "tune.seed": final_cfg["tune"]["seed"]},
        "inputs": {str(Path(p).resolve()): sha256_file(p) for p in inputs},
        "outputs": outputs, "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    atomic_write_text(out / MANIFEST, _json_dump(manifest))
    return EXIT_OK


def _replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists() or sha256_file(path) != digest:
            raise DataError(f"replay input changed or missing: {path}")
    tmp = None
    out = args.out
    if out is None:
        tmp = tempfile.mkdtemp(prefix="unisumm-replay-")
        out = tmp
    try:
        code = main(manifest["argv"] + ["--out", str(out)])
        if code != EXIT_OK:
            return code
        fresh = json.loads((Path(out) / MANIFEST).read_text())["outputs"]
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    expected = manifest["outputs"]
    mismatches = sorted(k for k in set(expected) | set(fresh) if expected.get(k) != fresh.get(k))
    print(json.dumps({"identical": not mismatches, "compared": len(expected),
                      "mismatches": mismatches}))
    return EXIT_OK if not mismatches else EXIT_DATA


def _error(code, err, extra=None):
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    if extra:
        payload.update(extra)
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None):
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "replay":
            return _replay(args)
        return _run(args)
    except (UsageError, ConfigError, ContractError, UnknownTaskError) as err:
        extra = {"violations": err.violations} if isinstance(err, ConfigError) else None
        return _error(EXIT_USAGE, err, extra)
    except NumericalError as err:
        return _error(EXIT_NUMERICAL, err, {"diagnostics": err.diagnostics})
    except (DataError, CheckpointError, DimensionError, FileNotFoundError,
            IsADirectoryError) as err:
        return _error(EXIT_DATA, err)


if __name__ == "__main__":
    sys.exit(main())
