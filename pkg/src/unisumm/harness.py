"""Few-shot benchmark protocol: shot-set sampling, sweeps and reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rouge
from .data import check_disjoint, derive_seed
from .errors import ContractError, DataError, HashMismatchError
from .model import generate
from .training import encode_pair, evaluate_loss
from .tuning import InitStrategy, TuneConfig, init_prefix, prefix_tune

logger = logging.getLogger(__name__)

METRICS = ("rouge1", "rouge2", "rougeL")


@dataclass(frozen=True)
class FewShotSet:
    task_id: str
    k: int
    set_index: int
    seed: int
    example_ids: tuple
    examples: tuple = field(default=(), repr=False, compare=False)

    def __len__(self):
        return len(self.example_ids)

    def to_dict(self):
        return {"task_id": self.task_id, "k": self.k, "set_index": self.set_index,
                "seed": self.seed, "example_ids": list(self.example_ids)}


def shot_seed(master_seed, task_id, k, set_index):
    return derive_seed("shots", master_seed, task_id, k, set_index)


def sample_shot_sets(dataset, k, num_sets=5, master_seed=0):
    """Draw ``num_sets`` independent k-shot sets from a train pool.

    Each set is a without-replacement sample seeded by
    ``(master_seed, task_id, k, set_index)``; sets may overlap each other.
    """
    if dataset.split != "train_pool":
        raise DataError(f"shots must come from a train_pool split, got {dataset.split!r}")
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(dataset) < k:
        raise DataError(f"train pool of {dataset.task_id!r} has {len(dataset)} examples, "
                        f"fewer than k={k}")
    sets = []
    for i in range(num_sets):
        seed = shot_seed(master_seed, dataset.task_id, k, i)
        idx = np.random.default_rng(seed).choice(len(dataset), size=k, replace=False)
        examples = tuple(dataset[int(j)] for j in idx)
        sets.append(FewShotSet(dataset.task_id, k, i, seed,
                               tuple(ex.id for ex in examples), examples))
    return sets


# ---------------------------------------------------------------- settings & report


@dataclass
class BenchSettings:
    """Sweep axes and per-cell tuning/decoding knobs."""

    k_values: tuple = (10, 100)
    num_sets: int = 5
    strategies: tuple = ("random", "universal", "from_task")
    from_task: str | None = None
    steps: dict = field(default_factory=lambda: {10: 100, 100: 200})
    learning_rate: float = 2e-2
    weight_decay: float = 0.01
    batch_size: int = 10
    decode: str = "greedy"
    beam_width: int = 4
    max_gen_len: int = 16
    eval_batch_size: int = 64

    def steps_for(self, k):
        steps = {int(key): int(v) for key, v in self.steps.items()}
        if k in steps:
            return steps[k]
        return steps[min(steps, key=lambda key: abs(key - k))]

    def resolved_strategies(self, bank):
        out = []
        for s in self.strategies:
            if s == "from_task":
                task = self.from_task or (bank.task_ids[0] if bank is not None and bank.task_ids
                                          else None)
                out.append(InitStrategy("from_task", task))
            else:
                out.append(InitStrategy.parse(s))
        return out

    def to_dict(self):
        d = asdict(self)
        d["k_values"] = list(self.k_values)
        d["strategies"] = list(self.strategies)
        d["steps"] = {str(k): v for k, v in self.steps.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("k_values", "strategies"):
            if key in d:
                d[key] = tuple(d[key])
        if "steps" in d:
            d["steps"] = {int(k): int(v) for k, v in d["steps"].items()}
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def cell_id(task_id, k, set_index, strategy_label):
    return f"{task_id}|k={k}|set={set_index}|init={strategy_label}"


@dataclass
class RunReport:
    cells: list
    aggregates: list
    leakage: dict
    manifest: dict = field(default_factory=dict)

    def to_dict(self):
        return {"cells": self.cells, "aggregates": self.aggregates, "leakage": self.leakage,
                "manifest": self.manifest}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["cells"], d["aggregates"], d["leakage"], d.get("manifest", {}))

    def verify_aggregates(self, tol=1e-12):
        """Largest deviation between stored aggregates and ones recomputed
        from the stored per-set cell scores."""
        worst = 0.0
        for agg in self.aggregates:
            cells = sorted(
                (c for c in self.cells
                 if c["task_id"] == agg["task_id"] and c["k"] == agg["k"]
                 and c["init"] == agg["init"] and c["status"] == "ok"),
                key=lambda c: c["set_index"])
            for metric in METRICS:
                fresh = rouge.aggregate(c["rouge"][metric]["f1"] for c in cells)
                stored = agg[metric]
                worst = max(worst, abs(fresh.mean - stored["mean"]))
                if fresh.std is not None:
                    worst = max(worst, abs(fresh.std - stored["std"]))
                elif stored["std"] is not None:
                    return math.inf
        return worst

    def mean(self, task_id, k, init, metric="rouge1"):
        for agg in self.aggregates:
            if (agg["task_id"], agg["k"], agg["init"]) == (task_id, k, init):
                return agg[metric]["mean"]
        raise KeyError((task_id, k, init))


# ---------------------------------------------------------------- sweep


def score_predictions(examples, predictions):
    """Mean RougeScore over examples; multi-reference examples average
    over their references first."""
    per_example = [rouge.score(list(ex.summary), hyp) for ex, hyp in zip(examples, predictions)]
    return rouge.mean_scores(per_example)


def predict(backbone, prefix, examples, settings, vocab=None):
    vocab = vocab or backbone.vocab
    sources = [vocab.encode(ex.source_text) for ex in examples]
    max_len = min(settings.max_gen_len, backbone.config.max_tgt_len)
    out = []
    step = settings.eval_batch_size if settings.decode == "greedy" else 1
    for i in range(0, len(sources), step):
        chunk = sources[i:i + step]
        out.extend(generate(backbone, prefix, chunk, settings.decode, max_len,
                            beam_width=settings.beam_width))
    return [vocab.decode(ids) for ids in out]


def run_cell(backbone, bank, train, test, k, set_index, strategy, settings, master_seed,
             shot_set=None):
    """Tune, generate and score one (task, k, set, init) cell."""
    task_id = train.task_id
    if shot_set is None:
        shot_set = sample_shot_sets(train, k, set_index + 1, master_seed)[set_index]
    cfg = TuneConfig(
        shots=k, steps=settings.steps_for(k), learning_rate=settings.learning_rate,
        weight_decay=settings.weight_decay, batch_size=settings.batch_size,
        seed=derive_seed("tune", master_seed, task_id, k, set_index), init=strategy)
    init = init_prefix(strategy, bank, backbone.config,
                       derive_seed("init", master_seed, task_id, k, set_index))
    result = prefix_tune(backbone, init, shot_set, cfg, task_id=task_id)
    predictions = predict(backbone, result.prefix, test.examples, settings)
    scores = score_predictions(test.examples, predictions)
    eval_loss = evaluate_loss(backbone, result.prefix,
                              [encode_pair(backbone.vocab, ex) for ex in test.examples])
    return {
        "cell": cell_id(task_id, k, set_index, strategy.label),
        "task_id": task_id, "k": k, "set_index": set_index, "init": strategy.label,
        "status": "ok", "shot_seed": shot_set.seed, "tune_seed": cfg.seed,
        "shot_ids": list(shot_set.example_ids),
        "rouge": scores.as_dict(), "eval_loss": eval_loss,
        "final_train_loss": result.losses[-1], "initial_train_loss": result.losses[0],
        "prefix_hash": result.prefix.content_hash,
    }, result.batch_ids


def run_benchmark(backbone, bank, tasks, settings, master_seed=0, run_log=None):
    """Sweep every (task, k, set_index, init strategy) cell.

    Args:
        tasks: sequence of ``(train_pool, test)`` Dataset pairs.
        run_log: optional list receiving one record per tuning batch.

    Returns:
        RunReport; failed cells are recorded with ``status="failed"``.
    """
    if bank is not None and bank.backbone_hash not in (None, backbone.content_hash):
        raise HashMismatchError("prefix bank was not trained with this backbone")
    strategies = settings.resolved_strategies(bank)
    cells, leaked = [], []
    run_log = [] if run_log is None else run_log
    for train, test in tasks:
        check_disjoint(train, test)
        test_ids = set(test.ids)
        for k in settings.k_values:
            try:
                shot_sets = sample_shot_sets(train, k, settings.num_sets, master_seed)
            except DataError as err:
                shot_sets = [err] * settings.num_sets
            for set_index, shots in enumerate(shot_sets):
                for strategy in strategies:
                    cid = cell_id(train.task_id, k, set_index, strategy.label)
                    logger.info("cell %s", cid)
                    try:
                        if isinstance(shots, Exception):
                            raise shots
                        record, batch_ids = run_cell(backbone, bank, train, test, k, set_index,
                                                     strategy, settings, master_seed, shots)
                    except Exception as err:  # noqa: BLE001 - failures are reported per cell
                        cells.append({"cell": cid, "task_id": train.task_id, "k": k,
                                      "set_index": set_index, "init": strategy.label,
                                      "status": "failed",
                                      "error": f"{type(err).__name__}: {err}"})
                        continue
                    for step, ids in enumerate(batch_ids):
                        run_log.append({"cell": cid, "step": step, "example_ids": ids})
                        leaked.extend(i for i in ids if i in test_ids)
                    cells.append(record)
    cells.sort(key=lambda c: c["cell"])
    return RunReport(cells, _aggregate_cells(cells),
                     {"test_ids_in_tuning_batches": len(leaked), "examples": sorted(set(leaked))})


def _aggregate_cells(cells):
    groups = {}
    for c in cells:
        if c["status"] == "ok":
            groups.setdefault((c["task_id"], c["k"], c["init"]), []).append(c)
    out = []
    for (task_id, k, init), members in sorted(groups.items()):
        members.sort(key=lambda c: c["set_index"])
        rec = {"task_id": task_id, "k": k, "init": init, "n_sets": len(members)}
        for metric in METRICS:
            rec[metric] = rouge.aggregate(c["rouge"][metric]["f1"] for c in members).as_dict()
        rec["eval_loss"] = rouge.aggregate(c["eval_loss"] for c in members).as_dict()
        out.append(rec)
    return out


def render_tables(report):
    """Markdown tables: mean ROUGE F1 per init strategy, and R1 std."""
    inits = sorted({a["init"] for a in report.aggregates})
    rows = sorted({(a["task_id"], a["k"]) for a in report.aggregates})
    lookup = {(a["task_id"], a["k"], a["init"]): a for a in report.aggregates}

    head = "| task | k | " + " | ".join(f"{i} R1/R2/RL" for i in inits) + " |"
    lines = ["## Mean ROUGE F1 (x100) over shot sets", "", head,
             "|" + "---|" * (2 + len(inits))]
    for task, k in rows:
        cols = []
        for i in inits:
            a = lookup.get((task, k, i))
            cols.append("failed" if a is None else "/".join(
                f"{100 * a[m]['mean']:.2f}" for m in METRICS))
        lines.append(f"| {task} | {k} | " + " | ".join(cols) + " |")

    lines += ["", "## ROUGE-1 standard deviation (x100) over shot sets", "",
              "| task | k | " + " | ".join(inits) + " |", "|" + "---|" * (2 + len(inits))]
    for task, k in rows:
        cols = []
        for i in inits:
            a = lookup.get((task, k, i))
            std = None if a is None else a["rouge1"]["std"]
            cols.append("-" if std is None else f"{100 * std:.2f}")
        lines.append(f"| {task} | {k} | " + " | ".join(cols) + " |")
    failed = [c["cell"] for c in report.cells if c["status"] != "ok"]
    if failed:
        lines += ["", f"Failed cells: {len(failed)}"] + [f"- {c}" for c in failed]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- transfer experiment


def transfer_losses(backbone, train, test, k, settings, master_seed=0, init="random",
                    bank=None):
    """Mean test NLL after prefix-tuning ``backbone`` on each k-shot set."""
    strategy = InitStrategy.parse(init)
    losses = []
    for shots in sample_shot_sets(train, k, settings.num_sets, master_seed):
        cfg = TuneConfig(shots=k, steps=settings.steps_for(k),
                         learning_rate=settings.learning_rate,
                         weight_decay=settings.weight_decay, batch_size=settings.batch_size,
                         seed=derive_seed("tune", master_seed, train.task_id, k, shots.set_index),
                         init=strategy)
        prefix0 = init_prefix(strategy, bank, backbone.config,
                              derive_seed("init", master_seed, train.task_id, k, shots.set_index))
        tuned = prefix_tune(backbone, prefix0, shots, cfg, task_id=train.task_id).prefix
        losses.append(evaluate_loss(backbone, tuned,
                                    [encode_pair(backbone.vocab, ex) for ex in test.examples]))
    return losses
