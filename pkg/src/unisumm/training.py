"""Multi-task pre-training: balancing, prefix dispatch, asymmetric decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import derive_seed
from .errors import ConfigError, ContractError, DataError, NumericalError, UnknownTaskError
from .model import UNIVERSAL, PrefixBank, PrefixParams, build_model, forward_with_targets
from .vocab import PAD_ID, Vocabulary

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("adaptive", "plain-sgd")


@dataclass
class OptimizerConfig:
    """Step-size, decay and dispatch settings for the two parameter families.

    ``weight_decay`` (d_l) applies to the backbone and ``prefix_weight_decay``
    (d_p) to prefixes. ``warmup_steps=None`` means 5% of ``total_steps``.
    """

    learning_rate: float = 1e-3
    prefix_learning_rate: float = 1e-3
    weight_decay: float = 0.05
    prefix_weight_decay: float = 0.01
    warmup_steps: int | None = None
    total_steps: int = 2000
    batch_size: int = 16
    universal_prob: float = 0.15
    kind: str = "adaptive"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.05 * self.total_steps))

    def violations(self):
        out = []
        if not 0 <= self.weight_decay < 1 or not 0 <= self.prefix_weight_decay < 1:
            out.append("weight decays must lie in [0, 1)")
        if not 0 <= self.universal_prob <= 1:
            out.append("universal_prob must lie in [0, 1]")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            out.append("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.kind not in OPTIMIZER_KINDS:
            out.append(f"optimizer kind must be one of {OPTIMIZER_KINDS}")
        if self.learning_rate < 0 or self.prefix_learning_rate < 0:
            out.append("learning rates must be non-negative")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(step, base, warmup_steps, total_steps):
    """Linear warmup to ``base`` then linear decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base
    return base * max(0.0, (total_steps - step) / span)


# ---------------------------------------------------------------- registry & balancing


@dataclass
class TaskEntry:
    task_id: str
    dataset: object
    target_size: int

    @property
    def raw_size(self):
        return len(self.dataset)


class TaskRegistry:
    """Ordered set of pre-training tasks with their balanced target sizes."""

    def __init__(self, entries=()):
        self.entries = []
        for e in entries:
            self.add(*e) if isinstance(e, tuple) else self.add(e.task_id, e.dataset, e.target_size)

    def add(self, task_id, dataset, target_size=None):
        if any(e.task_id == task_id for e in self.entries):
            raise ConfigError(f"duplicate task id {task_id!r}")
        target = len(dataset) if target_size is None else int(target_size)
        if target < 1:
            raise ConfigError(f"target size for {task_id!r} must be >= 1")
        self.entries.append(TaskEntry(task_id, dataset, target))
        return self

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, task_id):
        return any(e.task_id == task_id for e in self.entries)

    @property
    def task_ids(self):
        return [e.task_id for e in self.entries]

    def get(self, task_id):
        for e in self.entries:
            if e.task_id == task_id:
                return e
        raise UnknownTaskError(task_id)


def balance_datasets(registry, seed):
    """Resample every task to exactly its target size and shuffle the union.

    Down-sampling draws a seeded subset without replacement; up-sampling
    repeats the whole dataset ``target // raw`` times and adds a seeded
    without-replacement remainder, so multiplicities differ by at most one.

    Returns:
        list of ``(task_id, item)`` pairs in seeded shuffled order.
    """
    corpus = []
    for entry in registry:
        raw = entry.raw_size
        if raw == 0:
            raise DataError(f"task {entry.task_id!r} has an empty dataset")
        rng = np.random.default_rng(derive_seed("balance", seed, entry.task_id))
        target = entry.target_size
        if target <= raw:
            idx = rng.choice(raw, size=target, replace=False)
        else:
            reps, rem = divmod(target, raw)
            idx = np.concatenate([np.tile(np.arange(raw), reps),
                                  rng.choice(raw, size=rem, replace=False)])
        corpus.extend((entry.task_id, entry.dataset[int(i)]) for i in idx)
    order = np.random.default_rng(derive_seed("shuffle", seed)).permutation(len(corpus))
    return [corpus[i] for i in order]


def make_batches(corpus, batch_size, task_order):
    """Chunk a balanced corpus into task-homogeneous batches.

    Within a task, items keep their corpus order; the last chunk of a task may
    be short.
    """
    by_task = {t: [] for t in task_order}
    for task_id, item in corpus:
        by_task[task_id].append(item)
    batches = []
    for task_id in task_order:
        items = by_task[task_id]
        for i in range(0, len(items), batch_size):
            batches.append((task_id, items[i:i + batch_size]))
    return batches


def batch_for_step(batches, step, seed):
    """Batch drawn at ``step``: epochs walk a fresh seeded permutation."""
    epoch, pos = divmod(step, len(batches))
    order = np.random.default_rng(derive_seed("epoch", seed, epoch)).permutation(len(batches))
    return batches[int(order[pos])]


def select_prefix(task_id, rng, universal_prob=0.15, registry=None):
    """UNIVERSAL with probability ``universal_prob``, else ``task_id``.

    Consumes exactly one uniform draw from ``rng`` regardless of outcome.
    """
    if registry is not None and task_id not in registry:
        raise UnknownTaskError(task_id)
    u = rng.random()
    return UNIVERSAL if u < universal_prob else task_id


# ---------------------------------------------------------------- loss


def encode_pair(vocab, example):
    return vocab.encode(example.source_text), vocab.encode(example.target_text)


def task_loss(params, prefix, batch, warn_log=None, training=False, rng=None):
    """Mean token-level NLL of targets given sources under teacher forcing.

    ``batch`` is a list of ``(src_ids, tgt_ids)`` pairs from one task.
    """
    if not batch:
        raise ContractError("empty batch")
    src = [s for s, _ in batch]
    tgt = [t for _, t in batch]
    logits, targets = forward_with_targets(params, prefix, src, tgt, training=training,
                                           rng=rng, warn_log=warn_log)
    return ad.cross_entropy(logits, targets, ignore_index=PAD_ID)


def evaluate_loss(params, prefix, pairs, batch_size=32):
    """Token-weighted mean NLL over ``pairs`` (no tape)."""
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            n = sum(min(len(t), params.config.max_tgt_len - 1) + 1 for _, t in chunk)
            total += task_loss(params, prefix, chunk).item() * n
            count += n
    return total / count


# ---------------------------------------------------------------- optimizer


def _rng_state(rng):
    return json.loads(json.dumps(rng.bit_generator.state))


def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


@dataclass
class TrainState:
    """Everything needed to resume training bit-identically."""

    step: int
    backbone: object
    bank: PrefixBank
    seed: int = 0
    moments: dict = field(default_factory=dict)
    dispatch_rng: object = None
    dropout_rng: object = None
    train_backbone: bool = True

    def rng_states(self):
        return {"dispatch": _rng_state(self.dispatch_rng), "dropout": _rng_state(self.dropout_rng)}

    def set_rng_states(self, states):
        self.dispatch_rng = _rng_from_state(states["dispatch"])
        self.dropout_rng = _rng_from_state(states["dropout"])


def collect_grads(state, prefix_id):
    """Gather leaf gradients into the flat key scheme the optimizer expects."""
    grads = {}
    if state.train_backbone:
        for name, t in state.backbone.items():
            if t.grad is not None:
                grads[f"backbone/{name}"] = t.grad
    for name, t in state.bank[prefix_id].items():
        if t.grad is not None:
            grads[f"prefix/{prefix_id}/{name}"] = t.grad
    return grads


def asymmetric_decay_step(state, grads, cfg, prefix_id):
    """Apply one decoupled-decay update to the backbone and one prefix.

    plain-sgd:  theta <- (1 - d) * theta - lr * g
    adaptive:   theta <- (1 - lr * d) * theta - lr * m_hat / (sqrt(v_hat) + eps)

    with d = ``cfg.weight_decay`` for backbone keys and
    ``cfg.prefix_weight_decay`` for prefix keys, and lr from :func:`lr_at`.
    ``grads`` maps ``backbone/<name>`` and ``prefix/<prefix_id>/<block>`` to
    arrays; every trainable key must be present.
    """
    step = state.step
    lr_b = lr_at(step, cfg.learning_rate, cfg.warmup_steps, cfg.total_steps)
    lr_p = lr_at(step, cfg.prefix_learning_rate, cfg.warmup_steps, cfg.total_steps)
    targets = []
    if state.train_backbone:
        targets += [(f"backbone/{n}", t, cfg.weight_decay, lr_b) for n, t in state.backbone.items()]
    targets += [(f"prefix/{prefix_id}/{n}", t, cfg.prefix_weight_decay, lr_p)
                for n, t in state.bank[prefix_id].items()]
    missing = [key for key, *_ in targets if key not in grads]
    if missing:
        raise ContractError(f"missing gradients for {len(missing)} trainable parameter(s), "
                            f"e.g. {missing[0]}")

    for key, tensor, decay, lr in targets:
        g = grads[key]
        if cfg.kind == "plain-sgd":
            tensor.data = (1.0 - decay) * tensor.data - lr * g
            continue
        m, v, t = state.moments.get(key, (np.zeros_like(g), np.zeros_like(g), 0))
        t += 1
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        tensor.data = (1.0 - lr * decay) * tensor.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        state.moments[key] = (m, v, t)
    state.step += 1
    return state


# ---------------------------------------------------------------- pre-training loop


@dataclass
class PretrainResult:
    backbone: object
    bank: PrefixBank
    log: list
    state: TrainState


def init_train_state(registry, model_cfg, seed, vocab=None):
    """Fresh backbone, one random prefix per task plus UNIVERSAL."""
    backbone = build_model(model_cfg, derive_seed("backbone", seed), vocab=vocab)
    backbone.requires_grad_(True)
    bank = PrefixBank()
    for task_id in registry.task_ids + [UNIVERSAL]:
        bank[task_id] = PrefixParams.init_random(
            model_cfg, derive_seed("prefix", seed, task_id), owner_task=task_id)
    return TrainState(
        step=0, backbone=backbone, bank=bank, seed=seed,
        dispatch_rng=np.random.default_rng(derive_seed("dispatch", seed)),
        dropout_rng=np.random.default_rng(derive_seed("dropout", seed)),
    )


class PretrainData:
    """Balanced, tokenized, batched corpus; rebuilt identically on resume."""

    def __init__(self, registry, vocab, batch_size, seed):
        self.registry = registry
        corpus = balance_datasets(registry, seed)
        self._cache = {}
        self.batches = make_batches(corpus, batch_size, registry.task_ids)
        self.seed = seed
        self.vocab = vocab

    def pairs(self, items):
        out = []
        for ex in items:
            key = id(ex)
            if key not in self._cache:
                self._cache[key] = encode_pair(self.vocab, ex)
            out.append(self._cache[key])
        return out

    def batch(self, step):
        task_id, items = batch_for_step(self.batches, step, self.seed)
        return task_id, items, self.pairs(items)


def train_steps(state, data, opt_cfg, until, log=None, log_fh=None):
    """Advance ``state`` to step ``until`` (exclusive upper bound on steps run)."""
    opt_cfg.validate()
    log = [] if log is None else log
    for p in state.bank.values():
        p.requires_grad_(True)
    state.backbone.requires_grad_(state.train_backbone)
    while state.step < until:
        step = state.step
        task_id, items, pairs = data.batch(step)
        prefix_id = select_prefix(task_id, state.dispatch_rng, opt_cfg.universal_prob)
        prefix = state.bank[prefix_id]
        state.backbone.zero_grad()
        prefix.zero_grad()
        loss = task_loss(state.backbone, prefix, pairs, training=True, rng=state.dropout_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss {value} at step {step}",
                {"step": step, "task_id": task_id, "prefix_id": prefix_id,
                 "example_ids": [getattr(ex, "id", None) for ex in items]},
            )
        ad.backward(loss)
        lr = lr_at(step, opt_cfg.learning_rate, opt_cfg.warmup_steps, opt_cfg.total_steps)
        asymmetric_decay_step(state, collect_grads(state, prefix_id), opt_cfg, prefix_id)
        rec = {"step": step, "task_id": task_id, "prefix_id": prefix_id, "loss": value, "lr": lr}
        log.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
        if step % 100 == 0:
            logger.info("step %d task %s prefix %s loss %.4f", step, task_id, prefix_id, value)
    return log


def pretrain(registry, model_cfg, opt_cfg, seed, vocab=None, state=None, stop_at=None,
             log_fh=None):
    """Run multi-task pre-training; pass ``state`` to resume.

    Returns a :class:`PretrainResult` holding the backbone, the prefix bank
    (one prefix per task plus UNIVERSAL), the training-curve log and the
    resumable state.
    """
    if len(registry) == 0:
        raise ContractError("register at least one task before pre-training")
    model_cfg.validate()
    opt_cfg.validate()
    if state is None:
        if vocab is None:
            vocab = Vocabulary.build(
                text for e in registry for ex in e.dataset for text in (ex.source_text, ex.target_text))
        if model_cfg.vocab_size < len(vocab):
            raise ConfigError(f"vocab_size={model_cfg.vocab_size} < vocabulary size {len(vocab)}")
        state = init_train_state(registry, model_cfg, seed, vocab)
    data = PretrainData(registry, state.backbone.vocab, opt_cfg.batch_size, seed)
    until = opt_cfg.total_steps if stop_at is None else min(stop_at, opt_cfg.total_steps)
    log = train_steps(state, data, opt_cfg, until, log_fh=log_fh)
    state.backbone.requires_grad_(False)
    for p in state.bank.values():
        p.requires_grad_(False)
    state.bank.backbone_hash = state.backbone.content_hash
    return PretrainResult(state.backbone, state.bank, log, state)
