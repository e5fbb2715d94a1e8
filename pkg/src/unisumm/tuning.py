"""Few-shot prefix-tuning against a frozen backbone."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import derive_seed
from .errors import ConfigError, ContractError, NumericalError, UnknownTaskError
from .model import UNIVERSAL, ParameterStore, PrefixBank, PrefixParams
from .training import OptimizerConfig, TrainState, asymmetric_decay_step, collect_grads, \
    encode_pair, task_loss

INIT_KINDS = ("random", "from_task", "universal")


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "universal"
    task_id: str | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigError(f"init kind must be one of {INIT_KINDS}, got {self.kind!r}")
        if self.kind == "from_task" and not self.task_id:
            raise ConfigError("from_task initialization needs a task_id")

    @classmethod
    def parse(cls, text):
        """``random`` | ``universal`` | ``from_task:<id>``."""
        if isinstance(text, InitStrategy):
            return text
        kind, _, task = str(text).partition(":")
        return cls(kind, task or None)

    @property
    def label(self):
        return f"from_task:{self.task_id}" if self.kind == "from_task" else self.kind


@dataclass
class TuneConfig:
    shots: int = 10
    steps: int = 100
    learning_rate: float = 2e-2
    weight_decay: float = 0.01
    batch_size: int = 10
    seed: int = 0
    init: InitStrategy = field(default_factory=InitStrategy)
    warmup_frac: float = 0.1

    def validate(self):
        problems = []
        if self.shots < 1:
            problems.append("shots must be >= 1")
        if self.steps < 1:
            problems.append("steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 <= self.weight_decay < 1:
            problems.append("weight_decay must lie in [0, 1)")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        d = asdict(self)
        d["init"] = self.init.label
        return d

    def optimizer_config(self):
        return OptimizerConfig(
            learning_rate=0.0,
            prefix_learning_rate=self.learning_rate,
            weight_decay=0.0,
            prefix_weight_decay=self.weight_decay,
            warmup_steps=int(math.floor(self.warmup_frac * self.steps)),
            total_steps=self.steps,
            batch_size=self.batch_size,
            universal_prob=0.0,
        )


def init_prefix(strategy, bank, model_cfg, seed):
    """New-task prefix: seeded random, or a deep copy of a bank entry."""
    strategy = InitStrategy.parse(strategy)
    if strategy.kind == "random":
        return PrefixParams.init_random(model_cfg, seed, owner_task=None)
    source = UNIVERSAL if strategy.kind == "universal" else strategy.task_id
    if bank is None or source not in bank:
        raise UnknownTaskError(source)
    prefix = bank[source].copy(owner_task=None)
    prefix.check_compatible(model_cfg)
    return prefix


def verify_frozen(before, after):
    """True iff every parameter is bit-identical between the two stores."""
    if set(before.keys()) != set(after.keys()):
        raise ContractError("parameter key sets differ")
    for name in before:
        a = np.ascontiguousarray(before[name].data if hasattr(before[name], "data")
                                 else before[name])
        b = np.ascontiguousarray(after[name].data if hasattr(after[name], "data")
                                 else after[name])
        if a.shape != b.shape or a.tobytes() != b.tobytes():
            return False
    return True


@dataclass
class TuneResult:
    prefix: PrefixParams
    losses: list
    batch_ids: list


def _frozen_view(backbone):
    # shares arrays, never records grads on the caller's tensors
    return ParameterStore({k: ad.Tensor(t.data) for k, t in backbone.items()},
                          backbone.config, backbone.vocab)


def prefix_tune(backbone, init, shots, cfg, vocab=None, task_id="unseen"):
    """Tune only the prefix on ``shots`` with the backbone frozen.

    Args:
        backbone: ParameterStore; never modified.
        init: starting PrefixParams (copied, not mutated).
        shots: sequence of Examples (or an object with ``.examples``).
        cfg: TuneConfig. Batches walk a seeded per-epoch permutation of the
            shots; batch size is ``min(cfg.batch_size, len(shots))``.

    Returns:
        TuneResult with the tuned prefix, the per-step loss curve and the
        example ids used in every batch.
    """
    cfg.validate()
    examples = list(getattr(shots, "examples", shots))
    if not examples:
        raise ContractError("empty shot set")
    if len(examples) != cfg.shots:
        raise ContractError(f"expected {cfg.shots} shots, got {len(examples)}")
    vocab = vocab or backbone.vocab
    if vocab is None:
        raise ContractError("backbone carries no vocabulary; pass one explicitly")
    frozen = _frozen_view(backbone)
    prefix = init.copy(owner_task=task_id)
    prefix.check_compatible(backbone.config)
    prefix.requires_grad_(True)

    state = TrainState(step=0, backbone=frozen, bank=PrefixBank({task_id: prefix}),
                       seed=cfg.seed, train_backbone=False)
    opt = cfg.optimizer_config()
    pairs = [encode_pair(vocab, ex) for ex in examples]
    bsz = min(cfg.batch_size, len(examples))
    per_epoch = math.ceil(len(examples) / bsz)
    losses, batch_ids = [], []
    order = None
    for step in range(cfg.steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = np.random.default_rng(derive_seed("tune", cfg.seed, epoch)).permutation(
                len(examples))
        idx = order[pos * bsz:(pos + 1) * bsz]
        prefix.zero_grad()
        loss = task_loss(frozen, prefix, [pairs[i] for i in idx])
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(
                f"non-finite loss {value} at tuning step {step}",
                {"step": step, "task_id": task_id,
                 "example_ids": [examples[i].id for i in idx]},
            )
        ad.backward(loss)
        asymmetric_decay_step(state, collect_grads(state, task_id), opt, task_id)
        losses.append(value)
        batch_ids.append([examples[i].id for i in idx])
    prefix.requires_grad_(False)
    return TuneResult(prefix, losses, batch_ids)
