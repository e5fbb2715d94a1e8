"""The shipped synthetic suite: pre-training tasks plus held-out tasks."""

from __future__ import annotations

from .data import SyntheticTaskSpec, make_synthetic_task, synthetic_vocabulary_tokens
from .vocab import Vocabulary

PRETRAIN_SPECS = (
    (SyntheticTaskSpec("news", "lead-k", vocab_seed=11, seed=1, n_train=1600), 1200),
    (SyntheticTaskSpec("bills", "keyword-after-marker", vocab_seed=12, seed=2, marker="mk1",
                       n_train=800), 1200),
    (SyntheticTaskSpec("forum", "copy", vocab_seed=13, seed=3, n_train=1200), 1200),
)

HELDOUT_SPECS = (
    SyntheticTaskSpec("wiki", "lead-k", vocab_seed=21, seed=4, n_train=200, n_test=40),
    SyntheticTaskSpec("dialog", "keyword-after-marker", vocab_seed=22, seed=5, marker="mk1",
                      n_train=200, n_test=40),
)


def suite_vocabulary():
    return Vocabulary(synthetic_vocabulary_tokens())


def spec_by_name(name):
    for spec, _ in PRETRAIN_SPECS:
        if spec.task_id == name:
            return spec
    for spec in HELDOUT_SPECS:
        if spec.task_id == name:
            return spec
    raise KeyError(f"no synthetic task named {name!r}")


def pretrain_tasks():
    """``[(task_id, train_pool, target_size)]`` for the pre-training mixture."""
    return [(spec.task_id, make_synthetic_task(spec)[0], target) for spec, target in PRETRAIN_SPECS]


def heldout_tasks():
    """``[(train_pool, test)]`` for the held-out benchmark tasks."""
    return [make_synthetic_task(spec) for spec in HELDOUT_SPECS]
