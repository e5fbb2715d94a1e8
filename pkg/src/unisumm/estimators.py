"""scikit-learn style wrappers around pre-training and prefix-tuning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Example
from .errors import ContractError, DataError
from .harness import BenchSettings, predict
from .model import ModelConfig
from .rouge import score as rouge_score
from .training import OptimizerConfig, TaskRegistry, pretrain
from .tuning import InitStrategy, TuneConfig, init_prefix, prefix_tune
from .vocab import Vocabulary


def check_documents(X, y=None):
    """Validate a list of document strings and optional parallel summaries.

    Summaries may be strings or lists of reference strings. Returns lists.
    """
    if isinstance(X, str) or not hasattr(X, "__len__"):
        raise DataError("X must be a sequence of document strings")
    X = list(X)
    if not X:
        raise DataError("X is empty")
    for i, doc in enumerate(X):
        if not isinstance(doc, str) or not doc.strip():
            raise DataError(f"X[{i}] is not a non-empty string")
    if y is None:
        return X, None
    if isinstance(y, str) or len(y) != len(X):
        raise DataError(f"X has {len(X)} documents but y has "
                        f"{'a string' if isinstance(y, str) else len(y)} summaries")
    return X, list(y)


def to_examples(X, y, prefix="ex"):
    return [Example(f"{prefix}-{i:05d}", doc, summ) for i, (doc, summ) in enumerate(zip(X, y))]


def check_task_mapping(tasks):
    """``{task_id: (X, y)}`` or ``{task_id: Dataset}`` -> ``{task_id: Dataset}``."""
    if not isinstance(tasks, dict) or not tasks:
        raise DataError("expected a non-empty mapping of task id to (X, y) or Dataset")
    out = {}
    for task_id, value in tasks.items():
        if isinstance(value, Dataset):
            out[task_id] = value
        else:
            X, y = check_documents(*value)
            out[task_id] = Dataset(task_id, "train_pool", to_examples(X, y, task_id))
    return out


class UniSummPretrainer(BaseEstimator):
    """Multi-task pre-training of a backbone and its prefix bank.

    ``fit`` takes ``{task_id: (documents, summaries)}``; every task is
    resampled to ``target_size`` examples (its own size when None).
    """

    def __init__(self, d_model=64, n_heads=4, n_layers=2, d_ff=128, prefix_len=16,
                 max_src_len=128, max_tgt_len=32, total_steps=2000, batch_size=16,
                 learning_rate=1e-3, weight_decay=0.05, prefix_weight_decay=0.01,
                 universal_prob=0.15, target_size=None, seed=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.prefix_len = prefix_len
        self.max_src_len = max_src_len
        self.max_tgt_len = max_tgt_len
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.prefix_weight_decay = prefix_weight_decay
        self.universal_prob = universal_prob
        self.target_size = target_size
        self.seed = seed

    def fit(self, X, y=None):
        datasets = check_task_mapping(X)
        vocab = Vocabulary.build(t for ds in datasets.values() for ex in ds
                                 for t in (ex.source_text, *ex.summary))
        model_cfg = ModelConfig(
            vocab_size=len(vocab), d_model=self.d_model, n_heads=self.n_heads,
            n_enc_layers=self.n_layers, n_dec_layers=self.n_layers, d_ff=self.d_ff,
            max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len,
            prefix_len=self.prefix_len, seed=self.seed)
        opt = OptimizerConfig(
            learning_rate=self.learning_rate, prefix_learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, prefix_weight_decay=self.prefix_weight_decay,
            total_steps=self.total_steps, batch_size=self.batch_size,
            universal_prob=self.universal_prob)
        registry = TaskRegistry([(t, ds, self.target_size) for t, ds in datasets.items()])
        result = pretrain(registry, model_cfg, opt, self.seed, vocab=vocab)
        self.backbone_ = result.backbone
        self.bank_ = result.bank
        self.vocab_ = vocab
        self.training_log_ = result.log
        return self


class PrefixTuningSummarizer(BaseEstimator):
    """Few-shot summarizer: tunes one prefix on ``(X, y)`` with the backbone frozen."""

    def __init__(self, backbone=None, bank=None, init="universal", steps=100,
                 learning_rate=2e-2, weight_decay=0.01, batch_size=10, decode="greedy",
                 beam_width=4, max_len=16, seed=0):
        self.backbone = backbone
        self.bank = bank
        self.init = init
        self.steps = steps
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.decode = decode
        self.beam_width = beam_width
        self.max_len = max_len
        self.seed = seed

    def _backbone(self):
        if self.backbone is None:
            raise ContractError("a pre-trained backbone is required")
        if hasattr(self.backbone, "backbone_"):
            return self.backbone.backbone_, self.backbone.bank_
        return self.backbone, self.bank

    def fit(self, X, y):
        X, y = check_documents(X, y)
        backbone, bank = self._backbone()
        strategy = InitStrategy.parse(self.init)
        cfg = TuneConfig(shots=len(X), steps=self.steps, learning_rate=self.learning_rate,
                         weight_decay=self.weight_decay, batch_size=self.batch_size,
                         seed=self.seed, init=strategy)
        start = init_prefix(strategy, bank, backbone.config, self.seed)
        result = prefix_tune(backbone, start, to_examples(X, y, "shot"), cfg)
        self.prefix_ = result.prefix
        self.loss_curve_ = np.asarray(result.losses)
        return self

    def predict(self, X):
        check_is_fitted(self, "prefix_")
        X, _ = check_documents(X)
        backbone, _ = self._backbone()
        settings = BenchSettings(decode=self.decode, beam_width=self.beam_width,
                                 max_gen_len=self.max_len)
        examples = [Example(f"q-{i}", doc, "-") for i, doc in enumerate(X)]
        return predict(backbone, self.prefix_, examples, settings)

    def score(self, X, y):
        """Mean ROUGE-1 F1 of predictions against ``y``."""
        X, y = check_documents(X, y)
        preds = self.predict(X)
        refs = [list(r) if not isinstance(r, str) else r for r in y]
        return float(np.mean([rouge_score(r, p).rouge1.f1 for r, p in zip(refs, preds)]))
