"""Encoder-decoder transformer whose attention layers accept prefix keys/values.

Layout: pre-LayerNorm blocks, sinusoidal positions, output projection tied to
the token embedding. A prefix contributes ``prefix_len`` extra key/value rows
(already in projected space) to every attention layer: encoder
self-attention, decoder self-attention and decoder cross-attention. Prefix
rows carry no position and are visible to every query, causal or not.
"""

from __future__ import annotations

import copy
import hashlib
import math
import warnings
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, UnknownTaskError
from .vocab import BOS_ID, EOS_ID, PAD_ID

UNIVERSAL = "__universal__"
MASK_VALUE = -1e30


@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_src_len: int = 128
    max_tgt_len: int = 32
    prefix_len: int = 16
    dropout_rate: float = 0.0
    seed: int = 0
    prefix_init_std: float = 0.5

    def violations(self):
        out = []
        for name in ("vocab_size", "d_model", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            out.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 1:
            out.append("need n_enc_layers >= 0 and n_dec_layers >= 1")
        if self.prefix_len < 0:
            out.append("prefix_len must be >= 0")
        if self.max_src_len < 1 or self.max_tgt_len < 1:
            out.append("max_src_len and max_tgt_len must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append("dropout_rate must lie in [0, 1)")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def content_hash(named_arrays):
    """sha256 over sorted (name, shape, little-endian float64 bytes)."""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class ParameterStore(Mapping):
    """Fixed set of named backbone tensors plus the config that shaped them."""

    def __init__(self, tensors, config, vocab=None):
        self._tensors = dict(tensors)
        self.config = config
        self.vocab = vocab

    def __getitem__(self, key):
        return self._tensors[key]

    def __setitem__(self, key, value):
        if key not in self._tensors:
            raise KeyError(f"parameter set is closed; cannot add {key!r}")
        if value.shape != self._tensors[key].shape:
            raise DimensionError(f"{key}: shape {value.shape} != {self._tensors[key].shape}")
        self._tensors[key] = value

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    @property
    def content_hash(self):
        return content_hash({k: t.data for k, t in self._tensors.items()})

    def arrays(self):
        return {k: t.data for k, t in self._tensors.items()}

    def copy(self):
        return ParameterStore(
            {k: Tensor(t.data.copy(), t.requires_grad) for k, t in self._tensors.items()},
            copy.deepcopy(self.config),
            self.vocab,
        )

    def requires_grad_(self, flag=True):
        for t in self._tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None


def prefix_block_names(config):
    names = []
    for layer in range(config.n_enc_layers):
        names += [f"enc.{layer}.self.k", f"enc.{layer}.self.v"]
    for layer in range(config.n_dec_layers):
        names += [f"dec.{layer}.self.k", f"dec.{layer}.self.v",
                  f"dec.{layer}.cross.k", f"dec.{layer}.cross.v"]
    return names


class PrefixParams(Mapping):
    """Per-layer prefix key/value blocks, each of shape [prefix_len, d_model]."""

    def __init__(self, blocks, owner_task=None):
        self._blocks = dict(blocks)
        self.owner_task = owner_task

    @classmethod
    def init_random(cls, config, seed, owner_task=None, std=None):
        rng = np.random.default_rng(seed)
        std = config.prefix_init_std if std is None else std
        shape = (config.prefix_len, config.d_model)
        return cls(
            {n: Tensor(rng.normal(0.0, std, size=shape)) for n in prefix_block_names(config)},
            owner_task,
        )

    def __getitem__(self, key):
        return self._blocks[key]

    def __setitem__(self, key, value):
        if key not in self._blocks:
            raise KeyError(f"unknown prefix block {key!r}")
        self._blocks[key] = value

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    @property
    def prefix_len(self):
        first = next(iter(self._blocks.values()), None)
        return 0 if first is None else first.shape[0]

    def check_compatible(self, config):
        expected = set(prefix_block_names(config))
        if set(self._blocks) != expected:
            raise DimensionError("prefix blocks do not match the model's layer layout")
        for name, t in self._blocks.items():
            if t.shape != (config.prefix_len, config.d_model):
                raise DimensionError(
                    f"prefix block {name} has shape {t.shape}, "
                    f"expected {(config.prefix_len, config.d_model)}"
                )

    @property
    def content_hash(self):
        return content_hash({k: t.data for k, t in self._blocks.items()})

    def arrays(self):
        return {k: t.data for k, t in self._blocks.items()}

    def copy(self, owner_task=None):
        return PrefixParams(
            {k: Tensor(t.data.copy()) for k, t in self._blocks.items()},
            self.owner_task if owner_task is None else owner_task,
        )

    def requires_grad_(self, flag=True):
        for t in self._blocks.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self):
        for t in self._blocks.values():
            t.grad = None


class PrefixBank(Mapping):
    """task id -> PrefixParams. Missing ids raise :class:`UnknownTaskError`."""

    def __init__(self, prefixes=None, backbone_hash=None):
        self._prefixes = dict(prefixes or {})
        self.backbone_hash = backbone_hash

    def __getitem__(self, task_id):
        try:
            return self._prefixes[task_id]
        except KeyError:
            raise UnknownTaskError(task_id) from None

    def __setitem__(self, task_id, prefix):
        self._prefixes[task_id] = prefix

    def __iter__(self):
        return iter(self._prefixes)

    def __len__(self):
        return len(self._prefixes)

    @property
    def task_ids(self):
        return sorted(t for t in self._prefixes if t != UNIVERSAL)

    @property
    def content_hash(self):
        h = hashlib.sha256()
        for task in sorted(self._prefixes):
            h.update(task.encode())
            h.update(self._prefixes[task].content_hash.encode())
        return h.hexdigest()


# ---------------------------------------------------------------- construction


def backbone_shapes(cfg):
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (v, d)}

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (d, d)

    def ln(prefix):
        shapes[f"{prefix}.gamma"] = (d,)
        shapes[f"{prefix}.beta"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for layer in range(cfg.n_enc_layers):
        p = f"enc.layer{layer}"
        ln(f"{p}.ln1"), attn(f"{p}.attn"), ln(f"{p}.ln2"), ffn(f"{p}.ffn")
    ln("enc.ln_f")
    for layer in range(cfg.n_dec_layers):
        p = f"dec.layer{layer}"
        ln(f"{p}.ln1"), attn(f"{p}.self_attn"), ln(f"{p}.ln2"), attn(f"{p}.cross_attn")
        ln(f"{p}.ln3"), ffn(f"{p}.ffn")
    ln("dec.ln_f")
    return shapes


def build_model(config, rng_seed=None, vocab=None):
    """Initialize a backbone from a seeded scaled normal.

    Matrices get std ``1/sqrt(fan_in)``; the tied embedding gets
    ``1/sqrt(d_model)``; LayerNorm gains start at 1 and biases at 0.
    Prefix length does not influence the backbone, so configs differing only
    in ``prefix_len`` share weights for a given seed.
    """
    config.validate()
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in backbone_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".beta", ".b1", ".b2")):
            arr = np.zeros(shape)
        elif name == "embed":
            arr = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        tensors[name] = Tensor(arr)
    return ParameterStore(tensors, copy.deepcopy(config), vocab)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- attention


def attention_with_prefix(q, k, v, prefix_k=None, prefix_v=None, causal=False,
                          key_mask=None, return_weights=False):
    """Scaled dot-product attention over ``[prefix_k; k]`` / ``[prefix_v; v]``.

    Shapes are ``[..., n, d]`` for ``q``, ``[..., n', d]`` for ``k``/``v`` and
    ``[..., m, d]`` for the prefix blocks (``m`` may be 0 or the blocks None).
    ``key_mask`` is a boolean ``[..., n']`` array marking real (non-padding)
    keys. Causal masking only restricts the non-prefix key positions.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    m = 0
    if prefix_k is not None and prefix_k.shape[-2] > 0:
        if prefix_k.shape != prefix_v.shape or prefix_k.shape[-1] != q.shape[-1]:
            raise DimensionError(
                f"prefix shape mismatch: {prefix_k.shape} / {prefix_v.shape} for d={q.shape[-1]}"
            )
        m = prefix_k.shape[-2]
        k = ad.concat([prefix_k, k], axis=-2)
        v = ad.concat([prefix_v, v], axis=-2)
    n, n_kv = q.shape[-2], k.shape[-2] - m
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))

    mask = None
    if causal:
        blocked = np.triu(np.ones((n, n_kv), dtype=bool), k=1 + (n_kv - n))
        mask = np.zeros((n, m + n_kv))
        mask[:, m:][blocked] = MASK_VALUE
    if key_mask is not None:
        km = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)
        km = np.concatenate([np.zeros(km.shape[:-1] + (m,)), km], axis=-1)[..., None, :]
        mask = km if mask is None else mask + km
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x, h):
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _prefix_heads(block, h, batch):
    m, d = block.shape
    split = ad.transpose(ad.reshape(block, (m, h, d // h)), (1, 0, 2))
    return ad.broadcast_to(split, (batch, h, m, d // h))


def _mha(params, name, x_q, x_kv, prefix, pname, h, causal, key_mask):
    b = x_q.shape[0]
    q = _split_heads(ad.matmul(x_q, params[f"{name}.wq"]), h)
    k = _split_heads(ad.matmul(x_kv, params[f"{name}.wk"]), h)
    v = _split_heads(ad.matmul(x_kv, params[f"{name}.wv"]), h)
    pk = pv = None
    if prefix is not None and prefix.prefix_len > 0:
        pk = _prefix_heads(prefix[f"{pname}.k"], h, b)
        pv = _prefix_heads(prefix[f"{pname}.v"], h, b)
    km = None if key_mask is None else key_mask[:, None, :]
    out = attention_with_prefix(q, k, v, pk, pv, causal=causal, key_mask=km)
    return ad.matmul(_merge_heads(out), params[f"{name}.wo"])


def _ln(params, name, x):
    return ad.layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"])


def _ffn(params, name, x):
    hid = ad.gelu(ad.add(ad.matmul(x, params[f"{name}.w1"]), params[f"{name}.b1"]))
    return ad.add(ad.matmul(hid, params[f"{name}.w2"]), params[f"{name}.b2"])


def _embed(params, ids):
    cfg = params.config
    x = ad.embedding(params["embed"], ids) * math.sqrt(cfg.d_model)
    return ad.add(x, Tensor(sinusoidal_positions(ids.shape[1], cfg.d_model)))


def _drop(x, cfg, rng):
    return ad.dropout(x, cfg.dropout_rate, rng)


def encode(params, prefix, src_ids, src_mask, rng=None):
    """Encoder stack over padded ``src_ids`` [B, S]; returns [B, S, d]."""
    cfg = params.config
    h = cfg.n_heads
    x = _embed(params, src_ids)
    for layer in range(cfg.n_enc_layers):
        p = f"enc.layer{layer}"
        y = _ln(params, f"{p}.ln1", x)
        a = _mha(params, f"{p}.attn", y, y, prefix, f"enc.{layer}.self", h, False, src_mask)
        x = ad.add(x, _drop(a, cfg, rng))
        x = ad.add(x, _drop(_ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", x)), cfg, rng))
    return _ln(params, "enc.ln_f", x)


def decode(params, prefix, memory, src_mask, dec_ids, rng=None):
    """Decoder stack over ``dec_ids`` [B, T]; returns logits [B, T, V]."""
    cfg = params.config
    h = cfg.n_heads
    x = _embed(params, dec_ids)
    for layer in range(cfg.n_dec_layers):
        p = f"dec.layer{layer}"
        y = _ln(params, f"{p}.ln1", x)
        a = _mha(params, f"{p}.self_attn", y, y, prefix, f"dec.{layer}.self", h, True, None)
        x = ad.add(x, _drop(a, cfg, rng))
        y = _ln(params, f"{p}.ln2", x)
        a = _mha(params, f"{p}.cross_attn", y, memory, prefix, f"dec.{layer}.cross", h,
                 False, src_mask)
        x = ad.add(x, _drop(a, cfg, rng))
        x = ad.add(x, _drop(_ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln3", x)), cfg, rng))
    x = _ln(params, "dec.ln_f", x)
    return ad.matmul(x, ad.transpose(params["embed"], (1, 0)))


# ---------------------------------------------------------------- batching


def pad_batch(seqs, pad_id=PAD_ID):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _as_seq_list(tokens):
    if isinstance(tokens, np.ndarray):
        return [list(map(int, row)) for row in np.atleast_2d(tokens)]
    if tokens and isinstance(tokens[0], (int, np.integer)):
        return [list(tokens)]
    return [list(map(int, s)) for s in tokens]


def _truncate(seqs, limit, what, warn_log):
    out = []
    for i, s in enumerate(seqs):
        if len(s) > limit:
            msg = f"{what} sequence {i} truncated from {len(s)} to {limit} tokens"
            warnings.warn(msg, stacklevel=3)
            if warn_log is not None:
                warn_log.append(msg)
            s = s[:limit]
        out.append(s)
    return out


def prepare_batch(config, src_tokens, tgt_tokens, warn_log=None):
    """Pad/truncate a batch for teacher forcing.

    Decoder input is ``<bos> y``; targets are ``y <eos>``; both padded with
    ``<pad>``. Returns ``(src_ids, src_mask, dec_in, targets)``.
    """
    src = _truncate(_as_seq_list(src_tokens), config.max_src_len, "source", warn_log)
    tgt = _truncate(_as_seq_list(tgt_tokens), config.max_tgt_len - 1, "target", warn_log)
    if len(src) != len(tgt):
        raise ContractError(f"{len(src)} sources but {len(tgt)} targets")
    if any(len(s) == 0 for s in src):
        raise ContractError("empty source sequence")
    src_ids = pad_batch(src)
    dec_in = pad_batch([[BOS_ID] + t for t in tgt])
    targets = pad_batch([t + [EOS_ID] for t in tgt])
    return src_ids, src_ids != PAD_ID, dec_in, targets


def _check_ids(ids, vocab_size):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id outside [0, {vocab_size})")


def forward(params, prefix, src_tokens, tgt_tokens, training=False, rng=None, warn_log=None):
    """Teacher-forced logits.

    A single sequence (flat list of ints) gives logits of shape [T, V];
    a list of sequences gives [B, T, V] with T the padded target length + 1.
    """
    single = not isinstance(tgt_tokens, np.ndarray) and (
        len(tgt_tokens) == 0 or isinstance(tgt_tokens[0], (int, np.integer))
    )
    logits, _ = forward_with_targets(params, prefix, src_tokens, tgt_tokens,
                                     training=training, rng=rng, warn_log=warn_log)
    if single:
        return ad.reshape(logits, logits.shape[1:])
    return logits


def forward_with_targets(params, prefix, src_tokens, tgt_tokens, training=False, rng=None,
                         warn_log=None):
    """Like :func:`forward` but always batched and also returns padded targets."""
    cfg = params.config
    if prefix is not None:
        prefix.check_compatible(cfg)
    src_ids, src_mask, dec_in, targets = prepare_batch(cfg, src_tokens, tgt_tokens, warn_log)
    _check_ids(src_ids, cfg.vocab_size)
    _check_ids(dec_in, cfg.vocab_size)
    drop_rng = rng if training else None
    memory = encode(params, prefix, src_ids, src_mask, drop_rng)
    logits = decode(params, prefix, memory, src_mask, dec_in, drop_rng)
    return logits, targets


# ---------------------------------------------------------------- generation


def _step_logprobs(params, prefix, memory, src_mask, prefixes_so_far):
    dec_in = np.asarray(prefixes_so_far, dtype=np.int64)
    logits = decode(params, prefix, memory, src_mask, dec_in)
    logp = ad.log_softmax_array(logits.data[:, -1, :])
    logp[:, [PAD_ID, BOS_ID]] = -np.inf
    return logp


def generate(params, prefix, src_tokens, decode_mode="greedy", max_len=None, beam_width=4,
             length_penalty=1.0):
    """Decode one summary per source sequence.

    Args:
        decode_mode: ``"greedy"`` or ``"beam"``.
        max_len: generated-token cap (``<eos>`` counts); defaults to
            ``config.max_tgt_len``.
        beam_width: hypotheses kept per step in beam mode.
        length_penalty: exponent ``alpha`` in ``logprob / len**alpha``.

    Returns:
        A list of token-id lists (without ``<bos>``/``<eos>``) for batched
        input, or a single list for a single sequence.
    """
    cfg = params.config
    single = bool(src_tokens) and isinstance(src_tokens[0], (int, np.integer)) \
        if not isinstance(src_tokens, np.ndarray) else src_tokens.ndim == 1
    seqs = _as_seq_list(src_tokens) if len(src_tokens) else [[]]
    if any(len(s) == 0 for s in seqs):
        raise ContractError("cannot generate from an empty source")
    max_len = cfg.max_tgt_len if max_len is None else max_len
    if not 1 <= max_len <= cfg.max_tgt_len:
        raise ContractError(f"max_len must be in [1, {cfg.max_tgt_len}], got {max_len}")
    if prefix is not None:
        prefix.check_compatible(cfg)
    seqs = _truncate(seqs, cfg.max_src_len, "source", None)
    with ad.no_grad():
        if decode_mode == "greedy":
            out = _greedy(params, prefix, seqs, max_len)
        elif decode_mode == "beam":
            out = [_beam(params, prefix, s, max_len, beam_width, length_penalty) for s in seqs]
        else:
            raise ContractError(f"unknown decode mode {decode_mode!r}")
    return out[0] if single else out


def _greedy(params, prefix, seqs, max_len):
    src_ids = pad_batch(seqs)
    _check_ids(src_ids, params.config.vocab_size)
    src_mask = src_ids != PAD_ID
    memory = encode(params, prefix, src_ids, src_mask)
    ys = [[BOS_ID] for _ in seqs]
    done = [False] * len(seqs)
    for _ in range(max_len):
        logp = _step_logprobs(params, prefix, memory, src_mask, ys)
        nxt = logp.argmax(axis=-1)  # first maximum -> lowest id on ties
        for i, tok in enumerate(nxt):
            if done[i]:
                ys[i].append(PAD_ID)
                continue
            ys[i].append(int(tok))
            done[i] = int(tok) == EOS_ID
        if all(done):
            break
    return [_strip(y[1:]) for y in ys]


def _strip(tokens):
    out = []
    for t in tokens:
        if t in (EOS_ID, PAD_ID):
            break
        out.append(t)
    return out


def _beam(params, prefix, src, max_len, width, alpha):
    if width < 1:
        raise ContractError("beam width must be >= 1")
    src_ids = pad_batch([src])
    _check_ids(src_ids, params.config.vocab_size)
    src_mask = src_ids != PAD_ID
    memory = encode(params, prefix, src_ids, src_mask)
    alive = [([BOS_ID], 0.0)]
    finished = []
    for step in range(max_len):
        n = len(alive)
        mem = Tensor(np.broadcast_to(memory.data, (n,) + memory.shape[1:]))
        msk = np.broadcast_to(src_mask, (n, src_mask.shape[1]))
        logp = _step_logprobs(params, prefix, mem, msk, [h for h, _ in alive])
        total = np.array([s for _, s in alive])[:, None] + logp
        flat = total.reshape(-1)
        # sort by score desc, then by flat index (hyp order, then token id)
        order = np.lexsort((np.arange(flat.size), -flat))[:width]
        vocab = logp.shape[1]
        nxt = []
        for idx in order:
            hyp, tok = divmod(int(idx), vocab)
            seq = alive[hyp][0] + [tok]
            if tok == EOS_ID or step == max_len - 1:
                finished.append((seq, float(flat[idx])))
            else:
                nxt.append((seq, float(flat[idx])))
        alive = nxt
        if not alive or len(finished) >= width:
            break
    best = max(
        enumerate(finished),
        key=lambda e: (e[1][1] / (len(e[1][0]) - 1) ** alpha, -e[0]),
    )[1]
    return _strip(best[0][1:])
