"""Whitespace word-level vocabulary."""

from __future__ import annotations

PAD, BOS, EOS, UNK, SEP = "<pad>", "<bos>", "<eos>", "<unk>", "<sep>"
SPECIALS = (PAD, BOS, EOS, UNK, SEP)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, SEP_ID = range(len(SPECIALS))


class Vocabulary:
    """Bijective token <-> id map with the five special tokens at ids 0..4."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, texts):
        """Collect every whitespace token from ``texts``, in sorted order."""
        words = set()
        for text in texts:
            words.update(text.split())
        return cls(sorted(words - set(SPECIALS)))

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text):
        return [self.stoi.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def to_list(self):
        return list(self.itos)

    @classmethod
    def from_list(cls, itos):
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("serialized vocabulary does not start with the special tokens")
        return cls(itos[len(SPECIALS):])
