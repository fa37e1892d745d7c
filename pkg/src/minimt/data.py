"""Vocabularies, length filtering, sharding and padded batch assembly."""
from __future__ import annotations

import collections
import hashlib
import json
import os
from dataclasses import dataclass, field
from itertools import zip_longest

import numpy as np

from .tensor import atomic_write_bytes, load_tensors, save_tensors

PAD, UNK, BOS, EOS = "<blank>", "<unk>", "<s>", "</s>"
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
RESERVED = (PAD, UNK, BOS, EOS)
FEATURE_SEP = "|"


class DataError(ValueError):
    pass


class Vocab:
    """Bijection between tokens and ids with the four reserved ids fixed."""

    def __init__(self, tokens, counts=None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise DataError(f"vocab must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocab")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.counts = list(counts) if counts is not None else [0] * len(tokens)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path):
        text = "".join(f"{t}\t{c}\n" for t, c in zip(self.itos, self.counts))
        atomic_write_bytes(path, text.encode("utf-8"))

    @classmethod
    def load(cls, path):
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                tok, sep, count = line.rstrip("\n").rpartition("\t")
                if not sep:
                    raise DataError(f"{path}:{n}: expected 'token<TAB>count'")
                tokens.append(tok)
                counts.append(int(count))
        return cls(tokens, counts)


def build_vocab(corpus, max_size=50_000, min_freq=1):
    """Reserved tokens followed by the most frequent tokens.

    Frequency ties keep first-occurrence order.
    """
    if max_size < 4:
        raise DataError("max_size must leave room for the 4 reserved tokens")
    freqs = collections.Counter()
    seen_any = False
    for sent in corpus:
        seen_any = True
        freqs.update(sent)
    if not seen_any or not freqs:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for tok in RESERVED:
        freqs.pop(tok, None)
    # Counter preserves first-insertion order and sorted() is stable
    ranked = sorted((item for item in freqs.items() if item[1] >= min_freq), key=lambda kv: -kv[1])
    ranked = ranked[: max_size - len(RESERVED)]
    return Vocab(list(RESERVED) + [t for t, _ in ranked], [0] * 4 + [c for _, c in ranked])


def filter_pair(src, tgt, max_len=50):
    """Keep a pair unless either side is longer than ``max_len`` tokens."""
    return len(src) <= max_len and len(tgt) <= max_len


def split_features(tokens, n_features):
    """Split ``word|f1|f2`` tokens into the word list and per-feature lists."""
    if n_features == 0:
        return tokens, []
    words, feats = [], [[] for _ in range(n_features)]
    for tok in tokens:
        parts = tok.split(FEATURE_SEP)
        if len(parts) != n_features + 1:
            raise DataError(f"token {tok!r} does not carry {n_features} feature(s)")
        words.append(parts[0])
        for k in range(n_features):
            feats[k].append(parts[k + 1])
    return words, feats


@dataclass
class Example:
    src: list
    tgt: list
    src_feats: list = field(default_factory=list)


@dataclass
class Shard:
    index: int
    examples: list

    def __len__(self):
        return len(self.examples)


def read_parallel(src_path, tgt_path, tokenize_fn=str.split):
    """Yield ``(line_no, src_tokens, tgt_tokens)`` from line-aligned files."""
    with open(src_path, encoding="utf-8") as fs, open(tgt_path, encoding="utf-8") as ft:
        for n, (s, t) in enumerate(zip_longest(fs, ft), start=1):
            if s is None or t is None:
                missing = "source" if s is None else "target"
                raise DataError(f"line count mismatch: {missing} file ends before line {n}")
            yield n, tokenize_fn(s.rstrip("\n")), tokenize_fn(t.rstrip("\n"))


def shard_corpus(src_path, tgt_path, shard_size, max_len=None, n_features=0, tokenize_fn=str.split):
    """Stream a parallel corpus into shards of at most ``shard_size`` examples.

    Pairs longer than ``max_len`` are dropped before sharding. Memory stays
    bounded by one shard.
    """
    if shard_size < 1:
        raise DataError("shard_size must be >= 1")
    buf, index = [], 0
    for _, src, tgt in read_parallel(src_path, tgt_path, tokenize_fn):
        if max_len is not None and not filter_pair(src, tgt, max_len):
            continue
        words, feats = split_features(src, n_features)
        buf.append(Example(words, tgt, feats))
        if len(buf) == shard_size:
            yield Shard(index, buf)
            buf, index = [], index + 1
    if buf:
        yield Shard(index, buf)


def shard_examples(examples, shard_size):
    for start in range(0, len(examples), shard_size):
        yield Shard(start // shard_size, examples[start:start + shard_size])


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray          # S_max x B
    tgt: np.ndarray          # T_max x B, rows start with <s> and end with </s>
    src_lengths: np.ndarray
    tgt_lengths: np.ndarray
    src_feats: list = field(default_factory=list)
    src_tokens: list = field(default_factory=list)
    tgt_tokens: list = field(default_factory=list)

    @property
    def size(self):
        return self.src.shape[1]

    @property
    def src_mask(self):
        return np.arange(self.src.shape[0])[:, None] < self.src_lengths[None, :]

    @property
    def tgt_mask(self):
        return np.arange(self.tgt.shape[0])[:, None] < self.tgt_lengths[None, :]

    def n_target_tokens(self):
        """Predicted positions: every target token after <s>, including </s>."""
        return int(np.sum(self.tgt_lengths - 1))


def _pad(seqs):
    length = max(len(s) for s in seqs)
    out = np.full((length, len(seqs)), PAD_ID, dtype=np.int64)
    for j, s in enumerate(seqs):
        out[: len(s), j] = s
    return out


def collate(examples, vocab_src, vocab_tgt, feat_vocabs=()):
    if any(len(ex.src) == 0 for ex in examples):
        raise DataError("empty source sentence")
    src = [vocab_src.encode(ex.src) for ex in examples]
    tgt = [[BOS_ID] + vocab_tgt.encode(ex.tgt) + [EOS_ID] for ex in examples]
    feats = [_pad([fv.encode(ex.src_feats[k]) for ex in examples]) for k, fv in enumerate(feat_vocabs)]
    return Batch(
        src=_pad(src),
        tgt=_pad(tgt),
        src_lengths=np.array([len(s) for s in src], dtype=np.int64),
        tgt_lengths=np.array([len(t) for t in tgt], dtype=np.int64),
        src_feats=feats,
        src_tokens=[list(ex.src) for ex in examples],
        tgt_tokens=[list(ex.tgt) for ex in examples],
    )


def make_batches(shard, batch_size, vocab_src, vocab_tgt, sort=True, rng=None, feat_vocabs=()):
    """Cut a group of examples into padded batches.

    With ``rng``: shuffle, stable-sort by source length, cut, then shuffle
    the batch order.
    """
    examples = list(shard.examples if isinstance(shard, Shard) else shard)
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(len(examples))
    if sort:
        order = sorted(order, key=lambda i: len(examples[i].src))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [collate([examples[i] for i in c], vocab_src, vocab_tgt, feat_vocabs) for c in chunks]


def iter_examples(shards):
    for shard in shards:
        yield from shard.examples


def epoch_batches(shards, batch_size, vocab_src, vocab_tgt, seed, epoch, window_factor=100, feat_vocabs=()):
    """The batch stream for one epoch.

    Examples are consumed in corpus order into windows of
    ``window_factor * batch_size``; each window is shuffled, length-sorted
    and cut with an rng derived from (seed, epoch, window index). The stream
    therefore depends only on the example sequence, not on shard sizes.
    """
    window = window_factor * batch_size
    buf, w = [], 0
    for ex in iter_examples(shards):
        buf.append(ex)
        if len(buf) == window:
            yield from make_batches(buf, batch_size, vocab_src, vocab_tgt, rng=np.random.default_rng([seed, epoch, w]),
                                    feat_vocabs=feat_vocabs)
            buf, w = [], w + 1
    if buf:
        yield from make_batches(buf, batch_size, vocab_src, vocab_tgt, rng=np.random.default_rng([seed, epoch, w]),
                                feat_vocabs=feat_vocabs)


# ---------------------------------------------------------------------------
# shard files
# ---------------------------------------------------------------------------

def _encode_sequences(seqs, vocab, prefix, out):
    """Flatten token lists to ids; out-of-vocab tokens are kept verbatim.

    An OOV token is stored as id -(k+1) pointing into a table of code points,
    so a loaded shard reproduces its tokens exactly.
    """
    ids, offsets = [], [0]
    oov_index, oov_cp, oov_off = {}, [], [0]
    for seq in seqs:
        for tok in seq:
            i = vocab.stoi.get(tok)
            if i is None:
                k = oov_index.get(tok)
                if k is None:
                    k = oov_index[tok] = len(oov_index)
                    oov_cp.extend(ord(c) for c in tok)
                    oov_off.append(len(oov_cp))
                i = -(k + 1)
            ids.append(i)
        offsets.append(len(ids))
    out[f"{prefix}.ids"] = np.array(ids or [0], dtype=np.int64)
    out[f"{prefix}.offsets"] = np.array(offsets, dtype=np.int64)
    out[f"{prefix}.oov_cp"] = np.array(oov_cp or [0], dtype=np.int32)
    out[f"{prefix}.oov_offsets"] = np.array(oov_off, dtype=np.int64)


def _decode_sequences(named, vocab, prefix):
    ids, offsets = named[f"{prefix}.ids"], named[f"{prefix}.offsets"]
    cp, oov_off = named[f"{prefix}.oov_cp"], named[f"{prefix}.oov_offsets"]
    oov = ["".join(map(chr, cp[oov_off[k]:oov_off[k + 1]])) for k in range(len(oov_off) - 1)]
    out = []
    for a, b in zip(offsets[:-1], offsets[1:]):
        out.append([vocab.itos[i] if i >= 0 else oov[-i - 1] for i in ids[a:b]])
    return out


def save_shard(path, shard, vocab_src, vocab_tgt, feat_vocabs=()):
    named = {"index": np.array([shard.index], dtype=np.int64)}
    _encode_sequences([ex.src for ex in shard.examples], vocab_src, "src", named)
    _encode_sequences([ex.tgt for ex in shard.examples], vocab_tgt, "tgt", named)
    for k, fv in enumerate(feat_vocabs):
        _encode_sequences([ex.src_feats[k] for ex in shard.examples], fv, f"src.feat{k}", named)
    save_tensors(path, named)


def load_shard(path, vocab_src, vocab_tgt, feat_vocabs=()):
    named = load_tensors(path)
    src = _decode_sequences(named, vocab_src, "src")
    tgt = _decode_sequences(named, vocab_tgt, "tgt")
    feats = [_decode_sequences(named, fv, f"src.feat{k}") for k, fv in enumerate(feat_vocabs)]
    examples = [Example(s, t, [f[i] for f in feats]) for i, (s, t) in enumerate(zip(src, tgt))]
    return Shard(int(named["index"][0]), examples)


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class ShardSet:
    """Lazily loads the shards listed in a preprocessing manifest."""

    def __init__(self, manifest_path, split="train"):
        self.manifest_path = os.path.abspath(manifest_path)
        self.root = os.path.dirname(self.manifest_path)
        self.manifest = read_json(manifest_path)
        self.vocab_src = Vocab.load(self._path(self.manifest["vocab"]["src"]))
        self.vocab_tgt = Vocab.load(self._path(self.manifest["vocab"]["tgt"]))
        self.feat_vocabs = [Vocab.load(self._path(p)) for p in self.manifest["vocab"].get("src_feats", [])]
        self.split = split

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.root, p)

    def shard_paths(self, split=None):
        return [self._path(s["path"]) for s in self.manifest["shards"][split or self.split]]

    def __iter__(self):
        for p in self.shard_paths():
            yield load_shard(p, self.vocab_src, self.vocab_tgt, self.feat_vocabs)

    def examples(self, split=None):
        out = []
        for p in self.shard_paths(split):
            out.extend(load_shard(p, self.vocab_src, self.vocab_tgt, self.feat_vocabs).examples)
        return out
