"""Reversible tokenization and byte-pair encoding.

Tokens split out of a whitespace-delimited chunk carry a joiner marker on
the side where they touched their neighbour, so the original text can be
rebuilt exactly. BPE reuses the same marker for continuation pieces, which
means :func:`detokenize` also undoes subword segmentation.
"""
from __future__ import annotations

import collections
import hashlib
import unicodedata
from dataclasses import dataclass, field

JOINER = "￭"
END_OF_WORD = "</w>"
BPE_HEADER = "#version: minimt-bpe-1"


class TokenizeError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerOptions:
    joiner: str = JOINER
    mode: str = "aggressive"
    case_preserving: bool = True

    def __post_init__(self):
        if not self.joiner:
            raise ValueError("joiner must be non-empty")
        if self.mode != "aggressive":
            raise ValueError(f"unsupported tokenizer mode {self.mode!r}")


def char_class(ch):
    cat = unicodedata.category(ch)
    if cat[0] in "LM":
        return "letter"
    if cat[0] == "N":
        return "digit"
    return "punct"


def _split_chunk(chunk):
    """Cut at class boundaries; every punctuation character stands alone."""
    pieces = []
    current = chunk[0]
    cls = char_class(current)
    for ch in chunk[1:]:
        c = char_class(ch)
        if c == cls and c != "punct":
            current += ch
        else:
            pieces.append((current, cls))
            current, cls = ch, c
    pieces.append((current, cls))
    return pieces


def tokenize(line, opts=TokenizerOptions()):
    if opts.joiner in line:
        raise TokenizeError("input already contains the joiner marker")
    if "\n" in line or "\r" in line:
        raise TokenizeError("input must be a single line")
    if not opts.case_preserving:
        line = line.lower()
    tokens = []
    for chunk in line.split():
        pieces = _split_chunk(chunk)
        out = [text for text, _ in pieces]
        for i in range(len(pieces) - 1):
            left_punct = pieces[i][1] == "punct"
            right_punct = pieces[i + 1][1] == "punct"
            # the marker goes on the punctuation side; otherwise on the right piece
            if left_punct and not right_punct:
                out[i] = out[i] + opts.joiner
            else:
                out[i + 1] = opts.joiner + out[i + 1]
        tokens.extend(out)
    return tokens


def detokenize(tokens, opts=TokenizerOptions()):
    j = opts.joiner
    parts = []
    glue_next = True
    for tok in tokens:
        attach = glue_next or tok.startswith(j)
        glue_next = tok.endswith(j) and len(tok) > len(j)
        core = tok
        if core.startswith(j):
            core = core[len(j):]
        if core.endswith(j):
            core = core[:-len(j)]
        if parts and not attach:
            parts.append(" ")
        parts.append(core)
    return "".join(parts)


@dataclass(frozen=True)
class BpeModel:
    merges: tuple
    fingerprint: str = ""
    joiner: str = JOINER
    _ranks: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        merges = tuple(tuple(m) for m in self.merges)
        if len(set(merges)) != len(merges):
            raise ValueError("duplicate merge pair")
        object.__setattr__(self, "merges", merges)
        object.__setattr__(self, "_ranks", {pair: i for i, pair in enumerate(merges)})

    def save(self, path):
        lines = [BPE_HEADER] + [f"{a} {b}" for a, b in self.merges]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, joiner=JOINER):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != BPE_HEADER:
            raise ValueError(f"{path}: missing BPE header {BPE_HEADER!r}")
        merges = []
        for n, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'left right'")
            merges.append((parts[0], parts[1]))
        return cls(tuple(merges), joiner=joiner)


def _merge_word(symbols, pair, joined):
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def bpe_learn(corpus, n_merges, joiner=JOINER):
    """Learn ``n_merges`` symbol merges from an iterable of tokens.

    Each word is its character sequence followed by an end-of-word symbol.
    The end-of-word symbol only marks the boundary and never merges. Ties on
    pair frequency go to the lexicographically smallest pair.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    freqs = collections.Counter(tok for tok in corpus)
    if not freqs:
        raise ValueError("cannot learn BPE from an empty corpus")
    digest = hashlib.sha256()
    for word in sorted(freqs):
        digest.update(f"{word}\t{freqs[word]}\n".encode("utf-8"))
    vocab = {tuple(word) + (END_OF_WORD,): count for word, count in freqs.items()}
    merges = []
    for _ in range(n_merges):
        pairs = collections.Counter()
        for symbols, count in vocab.items():
            for a, b in zip(symbols[:-2], symbols[1:-1]):
                pairs[a, b] += count
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        joined = best[0] + best[1]
        vocab = {_merge_word(s, best, joined) if best[0] in s else s: c for s, c in vocab.items()}
        merges.append(best)
    return BpeModel(tuple(merges), fingerprint=digest.hexdigest(), joiner=joiner)


def bpe_apply(model, token):
    """Segment ``token``; all pieces but the last end with the joiner."""
    if not token:
        return []
    symbols = list(token)
    ranks = model._ranks
    while len(symbols) > 1:
        best_rank, best_i = None, None
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_i = r, i
        if best_rank is None:
            break
        pair = model.merges[best_rank]
        joined = pair[0] + pair[1]
        # merge every occurrence of the chosen pair, left to right
        merged = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
                merged.append(joined)
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return [s + model.joiner for s in symbols[:-1]] + [symbols[-1]]


def bpe_segment_token(model, token):
    """Apply BPE to a tokenizer output token, keeping its joiner markers."""
    j = model.joiner
    lead = token.startswith(j)
    core = token[len(j):] if lead else token
    trail = core.endswith(j) and len(core) > len(j)
    if trail:
        core = core[:-len(j)]
    pieces = bpe_apply(model, core)
    if lead:
        pieces[0] = j + pieces[0]
    if trail:
        pieces[-1] = pieces[-1] + j
    return pieces


def bpe_segment(model, tokens):
    out = []
    for tok in tokens:
        out.extend(bpe_segment_token(model, tok))
    return out


def strip_markers(pieces, joiner=JOINER):
    return "".join(p.replace(joiner, "") for p in pieces)
