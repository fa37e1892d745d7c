"""Batched beam search with length/coverage scoring, unknown replacement and filters."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Example, collate, split_features
from .model import CopyInfo, build_copy_info, decode_step, encode, init_attn_vec, init_decoder_state

UNSATISFIED = "constraint-unsatisfied"
UNFINISHED = "unfinished"
EXCLUDED_IDS = (PAD_ID, BOS_ID)


class DecodeError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list                  # generated ids, </s> included when finished
    score: float                  # sum of step log-probabilities
    attn: list                    # per generated token, weights over source positions
    finished: bool = False
    flags: set = field(default_factory=set)

    def __len__(self):
        return len(self.tokens)

    def extend(self, token, logp, attn):
        return Hypothesis(self.tokens + [int(token)], self.score + logp, self.attn + [attn], False, set(self.flags))


@dataclass
class DecodeOptions:
    beam_size: int = 5
    max_len: int = 100
    n_best: int = 1
    length_alpha: float = 0.0
    coverage_beta: float = 0.0
    replace_unk: bool = False
    phrase_table: dict = None
    filters: list = field(default_factory=list)

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 1 <= self.n_best <= self.beam_size:
            raise ValueError(f"n_best must be in [1, beam_size], got {self.n_best}")
        if self.length_alpha < 0 or self.coverage_beta < 0:
            raise ValueError("length_alpha and coverage_beta must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def length_penalty(length, alpha):
    return ((5.0 + length) ** alpha) / (6.0 ** alpha)


def coverage_penalty(attn, beta):
    if beta == 0.0 or not attn or attn[0] is None:
        return 0.0
    totals = np.sum(np.stack(attn), axis=0)
    return beta * float(np.sum(np.log(np.minimum(totals, 1.0))))


def final_score(hyp, alpha, beta):
    """raw / lp(|Y|) + cp, with |Y| the number of generated tokens."""
    return hyp.score / length_penalty(len(hyp), alpha) + coverage_penalty(hyp.attn, beta)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

class MaxUnkCount:
    """At most ``n`` <unk> tokens in the hypothesis."""

    def __init__(self, n):
        self.n = n

    def __call__(self, tokens, src, finishing):
        return sum(1 for t in tokens if t == UNK_ID) <= self.n


class MustContain:
    """The finished output contains ``sequence`` (ids) contiguously."""

    def __init__(self, sequence):
        self.sequence = list(sequence)

    def __call__(self, tokens, src, finishing):
        if not finishing:
            return True
        k = len(self.sequence)
        return any(tokens[i:i + k] == self.sequence for i in range(len(tokens) - k + 1))


def apply_filters(candidates, filters, src=None, finishing=None):
    """Candidates (token lists) that pass every filter.

    ``finishing(tokens)`` says whether a candidate ends the hypothesis.
    """
    if not filters:
        return list(candidates)
    finishing = finishing or (lambda tokens: bool(tokens) and tokens[-1] == EOS_ID)
    return [c for c in candidates if all(f(c, src, finishing(c)) for f in filters)]


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

class Seq2SeqDecoder:
    """Adapter that exposes a Seq2SeqModel through the step protocol.

    ``start`` encodes sentences (one state row each); ``step`` maps previous
    ids per row to (log-probs, attention, new state); ``select`` reindexes
    rows. Copy models emit extended ids numbered per sentence from V.
    """

    def __init__(self, model, vocab_src, vocab_tgt, feat_vocabs=()):
        self.model = model
        self.vocab_src = vocab_src
        self.vocab_tgt = vocab_tgt
        self.feat_vocabs = feat_vocabs
        self.n_features = len(model.config.feat_vocab_sizes)

    def prepare(self, tokens):
        words, feats = split_features(tokens, self.n_features)
        return Example(words, [], feats)

    def start(self, sources):
        examples = [self.prepare(s) for s in sources]
        batch = collate(examples, self.vocab_src, self.vocab_tgt, self.feat_vocabs)
        enc = encode(self.model, batch)
        copy = build_copy_info(batch, self.vocab_tgt, per_example=True) if self.model.config.copy else None
        state = {
            "enc": enc,
            "dec": init_decoder_state(self.model, enc),
            "feed": init_attn_vec(self.model, batch.size),
            "src_map": None if copy is None else copy.src_map,
        }
        self._ext = None if copy is None else copy.ext_tokens
        self._src_words = [ex.src for ex in examples]
        return state, batch.src_lengths.tolist()

    def step(self, state, prev_ids):
        ids = np.asarray(prev_ids)
        ids = np.where(ids >= len(self.vocab_tgt), UNK_ID, ids)
        copy_info = None
        if state["src_map"] is not None:
            copy_info = CopyInfo(state["src_map"], None)
        out = decode_step(self.model, ids, state["feed"], state["dec"], state["enc"], copy_info=copy_info)
        new = dict(state, dec=out.state, feed=out.attn_vec)
        attn = None if out.attn is None else out.attn.data
        return out.log_probs.data, attn, new

    def select(self, state, rows):
        rows = np.asarray(rows, dtype=np.int64)
        m = self.model
        return {
            "enc": state["enc"].select(m, rows),
            "dec": state["dec"].select(m, rows),
            "feed": m.constant(state["feed"].data[rows]),
            "src_map": None if state["src_map"] is None else state["src_map"][rows],
        }

    def token(self, sent, i):
        if i < len(self.vocab_tgt):
            return self.vocab_tgt.itos[i]
        return self._ext[sent][i]

    def source_words(self, sent):
        return self._src_words[sent]


class RandomToyDecoder:
    """Seeded stand-in model whose step output depends only on the prefix.

    Ids 0 (pad) and 2 (<s>) get zero probability, leaving ``V`` allowed ids:
    <unk>, </s> and V - 2 ordinary tokens. Attention over ``src_len``
    positions is also a seeded function of the prefix.
    """

    def __init__(self, V, seed, src_len=3, peak=2.0):
        if V < 2:
            raise ValueError("toy vocabulary needs at least <unk> and </s>")
        self.V = V
        self.n_out = V + 2
        self.seed = seed
        self.src_len = src_len
        self.peak = peak

    def allowed(self):
        return [i for i in range(self.n_out) if i not in EXCLUDED_IDS]

    def distribution(self, prefix, sent=0):
        rng = np.random.default_rng([self.seed, sent, len(prefix)] + [int(t) for t in prefix])
        logits = rng.normal(0.0, self.peak, self.n_out)
        logits[list(EXCLUDED_IDS)] = -np.inf
        logp = logits - np.max(logits)
        logp = logp - np.log(np.sum(np.exp(logp)))
        a = np.exp(rng.normal(0.0, 1.0, self.src_len))
        return logp, a / a.sum()

    def start(self, sources):
        return [(i, ()) for i in range(len(sources))], [self.src_len] * len(sources)

    def step(self, state, prev_ids):
        rows, attn, new = [], [], []
        for (sent, prefix), prev in zip(state, prev_ids):
            prefix = prefix if prev == BOS_ID and not prefix else prefix + (int(prev),)
            lp, a = self.distribution(prefix, sent)
            rows.append(lp)
            attn.append(a)
            new.append((sent, prefix))
        return np.stack(rows), np.stack(attn), new

    def select(self, state, rows):
        return [state[i] for i in rows]

    def token(self, sent, i):
        return f"w{i}"

    def source_words(self, sent):
        return [f"s{j}" for j in range(self.src_len)]


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

class _Beam:
    def __init__(self, index, src_len, opts, src):
        self.index = index
        self.src_len = src_len
        self.opts = opts
        self.src = src
        self.live = [Hypothesis([], 0.0, [])]
        self.bank = []
        self.done = False

    def lp_max(self):
        return length_penalty(self.opts.max_len, self.opts.length_alpha)

    def nth_banked(self, n):
        scores = sorted((final_score(h, self.opts.length_alpha, self.opts.coverage_beta)
                         for h in self.bank if UNSATISFIED not in h.flags), reverse=True)
        return scores[n - 1] if len(scores) >= n else None

    def can_stop(self):
        """Stop once the n-best banked results cannot be overtaken by any live prefix."""
        if not self.live:
            return True
        nth = self.nth_banked(self.opts.n_best)
        if nth is None:
            return False
        return nth >= max(h.score for h in self.live) / self.lp_max()


def _ranked(n, parent_scores, logp):
    """Candidate (parent, token, score) triples sorted by score, then parent, then token."""
    scores = parent_scores[:, None] + logp
    parents = np.repeat(np.arange(n), logp.shape[1])
    tokens = np.tile(np.arange(logp.shape[1]), n)
    flat = scores.reshape(-1)
    keep = np.isfinite(flat)
    keep[np.isin(tokens, EXCLUDED_IDS)] = False
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((tokens[idx], parents[idx], -flat[idx]))]
    return [(int(parents[i]), int(tokens[i]), float(flat[i])) for i in order]


def _advance(beam, rows_logp, rows_attn, t):
    """Expand a beam by one token; returns the parent row of each new live hypothesis."""
    opts = beam.opts
    finishing_all = t == opts.max_len
    # step log-probs are added to each parent's running score exactly once
    parent_scores = np.array([h.score for h in beam.live])
    cands = _ranked(len(beam.live), parent_scores, rows_logp)

    def tokens_of(c):
        return beam.live[c[0]].tokens + [c[1]]

    def finishing(tokens):
        return finishing_all or tokens[-1] == EOS_ID

    flagged = False
    if opts.filters:
        passing = [c for c in cands if all(f(tokens_of(c), beam.src, finishing(tokens_of(c))) for f in opts.filters)]
        if not passing and cands:
            passing, flagged = cands, True
        cands = passing

    b = opts.beam_size
    new_live, parents = [], []
    for rank, (p, tok, _) in enumerate(cands):
        parent = beam.live[p]
        attn = None if rows_attn is None else rows_attn[p][: beam.src_len].copy()
        logp = float(rows_logp[p, tok])
        if tok == EOS_ID:
            if rank < b:
                h = parent.extend(tok, logp, attn)
                h.finished = True
                if flagged:
                    h.flags.add(UNSATISFIED)
                beam.bank.append(h)
            continue
        if len(new_live) < b:
            h = parent.extend(tok, logp, attn)
            if flagged:
                h.flags.add(UNSATISFIED)
            new_live.append(h)
            parents.append(p)
        elif rank >= b:
            break
    if finishing_all:
        # length limit reached: keep the truncated survivors as results
        beam.bank.extend(new_live)
        new_live, parents = [], []
    beam.live = new_live
    return parents


def translate_batch(decoder, sources, opts):
    """Beam search every sentence of ``sources``; returns per-sentence n-best lists.

    Rows of all live hypotheses of all sentences are decoded together;
    each sentence's search only ever sees its own rows.
    """
    if not sources:
        return []
    for i, s in enumerate(sources):
        if len(s) == 0:
            raise DecodeError(f"empty source sentence at index {i}")
    state, lengths = decoder.start(sources)
    beams = [_Beam(i, lengths[i], opts, sources[i]) for i in range(len(sources))]
    row_owner = list(range(len(sources)))
    prev = np.full(len(sources), BOS_ID, dtype=np.int64)
    for t in range(1, opts.max_len + 1):
        logp, attn, state = decoder.step(state, prev)
        next_rows, next_prev = [], []
        start = 0
        for beam in beams:
            if beam.done:
                continue
            n = len(beam.live)
            rows = list(range(start, start + n))
            start += n
            parents = _advance(beam, logp[rows], None if attn is None else attn[rows], t)
            beam.done = beam.can_stop()
            if beam.done:
                continue
            for p, h in zip(parents, beam.live):
                next_rows.append(rows[p])
                next_prev.append(h.tokens[-1])
        if not next_rows:
            break
        row_owner = next_rows
        state = decoder.select(state, row_owner)
        prev = np.array(next_prev, dtype=np.int64)
    return [_results(beam) for beam in beams]


def _results(beam):
    opts = beam.opts
    pool = beam.bank
    if not pool:
        pool = beam.live
        for h in pool:
            h.flags.add(UNFINISHED)
    ranked = sorted(pool, key=lambda h: (UNSATISFIED in h.flags,
                                         -final_score(h, opts.length_alpha, opts.coverage_beta)))
    return ranked[: opts.n_best]


def beam_search(decoder, src, opts):
    """Ranked hypotheses for one sentence."""
    return translate_batch(decoder, [src], opts)[0]


def greedy_decode(decoder, src, max_len):
    """Argmax decoding, the reference for beam_size 1."""
    state, _ = decoder.start([src])
    prev = np.array([BOS_ID])
    tokens, score = [], 0.0
    for _ in range(max_len):
        logp, _, state = decoder.step(state, prev)
        row = logp[0].copy()
        row[list(EXCLUDED_IDS)] = -np.inf
        tok = int(np.argmax(row))
        tokens.append(tok)
        score += float(logp[0, tok])
        if tok == EOS_ID:
            break
        prev = np.array([tok])
    return tokens, score


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def replace_unknowns(tokens, attn, src_tokens, phrase_table=None):
    """Swap each <unk> for the most attended source word (or its table entry)."""
    out = list(tokens)
    for t, tok in enumerate(tokens):
        if tok != "<unk>" or attn is None or t >= len(attn) or attn[t] is None:
            continue
        j = int(np.argmax(attn[t][: len(src_tokens)]))   # first maximum wins ties
        word = src_tokens[j]
        out[t] = phrase_table.get(word, word) if phrase_table else word
    return out


def hypothesis_words(decoder, sent, hyp, opts):
    ids = hyp.tokens[:-1] if hyp.tokens and hyp.tokens[-1] == EOS_ID else hyp.tokens
    words = [decoder.token(sent, i) for i in ids]
    if opts.replace_unk:
        words = replace_unknowns(words, hyp.attn, decoder.source_words(sent), opts.phrase_table)
    return words


def format_nbest(rank, text, norm, raw):
    return f"{rank} ||| {text} ||| {norm!r} ||| {raw!r}"


def attention_dump(results):
    """JSON text: per sentence, the T x S attention matrix of the best hypothesis."""
    mats = []
    for hyps in results:
        h = hyps[0] if hyps else None
        if h is None or not h.attn or h.attn[0] is None:
            mats.append([])
        else:
            mats.append(np.stack(h.attn).tolist())
    return json.dumps(mats)
