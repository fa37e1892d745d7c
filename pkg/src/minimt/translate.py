"""Checkpoint-backed line translation shared by the CLI and the server."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .beam import (
    DecodeOptions,
    MaxUnkCount,
    Seq2SeqDecoder,
    final_score,
    hypothesis_words,
    translate_batch,
)
from .data import Vocab
from .tokenize import BpeModel, bpe_segment, detokenize, tokenize
from .trainer import CheckpointError, load_checkpoint

DECODE_KEYS = ("beam_size", "decode_max_len", "n_best", "length_alpha", "coverage_beta", "replace_unk", "max_unk")


class TranslateError(ValueError):
    pass


def load_phrase_table(path):
    """Tab-separated "source<TAB>target" lines."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TranslateError(f"{path}:{n}: expected 'source<TAB>target'")
            table[parts[0]] = parts[1]
    return table


@dataclass
class LineResult:
    text: str
    score: float               # normalized
    raw_score: float
    n_best: list               # [(text, normalized, raw)]
    attn: list                 # T x S of the best hypothesis
    flags: list


class Translator:
    """A loaded model plus the preprocessing recorded at training time."""

    def __init__(self, checkpoint, vocab_src=None, vocab_tgt=None):
        self.checkpoint = checkpoint
        self.model, _, self.meta = load_checkpoint(checkpoint)
        data = self.meta.get("data", {})
        base = os.path.dirname(os.path.abspath(checkpoint))

        def path(key, override):
            p = override or data.get(key)
            if p is None:
                raise CheckpointError(f"checkpoint does not record a {key} path")
            return p if os.path.isabs(p) else os.path.join(base, p)

        self.vocab_src = Vocab.load(path("vocab_src", vocab_src))
        self.vocab_tgt = Vocab.load(path("vocab_tgt", vocab_tgt))
        for side, vocab in (("src", self.vocab_src), ("tgt", self.vocab_tgt)):
            want = data.get(f"vocab_{side}_digest")
            if want is not None and vocab.digest() != want:
                raise CheckpointError(f"{side} vocabulary does not match the checkpoint (digest mismatch)")
        cfg = self.model.config
        if len(self.vocab_src) != cfg.src_vocab_size or len(self.vocab_tgt) != cfg.tgt_vocab_size:
            raise CheckpointError("vocabulary sizes do not match the model configuration")
        self.feat_vocabs = [Vocab.load(os.path.join(base, p) if not os.path.isabs(p) else p)
                            for p in data.get("vocab_src_feats", [])]
        self.tokenize = bool(data.get("tokenize", False))
        bpe = data.get("bpe_codes")
        self.bpe = BpeModel.load(bpe if os.path.isabs(bpe) else os.path.join(base, bpe)) if bpe else None
        self.config_hash = self.meta["config_hash"]
        self.name = os.path.basename(checkpoint)

    def options(self, cfg):
        phrase_table = cfg.get("phrase_table")
        if isinstance(phrase_table, str):
            phrase_table = load_phrase_table(phrase_table)
        filters = [MaxUnkCount(cfg["max_unk"])] if cfg.get("max_unk") is not None else []
        return DecodeOptions(beam_size=cfg["beam_size"], max_len=cfg["decode_max_len"], n_best=cfg["n_best"],
                             length_alpha=cfg["length_alpha"], coverage_beta=cfg["coverage_beta"],
                             replace_unk=cfg["replace_unk"], phrase_table=phrase_table, filters=filters)

    def prepare(self, line):
        tokens = tokenize(line) if self.tokenize else line.split()
        if self.bpe is not None:
            tokens = bpe_segment(self.bpe, tokens)
        return tokens

    def finish(self, words):
        if self.tokenize or self.bpe is not None:
            return detokenize(words)
        return " ".join(words)

    def translate_tokens(self, sources, opts):
        """Decode prepared token lists as one batch; returns LineResults."""
        decoder = Seq2SeqDecoder(self.model, self.vocab_src, self.vocab_tgt, self.feat_vocabs)
        results = translate_batch(decoder, sources, opts)
        out = []
        for i, hyps in enumerate(results):
            entries = []
            for h in hyps:
                text = self.finish(hypothesis_words(decoder, i, h, opts))
                entries.append((text, final_score(h, opts.length_alpha, opts.coverage_beta), h.score))
            best = hyps[0]
            attn = [] if not best.attn or best.attn[0] is None else [a.tolist() for a in best.attn]
            out.append(LineResult(entries[0][0], entries[0][1], entries[0][2], entries, attn, sorted(best.flags)))
        return out

    def translate_lines(self, lines, opts, batch_size):
        """Lines are cut into consecutive batches of ``batch_size``."""
        results = []
        for start in range(0, len(lines), batch_size):
            chunk = [self.prepare(line) for line in lines[start:start + batch_size]]
            decoded = iter(self.translate_tokens([c for c in chunk if c], opts))
            results.extend(next(decoded) if c else empty_result() for c in chunk)
        return results


def empty_result():
    return LineResult("", 0.0, 0.0, [("", 0.0, 0.0)], [], ["empty-source"])


def dump_attention(results):
    """JSON for the visualization file: per line, the T x S matrix of the best output."""
    return json.dumps([r.attn for r in results])
