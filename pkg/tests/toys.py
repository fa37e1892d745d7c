"""Shared toy fixtures: synthetic corpora, tiny models, gradient checks."""
import numpy as np

from minimt.data import Example, build_vocab, collate
from minimt.gradcheck import normwise_relative_error, numerical_gradient
from minimt.model import ModelConfig, Seq2SeqModel, forward_loss
from minimt.tensor import Tape, backward


def symbol_tokens(n):
    return [f"t{i}" for i in range(n)]


def toy_task(kind, n, seed, vocab=20, min_len=5, max_len=15):
    """Pairs for the copy or reverse task over ``vocab`` symbols."""
    rng = np.random.default_rng(seed)
    symbols = symbol_tokens(vocab)
    out = []
    for _ in range(n):
        src = [symbols[i] for i in rng.integers(0, vocab, rng.integers(min_len, max_len + 1))]
        tgt = list(src) if kind == "copy" else src[::-1]
        out.append(Example(src, tgt))
    return out


def toy_vocab(examples):
    return build_vocab([ex.src + ex.tgt for ex in examples], max_size=10_000)


def small_batch(seed=0, n=2, vocab=8, oov=True):
    rng = np.random.default_rng(seed)
    symbols = symbol_tokens(vocab)
    examples = []
    for k in range(n):
        src = [symbols[i] for i in rng.integers(0, vocab, 3 + 2 * k)]
        tgt = [symbols[i] for i in rng.integers(0, vocab, 2 + k)]
        examples.append(Example(src, tgt))
    v = build_vocab([ex.src + ex.tgt for ex in examples], max_size=100)
    if oov:
        examples[0].src.insert(1, "OOVword")
        examples[0].tgt.append("OOVword")
    return collate(examples, v, v), v


def model_gradcheck(model, batch, vocab, samples=6, eps=1e-5, seed=0):
    """Norm-wise relative error per parameter over sampled coordinates.

    The sample always holds the two largest-magnitude analytic entries plus
    random nonzero ones, so the norm is not dominated by roundoff on
    vanishing entries.
    """
    with Tape() as tape:
        loss, _ = forward_loss(model, batch, vocab_tgt=vocab)
    grads = backward(tape, loss)

    def value():
        return float(forward_loss(model, batch, vocab_tgt=vocab)[0].data)

    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in model.params.items():
        g = grads[p.id].reshape(-1)
        nonzero = np.flatnonzero(g)
        pool = nonzero if nonzero.size else np.arange(g.size)
        top = np.argsort(-np.abs(g), kind="stable")[:2]
        idx = np.unique(np.concatenate([top, rng.choice(pool, min(samples, pool.size), replace=False)]))
        numeric = numerical_gradient(value, p.data, eps, indices=idx).reshape(-1)
        worst[name] = normwise_relative_error(g[idx], numeric[idx])
    return worst


def make_model(vocab_size, seed=1, **overrides):
    cfg = dict(rnn_size=16, emb_size=8, dropout=0.0)
    cfg.update(overrides)
    return Seq2SeqModel(ModelConfig(vocab_size, vocab_size, **cfg), seed=seed)


def enumerate_outputs(decoder, max_len, src=("x",), sent=0):
    """Every complete output of a step decoder with its step-by-step hypothesis.

    Outputs end in </s> or stop at ``max_len`` tokens; scores accumulate in
    the same order as beam search so comparisons can be exact.
    """
    from minimt.beam import Hypothesis
    from minimt.data import BOS_ID, EOS_ID

    allowed = decoder.allowed()
    out = []

    def walk(state, prev, hyp):
        logp, attn, state = decoder.step(state, [prev])
        for tok in allowed:
            h = hyp.extend(tok, float(logp[0, tok]), attn[0][:decoder.src_len].copy())
            if tok == EOS_ID or len(h) == max_len:
                h.finished = tok == EOS_ID
                out.append(h)
            else:
                walk(decoder.select(state, [0]), tok, h)

    state, _ = decoder.start([list(src)])
    walk(state, BOS_ID, Hypothesis([], 0.0, []))
    return out


def brute_force_best(decoder, max_len, alpha, beta, keep=None):
    from minimt.beam import final_score

    pool = [h for h in enumerate_outputs(decoder, max_len) if keep is None or keep(h)]
    return max(pool, key=lambda h: final_score(h, alpha, beta))
