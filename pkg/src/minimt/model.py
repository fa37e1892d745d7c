"""Attention-based RNN encoder-decoder with input feeding and a copy generator."""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import BOS_ID, PAD_ID, UNK_ID
from .tensor import ShapeError, Tensor, apply, dropout

CELLS = ("LSTM", "GRU")
ATTENTION_KINDS = ("general", "dot", "concat", "none")


class ConfigError(ValueError):
    pass


def feature_embedding_width(vocab_size):
    return min(64, math.ceil(vocab_size ** 0.7))


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    cell: str = "LSTM"
    enc_layers: int = 2
    dec_layers: int = 2
    rnn_size: int = 500
    emb_size: int = 300
    bidirectional_encoder: bool = False
    attention: str = "general"
    input_feed: bool = True
    copy: bool = False
    dropout: float = 0.1
    feat_vocab_sizes: list = field(default_factory=list)
    feat_emb_sizes: list = field(default_factory=list)
    init_range: float = 0.1

    def __post_init__(self):
        self.feat_vocab_sizes = list(self.feat_vocab_sizes)
        if not self.feat_emb_sizes:
            self.feat_emb_sizes = [feature_embedding_width(v) for v in self.feat_vocab_sizes]
        self.feat_emb_sizes = list(self.feat_emb_sizes)
        self.validate()

    def validate(self):
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.rnn_size <= 0 or self.emb_size <= 0:
            raise ConfigError("rnn_size and emb_size must be positive")
        for name in ("enc_layers", "dec_layers"):
            if not 1 <= getattr(self, name) <= 16:
                raise ConfigError(f"{name} must be in [1, 16]")
        if self.bidirectional_encoder and self.rnn_size % 2:
            raise ConfigError("bidirectional encoder needs an even rnn_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.copy and self.attention == "none":
            raise ConfigError("copy needs an attention distribution")
        if len(self.feat_emb_sizes) != len(self.feat_vocab_sizes):
            raise ConfigError("one embedding width per source feature")
        if self.src_vocab_size < 4 or self.tgt_vocab_size < 4:
            raise ConfigError("vocabularies must hold the reserved tokens")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _gates(cell):
    return 4 if cell == "LSTM" else 3


class Seq2SeqModel:
    """Parameter collection plus configuration.

    Parameters live in ``params`` (name -> Tensor), in a fixed creation
    order that also defines the checkpoint layout.
    """

    def __init__(self, config, seed=1, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = np.random.default_rng(seed)
        c = config
        r = c.init_range
        H = c.rnn_size
        G = _gates(c.cell)

        def add(name, shape):
            self.params[name] = Tensor(rng.uniform(-r, r, shape).astype(self.dtype), requires_grad=True, name=name)

        add("src_emb", (c.src_vocab_size, c.emb_size))
        for k, (v, e) in enumerate(zip(c.feat_vocab_sizes, c.feat_emb_sizes)):
            add(f"src_feat_emb.{k}", (v, e))
        add("tgt_emb", (c.tgt_vocab_size, c.emb_size))

        dirs = ("fwd", "bwd") if c.bidirectional_encoder else ("fwd",)
        h_dir = H // len(dirs)
        in_size = c.emb_size + sum(c.feat_emb_sizes)
        for layer in range(c.enc_layers):
            for d in dirs:
                self._add_cell(add, f"enc.{layer}.{d}", in_size, h_dir, G)
            in_size = H
        if c.bidirectional_encoder:
            kinds = ("h", "c") if c.cell == "LSTM" else ("h",)
            for layer in range(min(c.enc_layers, c.dec_layers)):
                for kind in kinds:
                    add(f"bridge.{layer}.{kind}.W", (H, H))
                    add(f"bridge.{layer}.{kind}.b", (H,))

        in_size = c.emb_size + (H if c.input_feed else 0)
        for layer in range(c.dec_layers):
            self._add_cell(add, f"dec.{layer}", in_size, H, G)
            in_size = H

        if c.attention == "general":
            add("attn.W", (H, H))
        elif c.attention == "concat":
            add("attn.Wq", (H, H))
            add("attn.Wm", (H, H))
            add("attn.v", (H, 1))
        add("attn.out", (2 * H if c.attention != "none" else H, H))
        add("gen.W", (H, c.tgt_vocab_size))
        add("gen.b", (c.tgt_vocab_size,))
        if c.copy:
            add("copy.W", (H, 1))
            add("copy.b", (1,))

    def _add_cell(self, add, prefix, in_size, hidden, gates):
        add(f"{prefix}.W_x", (in_size, gates * hidden))
        add(f"{prefix}.W_h", (hidden, gates * hidden))
        add(f"{prefix}.b", (gates * hidden,))
        if gates == 4:
            self.params[f"{prefix}.b"].data[hidden:2 * hidden] = 1.0

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError("load", f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.data.shape:
                raise ShapeError("load", f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def copy_from(self, other):
        for name, p in self.params.items():
            np.copyto(p.data, other.params[name].data)

    def clone(self):
        # fresh Tensor objects so replicas never share tape ids
        other = object.__new__(Seq2SeqModel)
        other.config = self.config
        other.dtype = self.dtype
        other.params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        return other

    def checksum(self):
        crc = 0
        for name, p in self.params.items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc

    def n_params(self):
        return sum(p.data.size for p in self.params.values())

    def constant(self, arr):
        return Tensor(np.asarray(arr, dtype=self.dtype))


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------

def _linear(x, W, b=None):
    out = apply("matmul", [x, W])
    return apply("add", [out, b]) if b is not None else out


def _slice1(x, start, stop):
    return apply("slice", [x], {"axis": 1, "start": start, "stop": stop})


def lstm_cell(x_proj, state, W_h, hidden):
    """One LSTM step given the precomputed input projection (bias included).

    Gate order along the projection: input, forget, cell, output.
    """
    h, c = state
    z = apply("add", [x_proj, apply("matmul", [h, W_h])])
    if_gates = apply("sigmoid", [_slice1(z, 0, 2 * hidden)])
    i = _slice1(if_gates, 0, hidden)
    f = _slice1(if_gates, hidden, 2 * hidden)
    g = apply("tanh", [_slice1(z, 2 * hidden, 3 * hidden)])
    o = apply("sigmoid", [_slice1(z, 3 * hidden, 4 * hidden)])
    c_new = apply("add", [apply("mul", [f, c]), apply("mul", [i, g])])
    h_new = apply("mul", [o, apply("tanh", [c_new])])
    return h_new, c_new


def gru_cell(x_proj, state, W_h, hidden):
    """One GRU step; gate order reset, update, candidate.

    The candidate sees ``r * (h W_hn)``; the bias sits in ``x_proj``.
    """
    h, _ = state
    hw = apply("matmul", [h, W_h])
    rz = apply("sigmoid", [apply("add", [_slice1(x_proj, 0, 2 * hidden), _slice1(hw, 0, 2 * hidden)])])
    r = _slice1(rz, 0, hidden)
    z = _slice1(rz, hidden, 2 * hidden)
    n = apply("tanh", [apply("add", [_slice1(x_proj, 2 * hidden, 3 * hidden),
                                     apply("mul", [r, _slice1(hw, 2 * hidden, 3 * hidden)])])])
    # h' = (1 - z) * n + z * h = n + z * (h - n)
    h_new = apply("add", [n, apply("mul", [z, apply("sub", [h, n])])])
    return h_new, None


def _cell_fn(cell):
    return lstm_cell if cell == "LSTM" else gru_cell


def _masked(new, old, keep, drop):
    """Rows where ``keep`` is 1 take ``new``; the others keep ``old`` exactly."""
    return apply("add", [apply("mul", [new, keep]), apply("mul", [old, drop])])


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderOutput:
    memory_bank: Tensor          # S x B x H
    bank_bsh: Tensor             # B x S x H view used by attention
    mask: np.ndarray             # S x B, True at real positions
    final_states: list           # per encoder layer: (h, c or None)
    bank_proj: Tensor = None     # B x S x H, concat attention only
    lengths: np.ndarray = None

    def select(self, model, cols):
        """Constant copy restricted to batch columns ``cols`` (inference)."""
        cols = np.asarray(cols)
        bank = self.memory_bank.data[:, cols]
        return EncoderOutput(
            memory_bank=model.constant(bank),
            bank_bsh=model.constant(self.bank_bsh.data[cols]),
            mask=self.mask[:, cols],
            final_states=[(model.constant(h.data[cols]), None if c is None else model.constant(c.data[cols]))
                          for h, c in self.final_states],
            bank_proj=None if self.bank_proj is None else model.constant(self.bank_proj.data[cols]),
            lengths=None if self.lengths is None else self.lengths[cols],
        )


def _run_direction(model, prefix, xproj, mask_cols, reverse, hidden, B):
    """Unroll one direction; returns per-step outputs (in time order) and final state."""
    cfg = model.config
    step = _cell_fn(cfg.cell)
    S = xproj.shape[0]
    W_h = model[f"{prefix}.W_h"]
    zeros = model.constant(np.zeros((B, hidden)))
    state = (zeros, zeros if cfg.cell == "LSTM" else None)
    outputs = [None] * S
    order = range(S - 1, -1, -1) if reverse else range(S)
    for t in order:
        x_t = apply("reshape", [apply("slice", [xproj], {"axis": 0, "start": t, "stop": t + 1})],
                    {"shape": (B, xproj.shape[2])})
        h_new, c_new = step(x_t, state, W_h, hidden)
        col = mask_cols[t]
        if not col.all():
            keep = model.constant(np.repeat(col[:, None].astype(model.dtype), hidden, axis=1))
            drop = model.constant(1.0 - keep.data)
            h_new = _masked(h_new, state[0], keep, drop)
            if c_new is not None:
                c_new = _masked(c_new, state[1], keep, drop)
        state = (h_new, c_new)
        outputs[t] = h_new
    return outputs, state


def _stack_time(outputs, B, H):
    return apply("concat", [apply("reshape", [o], {"shape": (1, B, H)}) for o in outputs], {"axis": 0})


def embed_source(model, batch):
    emb = apply("embedding_lookup", [model["src_emb"]], {"ids": batch.src})
    if model.config.feat_vocab_sizes:
        feats = [apply("embedding_lookup", [model[f"src_feat_emb.{k}"]], {"ids": ids})
                 for k, ids in enumerate(batch.src_feats)]
        emb = apply("concat", [emb] + feats, {"axis": 2})
    return emb


def encode(model, batch, training=False, rng=None):
    cfg = model.config
    src = batch.src
    if src.ndim != 2:
        raise ShapeError("encode", f"source ids must be S x B, got {src.shape}")
    if src.max() >= cfg.src_vocab_size:
        raise ShapeError("encode", f"source id {src.max()} outside vocabulary of {cfg.src_vocab_size}")
    if len(batch.src_feats) != len(cfg.feat_vocab_sizes):
        raise ShapeError("encode", f"batch carries {len(batch.src_feats)} feature streams, model expects "
                                   f"{len(cfg.feat_vocab_sizes)}")
    S, B = src.shape
    H = cfg.rnn_size
    mask = batch.src_mask
    dirs = ("fwd", "bwd") if cfg.bidirectional_encoder else ("fwd",)
    h_dir = H // len(dirs)
    x = embed_source(model, batch)
    finals = []
    for layer in range(cfg.enc_layers):
        if layer > 0:
            x = dropout(x, cfg.dropout, rng, training)
        in_size = x.shape[2]
        flat = apply("reshape", [x], {"shape": (S * B, in_size)})
        outs, states = [], []
        for d in dirs:
            p = f"enc.{layer}.{d}"
            proj = _linear(flat, model[f"{p}.W_x"], model[f"{p}.b"])
            proj = apply("reshape", [proj], {"shape": (S, B, proj.shape[1])})
            o, st = _run_direction(model, p, proj, mask, reverse=(d == "bwd"), hidden=h_dir, B=B)
            outs.append(_stack_time(o, B, h_dir))
            states.append(st)
        x = outs[0] if len(outs) == 1 else apply("concat", outs, {"axis": 2})
        if len(states) == 1:
            finals.append(states[0])
        else:
            (hf, cf), (hb, cb) = states
            finals.append((apply("concat", [hf, hb], {"axis": 1}),
                           None if cf is None else apply("concat", [cf, cb], {"axis": 1})))
    if cfg.bidirectional_encoder:
        bridged = []
        for layer, (h, c) in enumerate(finals[: cfg.dec_layers]):
            h = _linear(h, model[f"bridge.{layer}.h.W"], model[f"bridge.{layer}.h.b"])
            if c is not None:
                c = _linear(c, model[f"bridge.{layer}.c.W"], model[f"bridge.{layer}.c.b"])
            bridged.append((h, c))
        finals = bridged
    bank_bsh = apply("transpose", [x], {"axes": (1, 0, 2)})
    bank_proj = None
    if cfg.attention == "concat":
        proj = apply("matmul", [apply("reshape", [bank_bsh], {"shape": (B * S, H)}), model["attn.Wm"]])
        bank_proj = apply("reshape", [proj], {"shape": (B, S, H)})
    return EncoderOutput(x, bank_bsh, mask, finals, bank_proj, batch.src_lengths.copy())


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _mask_add(model, mask_sb):
    """B x S additive mask: 0 at real positions, -inf at padding."""
    return model.constant(np.where(mask_sb.T, 0.0, -np.inf))


def _scores_bs(model, query, enc, kind, params=None):
    params = params if params is not None else model.params
    B, S, H = enc.bank_bsh.shape
    if kind == "dot":
        if query.shape[1] != H:
            raise ShapeError("attention_score", f"dot needs equal widths, query {query.shape[1]} vs memory {H}")
        q = query
    elif kind == "general":
        q = apply("matmul", [query, params["attn.W"]])
    elif kind == "concat":
        qp = apply("matmul", [query, params["attn.Wq"]])
        A = qp.shape[1]
        ones = Tensor(np.ones((B, S, 1), dtype=qp.dtype))
        tiled = apply("matmul", [ones, apply("reshape", [qp], {"shape": (B, 1, A)})])
        bank_proj = enc.bank_proj
        if bank_proj is None:
            flat = apply("reshape", [enc.bank_bsh], {"shape": (B * S, H)})
            bank_proj = apply("reshape", [apply("matmul", [flat, params["attn.Wm"]])], {"shape": (B, S, A)})
        hidden = apply("tanh", [apply("add", [tiled, bank_proj])])
        scores = apply("matmul", [apply("reshape", [hidden], {"shape": (B * S, A)}), params["attn.v"]])
        return apply("reshape", [scores], {"shape": (B, S)})
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    scores = apply("matmul", [enc.bank_bsh, apply("reshape", [q], {"shape": (B, H, 1)})])
    return apply("reshape", [scores], {"shape": (B, S)})


def _attend_bs(model, scores_bs, bank_bsh, mask_sb):
    if not mask_sb.any(axis=0).all():
        raise ValueError("attention column with every source position masked")
    B, S, H = bank_bsh.shape
    if not mask_sb.all():
        scores_bs = apply("add", [scores_bs, _mask_add(model, mask_sb)])
    weights = apply("softmax", [scores_bs], {"axis": 1})
    context = apply("matmul", [apply("reshape", [weights], {"shape": (B, 1, S)}), bank_bsh])
    return apply("reshape", [context], {"shape": (B, H)}), weights


class _BareModel:
    dtype = np.dtype(np.float64)

    def constant(self, arr):
        return Tensor(np.asarray(arr, dtype=np.float64))


def attention_score(query, memory, kind, params=None, mask=None):
    """Scores S x B for ``query`` (B x H) against ``memory`` (S x B x H).

    ``params`` holds ``attn.W`` (general) or ``attn.Wq``/``attn.Wm``/``attn.v``
    (concat). Masked positions come back as -inf.
    """
    S, B, H = memory.shape
    if query.shape[0] != B:
        raise ShapeError("attention_score", f"query batch {query.shape[0]} vs memory batch {B}")
    if kind == "dot" and query.shape[1] != H:
        raise ShapeError("attention_score", f"dot needs equal widths, query {query.shape[1]} vs memory {H}")
    enc = EncoderOutput(memory, apply("transpose", [memory], {"axes": (1, 0, 2)}),
                        np.ones((S, B), bool) if mask is None else mask, [])
    scores = _scores_bs(_BareModel(), query, enc, kind, params or {})
    if mask is not None and not mask.all():
        scores = apply("add", [scores, _mask_add(_BareModel(), mask)])
    return apply("transpose", [scores], {"axes": (1, 0)})


def attend(scores, memory, mask=None):
    """Softmax over unmasked source positions and the weighted context.

    Returns ``(context B x H, weights S x B)``.
    """
    S, B, H = memory.shape
    mask = np.ones((S, B), bool) if mask is None else np.asarray(mask, bool)
    if not mask.any(axis=0).all():
        raise ValueError("attention column with every source position masked")
    bank = apply("transpose", [memory], {"axes": (1, 0, 2)})
    context, weights = _attend_bs(_BareModel(), apply("transpose", [scores], {"axes": (1, 0)}), bank, mask)
    return context, apply("transpose", [weights], {"axes": (1, 0)})


# ---------------------------------------------------------------------------
# copy generator
# ---------------------------------------------------------------------------

def _copy_mix_probs(gen_log_probs, attn_bs, gate, src_map):
    B, V = gen_log_probs.shape
    _, S, V_ext = src_map.shape
    dt = gen_log_probs.dtype
    if attn_bs.shape != (B, S):
        raise ShapeError("copy", f"attention {attn_bs.shape} inconsistent with src_map {src_map.shape}")
    if V_ext < V:
        raise ShapeError("copy", f"extended vocabulary {V_ext} smaller than target vocabulary {V}")
    p_vocab = apply("exp", [gen_log_probs])
    if V_ext > V:
        p_vocab = apply("concat", [p_vocab, Tensor(np.zeros((B, V_ext - V), dtype=dt))], {"axis": 1})
    ones_row = Tensor(np.ones((1, V_ext), dtype=dt))
    g_wide = apply("matmul", [gate, ones_row])
    not_g_wide = apply("matmul", [apply("sub", [Tensor(np.ones((B, 1), dtype=dt)), gate]), ones_row])
    copied = apply("matmul", [apply("reshape", [attn_bs], {"shape": (B, 1, S)}), src_map])
    copied = apply("reshape", [copied], {"shape": (B, V_ext)})
    return apply("add", [apply("mul", [g_wide, p_vocab]), apply("mul", [not_g_wide, copied])])


def copy_log_probs(gen_log_probs, attn_weights, copy_gate, src_map):
    """Log of g * p_vocab(w) + (1 - g) * sum of attention on source copies of w.

    ``attn_weights`` is S x B, ``copy_gate`` B x 1 and ``src_map`` a constant
    B x S x V_ext one-hot map from source positions to extended ids.
    """
    src_map_t = src_map if isinstance(src_map, Tensor) else Tensor(np.asarray(src_map, dtype=gen_log_probs.dtype))
    attn_bs = apply("transpose", [attn_weights], {"axes": (1, 0)})
    return apply("log", [_copy_mix_probs(gen_log_probs, attn_bs, copy_gate, src_map_t)])


@dataclass
class CopyInfo:
    """Per-batch extended vocabulary for the copy generator."""

    src_map: np.ndarray          # B x S x V_ext
    ext_tokens: list             # per example: extended id -> token for ids >= V
    tgt_ext: np.ndarray = None   # T x B target ids in the extended vocabulary

    @property
    def size(self):
        return self.src_map.shape[2]


def build_copy_info(batch, vocab_tgt, per_example=False):
    """Extended ids: the target vocabulary, then source tokens missing from it.

    Training batches share one extension built from the union of their
    source tokens; ``per_example=True`` numbers each example's extension from
    V independently (used at decoding time).
    """
    V = len(vocab_tgt)
    S, B = batch.src.shape
    union = {}
    ext_ids, ext_tokens = [], []
    for toks in batch.src_tokens:
        local = {} if per_example else union
        ids = []
        for tok in toks:
            i = vocab_tgt.stoi.get(tok)
            if i is None:
                i = local.setdefault(tok, V + len(local))
            ids.append(i)
        ext_ids.append(ids)
        ext_tokens.append({i: t for t, i in local.items()})
    V_ext = V + (max((len(m) for m in ext_tokens), default=0) if per_example else len(union))
    if not per_example:
        ext_tokens = [{i: t for t, i in union.items()} for _ in range(B)]
    src_map = np.zeros((B, S, V_ext))
    for b, ids in enumerate(ext_ids):
        src_map[b, np.arange(len(ids)), ids] = 1.0
    tgt_ext = None
    if batch.tgt_tokens:
        tgt_ext = batch.tgt.copy()
        for b, toks in enumerate(batch.tgt_tokens):
            in_src = set(batch.src_tokens[b])
            rev = {t: i for i, t in ext_tokens[b].items()}
            for t, tok in enumerate(toks, start=1):
                if tgt_ext[t, b] == UNK_ID and tok in in_src and tok in rev:
                    tgt_ext[t, b] = rev[tok]
    return CopyInfo(src_map, ext_tokens, tgt_ext)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

@dataclass
class DecoderState:
    layers: list                 # per decoder layer: (h, c or None)

    def select(self, model, rows):
        rows = np.asarray(rows)
        return DecoderState([(model.constant(h.data[rows]), None if c is None else model.constant(c.data[rows]))
                             for h, c in self.layers])


def init_decoder_state(model, enc):
    cfg = model.config
    B = enc.memory_bank.shape[1]
    zeros = model.constant(np.zeros((B, cfg.rnn_size)))
    layers = []
    for layer in range(cfg.dec_layers):
        if layer < len(enc.final_states):
            h, c = enc.final_states[layer]
            if cfg.cell == "LSTM" and c is None:
                c = zeros
            layers.append((h, c if cfg.cell == "LSTM" else None))
        else:
            layers.append((zeros, zeros if cfg.cell == "LSTM" else None))
    return DecoderState(layers)


def init_attn_vec(model, batch_size):
    return model.constant(np.zeros((batch_size, model.config.rnn_size)))


@dataclass
class StepOutput:
    log_probs: Tensor            # B x V (B x V_ext with copy)
    attn: Tensor                 # B x S (batch-major), None without attention
    attn_vec: Tensor             # B x H
    state: DecoderState
    probs: Tensor = None         # copy mode: mixture probabilities before the log

    @property
    def attn_weights(self):
        """Attention as S x B."""
        return None if self.attn is None else apply("transpose", [self.attn], {"axes": (1, 0)})


def decode_step(model, prev_ids, prev_attn_vec, state, enc, training=False, rng=None, copy_info=None):
    cfg = model.config
    if state is None or not state.layers:
        raise ValueError("decoder state is not initialized; call init_decoder_state first")
    prev_ids = np.asarray(prev_ids)
    B = prev_ids.shape[0]
    H = cfg.rnn_size
    x = apply("embedding_lookup", [model["tgt_emb"]], {"ids": prev_ids})
    if cfg.input_feed:
        x = apply("concat", [x, prev_attn_vec], {"axis": 1})
    step = _cell_fn(cfg.cell)
    new_layers = []
    for layer, st in enumerate(state.layers):
        if layer > 0:
            x = dropout(x, cfg.dropout, rng, training)
        p = f"dec.{layer}"
        h, c = step(_linear(x, model[f"{p}.W_x"], model[f"{p}.b"]), st, model[f"{p}.W_h"], H)
        new_layers.append((h, c))
        x = h
    top = x
    attn = None
    if cfg.attention == "none":
        attn_vec = apply("tanh", [apply("matmul", [top, model["attn.out"]])])
    else:
        scores = _scores_bs(model, top, enc, cfg.attention)
        context, attn = _attend_bs(model, scores, enc.bank_bsh, enc.mask)
        attn_vec = apply("tanh", [apply("matmul", [apply("concat", [context, top], {"axis": 1}), model["attn.out"]])])
    out = dropout(attn_vec, cfg.dropout, rng, training)
    log_probs = apply("log_softmax", [_linear(out, model["gen.W"], model["gen.b"])], {"axis": 1})
    probs = None
    if cfg.copy:
        if copy_info is None:
            raise ValueError("copy model needs the batch's extended vocabulary")
        gate = apply("sigmoid", [_linear(out, model["copy.W"], model["copy.b"])])
        src_map = model.constant(copy_info.src_map)
        if src_map.shape[0] != B:
            raise ShapeError("copy", f"src_map batch {src_map.shape[0]} vs decoder batch {B}")
        probs = _copy_mix_probs(log_probs, attn, gate, src_map)
        log_probs = apply("log", [probs])
    return StepOutput(log_probs, attn, attn_vec, DecoderState(new_layers), probs)


def run_decoder(model, batch, enc, training=False, rng=None, copy_info=None):
    """Teacher-forced pass; yields one StepOutput per predicted position."""
    state = init_decoder_state(model, enc)
    attn_vec = init_attn_vec(model, batch.size)
    for t in range(batch.tgt.shape[0] - 1):
        out = decode_step(model, batch.tgt[t], attn_vec, state, enc, training, rng, copy_info)
        yield out
        state, attn_vec = out.state, out.attn_vec


def forward_loss(model, batch, training=False, rng=None, vocab_tgt=None, return_stats=False):
    """Teacher-forced total negative log-likelihood over non-pad targets.

    Returns ``(total_nll, token_count)``; with ``return_stats`` also the
    number of positions whose argmax equals the gold token.
    """
    cfg = model.config
    enc = encode(model, batch, training, rng)
    copy_info = None
    gold = batch.tgt
    if cfg.copy:
        if vocab_tgt is None:
            raise ValueError("copy model needs vocab_tgt to build the extended vocabulary")
        copy_info = build_copy_info(batch, vocab_tgt)
        gold = copy_info.tgt_ext
    mask = batch.tgt_mask[1:]
    steps = list(run_decoder(model, batch, enc, training, rng, copy_info))
    T1, B = mask.shape
    V = steps[0].log_probs.shape[1]
    picks = np.zeros((T1 * B, V), dtype=model.dtype)
    rows = np.arange(T1 * B)
    gold_flat = gold[1:].reshape(-1)
    if cfg.copy:
        # gather probabilities then take the log: log(0) at unused slots stays out of the sum
        picks[rows, np.where(mask.reshape(-1), gold_flat, PAD_ID)] = 1.0
        probs = apply("concat", [s.probs for s in steps], {"axis": 0})
        picked = apply("sum", [apply("mul", [probs, model.constant(picks)])], {"axis": 1})
        logp = apply("mul", [apply("log", [picked]), model.constant(mask.reshape(-1).astype(model.dtype))])
        total = apply("scale", [apply("sum", [logp])], {"factor": -1.0})
    else:
        picks[rows, gold_flat] = mask.reshape(-1)
        logp = apply("concat", [s.log_probs for s in steps], {"axis": 0})
        total = apply("scale", [apply("sum", [apply("mul", [logp, model.constant(picks)])])], {"factor": -1.0})
    n_tokens = int(mask.sum())
    if return_stats:
        pred = np.concatenate([s.log_probs.data.argmax(axis=1) for s in steps])
        correct = int(np.sum((pred == gold_flat) & mask.reshape(-1)))
        return total, n_tokens, correct
    return total, n_tokens


def perplexity(total_nll, n_tokens):
    return math.exp(total_nll / max(n_tokens, 1))
