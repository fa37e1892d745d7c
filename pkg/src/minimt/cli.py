"""Command line: preprocess, train, translate, embeddings, serve."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as C
from .data import (
    DataError,
    ShardSet,
    Vocab,
    build_vocab,
    make_batches,
    read_parallel,
    save_shard,
    shard_corpus,
    split_features,
    write_json,
)
from .model import ModelConfig, Seq2SeqModel
from .tensor import atomic_write_bytes
from .tokenize import JOINER, bpe_learn, bpe_segment, tokenize
from .trainer import OptimState, Progress, TrainSchedule, Trainer, load_checkpoint, save_checkpoint
from .translate import Translator, dump_attention

log = logging.getLogger("minimt")

PREPROCESS_KEYS = ("max_len", "src_vocab_size", "tgt_vocab_size", "words_min_frequency", "share_vocab", "shard_size",
                   "tokenize", "bpe_merges", "src_features", "seed")
MODEL_KEYS = ("cell", "layers", "rnn_size", "word_vec_size", "brnn", "attention", "input_feed", "copy", "dropout",
              "param_init", "precision")
TRAIN_KEYS = ("epochs", "batch_size", "optim", "learning_rate", "learning_rate_decay", "start_decay_at", "clip_norm",
              "replicas", "mode", "staleness_bound", "report_every", "seed")
TRANSLATE_KEYS = ("beam_size", "decode_max_len", "n_best", "length_alpha", "coverage_beta", "replace_unk",
                  "phrase_table", "max_unk", "translate_batch_size")
SERVE_KEYS = TRANSLATE_KEYS + ("host", "port")
CHOICES = {"cell": ("LSTM", "GRU"), "attention": ("general", "dot", "concat", "none"), "optim": ("SGD", "Adam"),
           "mode": ("sync", "async"), "precision": (32, 64)}


class CliError(Exception):
    pass


def _add_keys(parser, keys):
    for key in keys:
        default = C.DEFAULTS[key]
        flag = "--" + key
        if isinstance(default, bool):
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=None,
                                help=f"(default {default})")
            continue
        kind = type(default) if default is not None else None
        if key in ("learning_rate", "length_alpha", "coverage_beta"):
            kind = float
        elif key == "max_unk":
            kind = int
        elif kind is None:
            kind = str
        parser.add_argument(flag, type=kind, default=None, choices=CHOICES.get(key), help=f"(default {default})")


def _common(parser):
    parser.add_argument("--config", help="JSON file of option values")
    parser.add_argument("--preset", choices=sorted(C.PRESETS), help="named bundle of defaults")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    p = argparse.ArgumentParser(prog="minimt", description="Attention-based neural machine translation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("preprocess", help="build vocabularies and shards from parallel text")
    pre.add_argument("--train_src", required=True)
    pre.add_argument("--train_tgt", required=True)
    pre.add_argument("--valid_src")
    pre.add_argument("--valid_tgt")
    pre.add_argument("--save_data", required=True, help="output directory")
    _add_keys(pre, PREPROCESS_KEYS)
    _common(pre)

    tr = sub.add_parser("train", help="train a model on preprocessed data")
    tr.add_argument("--data", required=True, help="manifest.json written by preprocess")
    tr.add_argument("--save_model", required=True, help="checkpoint path prefix")
    tr.add_argument("--from", dest="resume", help="resume from this checkpoint")
    tr.add_argument("--log_file")
    _add_keys(tr, MODEL_KEYS + tuple(k for k in TRAIN_KEYS if k not in MODEL_KEYS))
    _common(tr)

    tl = sub.add_parser("translate", help="translate a file with a trained model")
    tl.add_argument("--model", required=True)
    tl.add_argument("--src", required=True)
    tl.add_argument("--output", required=True)
    tl.add_argument("--nbest_output", help="write 'rank ||| text ||| norm ||| raw' lines here")
    tl.add_argument("--dump_beam", help="write attention matrices (JSON) here")
    _add_keys(tl, TRANSLATE_KEYS)
    _common(tl)

    em = sub.add_parser("embeddings", help="import or export word embeddings")
    em.add_argument("action", choices=("import", "export"))
    em.add_argument("--model", required=True)
    em.add_argument("--side", choices=("src", "tgt"), default="src")
    em.add_argument("--vectors", required=True, help="text file 'word v1 ... vd'")
    em.add_argument("--vocab", help="vocabulary file (default: the one recorded in the checkpoint)")
    em.add_argument("--output", help="checkpoint to write on import (default: overwrite --model)")
    em.add_argument("-v", "--verbose", action="store_true")

    sv = sub.add_parser("serve", help="run the JSON-over-HTTP translation server")
    sv.add_argument("--model", required=True)
    sv.add_argument("--max_input_len", type=int, help="reject sources longer than this (default: training max_len)")
    _add_keys(sv, SERVE_KEYS)
    _common(sv)
    return p


def _flags(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def _tokenizer(cfg, bpe):
    def fn(line):
        toks = tokenize(line) if cfg["tokenize"] else line.split()
        return bpe_segment(bpe, toks) if bpe is not None else toks
    return fn


def cmd_preprocess(args):
    cfg = C.resolve(_flags(args, PREPROCESS_KEYS), args.config, args.preset)
    for path in (args.train_src, args.train_tgt):
        if not os.path.exists(path):
            raise CliError(f"no such file: {path}")
    if (args.valid_src is None) != (args.valid_tgt is None):
        raise CliError("give both --valid_src and --valid_tgt or neither")
    out = args.save_data
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    nf = cfg["src_features"]

    bpe = None
    if cfg["bpe_merges"] > 0:
        base = _tokenizer(cfg, None)

        def words():
            # merges are learned on word cores; joiner marks are re-attached when segmenting
            for _, s, t in read_parallel(args.train_src, args.train_tgt, base):
                for w in split_features(s, nf)[0] + t:
                    core = w.strip(JOINER)
                    if core:
                        yield core
        bpe = bpe_learn(words(), cfg["bpe_merges"])
    tok = _tokenizer(cfg, bpe)

    def sides():
        for _, s, t in read_parallel(args.train_src, args.train_tgt, tok):
            if filter_ok(s, t):
                yield split_features(s, nf), t

    def filter_ok(s, t):
        return len(s) <= cfg["max_len"] and len(t) <= cfg["max_len"]

    if cfg["share_vocab"]:
        size = max(cfg["src_vocab_size"], cfg["tgt_vocab_size"])
        vs = build_vocab((w + t for (w, _), t in sides()), size, cfg["words_min_frequency"])
        vt = vs
    else:
        vs = build_vocab((w for (w, _), _ in sides()), cfg["src_vocab_size"], cfg["words_min_frequency"])
        vt = build_vocab((t for _, t in sides()), cfg["tgt_vocab_size"], cfg["words_min_frequency"])
    feat_vocabs = [build_vocab((f[k] for (_, f), _ in sides()), 1000) for k in range(nf)]

    vs.save(os.path.join(out, "src.vocab"))
    vt.save(os.path.join(out, "tgt.vocab"))
    for k, fv in enumerate(feat_vocabs):
        fv.save(os.path.join(out, f"src.feat{k}.vocab"))
    if bpe is not None:
        bpe.save(os.path.join(out, "bpe.codes"))

    manifest = {
        "format": "minimt-data",
        "version": 1,
        "config": {k: cfg[k] for k in PREPROCESS_KEYS},
        "preset": cfg["preset"],
        "vocab": {"src": "src.vocab", "tgt": "tgt.vocab",
                  "src_feats": [f"src.feat{k}.vocab" for k in range(nf)],
                  "src_digest": vs.digest(), "tgt_digest": vt.digest()},
        "bpe_codes": "bpe.codes" if bpe is not None else None,
        "tokenize": cfg["tokenize"],
        "max_len": cfg["max_len"],
        "seed": cfg["seed"],
        "shards": {},
    }
    splits = [("train", args.train_src, args.train_tgt)]
    if args.valid_src:
        splits.append(("valid", args.valid_src, args.valid_tgt))
    for split, sp, tp in splits:
        entries = []
        for shard in shard_corpus(sp, tp, cfg["shard_size"], cfg["max_len"], nf, tok):
            name = f"{split}.{shard.index}.shard"
            save_shard(os.path.join(out, name), shard, vs, vt, feat_vocabs)
            entries.append({"path": name, "size": len(shard)})
        manifest["shards"][split] = entries
    write_json(os.path.join(out, "manifest.json"), manifest)
    n = sum(e["size"] for e in manifest["shards"]["train"])
    log.info("preprocess: %d training pairs in %d shard(s); vocab %d/%d", n, len(manifest["shards"]["train"]),
             len(vs), len(vt))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def model_config(cfg, data, model_overrides=None):
    return ModelConfig(
        src_vocab_size=len(data.vocab_src),
        tgt_vocab_size=len(data.vocab_tgt),
        cell=cfg["cell"],
        enc_layers=cfg["layers"],
        dec_layers=cfg["layers"],
        rnn_size=cfg["rnn_size"],
        emb_size=cfg["word_vec_size"],
        bidirectional_encoder=cfg["brnn"],
        attention=cfg["attention"],
        input_feed=cfg["input_feed"],
        copy=cfg["copy"],
        dropout=cfg["dropout"],
        feat_vocab_sizes=[len(v) for v in data.feat_vocabs],
        init_range=cfg["param_init"],
    )


def _data_meta(data):
    m = data.manifest
    root = data.root
    return {
        "manifest": data.manifest_path,
        "vocab_src": os.path.join(root, m["vocab"]["src"]),
        "vocab_tgt": os.path.join(root, m["vocab"]["tgt"]),
        "vocab_src_feats": [os.path.join(root, p) for p in m["vocab"].get("src_feats", [])],
        "vocab_src_digest": data.vocab_src.digest(),
        "vocab_tgt_digest": data.vocab_tgt.digest(),
        "tokenize": m.get("tokenize", False),
        "bpe_codes": os.path.join(root, m["bpe_codes"]) if m.get("bpe_codes") else None,
        "max_len": m.get("max_len"),
    }


def cmd_train(args):
    if not os.path.exists(args.data):
        raise CliError(f"missing manifest {args.data}")
    keys = MODEL_KEYS + TRAIN_KEYS
    cfg = C.resolve(_flags(args, keys), args.config, args.preset)
    data = ShardSet(args.data)
    dtype = np.float64 if cfg["precision"] == 64 else np.float32
    prefix = args.save_model
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    handler = None
    if args.log_file:
        handler = logging.FileHandler(args.log_file, encoding="utf-8")
        logging.getLogger("minimt").addHandler(handler)
    try:
        valid = None
        if data.manifest["shards"].get("valid"):
            valid = make_batches(data.examples("valid"), cfg["batch_size"], data.vocab_src, data.vocab_tgt,
                                 feat_vocabs=data.feat_vocabs)
        schedule = TrainSchedule(epochs=cfg["epochs"], replicas=cfg["replicas"], mode=cfg["mode"],
                                 staleness_bound=cfg["staleness_bound"], seed=cfg["seed"],
                                 batch_size=cfg["batch_size"], report_every=cfg["report_every"])
        if args.resume:
            model, optim, meta = load_checkpoint(args.resume)
            if meta.get("data", {}).get("vocab_src_digest") not in (None, data.vocab_src.digest()):
                raise CliError("checkpoint was trained with a different source vocabulary")
            progress = Progress.from_dict(meta.get("progress", {}))
        else:
            model = Seq2SeqModel(model_config(cfg, data), seed=cfg["seed"], dtype=dtype)
            optim = OptimState(method=cfg["optim"], learning_rate=cfg["learning_rate"],
                               decay_factor=cfg["learning_rate_decay"], start_decay_at=cfg["start_decay_at"],
                               clip_norm=cfg["clip_norm"])
            progress = Progress()
        extra = {"data": _data_meta(data), "train_config": {k: cfg[k] for k in keys}, "preset": cfg["preset"],
                 "effective_config_hash": C.config_hash({k: cfg[k] for k in keys})}

        def checkpoint(trainer, tag):
            epoch = trainer.progress.epoch - 1
            path = f"{prefix}_e{epoch}.ckpt" if tag == "epoch" else f"{prefix}_best.ckpt"
            trainer.save(path, extra)
            log.info("saved %s", path)

        trainer = Trainer(model, optim, schedule, data, data.vocab_src, data.vocab_tgt, valid_batches=valid,
                          feat_vocabs=data.feat_vocabs, progress=progress, checkpoint=checkpoint, sink=log.info)
        if not args.resume:
            trainer.save(f"{prefix}_e0.ckpt", extra)
            log.info("saved %s_e0.ckpt", prefix)
        if schedule.epochs == 0:
            return 0
        trainer.run()
        last = f"{prefix}_last.ckpt"
        trainer.save(last, extra)
        log.info("training done: %d updates; saved %s", optim.step, last)
    finally:
        if handler is not None:
            logging.getLogger("minimt").removeHandler(handler)
            handler.close()
    return 0


# ---------------------------------------------------------------------------
# translate
# ---------------------------------------------------------------------------

def cmd_translate(args):
    cfg = C.resolve(_flags(args, TRANSLATE_KEYS), args.config, args.preset)
    translator = Translator(args.model)
    opts = translator.options(cfg)
    with open(args.src, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    results = translator.translate_lines(lines, opts, cfg["translate_batch_size"])
    text = "".join(r.text + "\n" for r in results)
    outputs = [(args.output, text)]
    if args.nbest_output:
        rows = []
        for r in results:
            rows.extend(f"{rank} ||| {t} ||| {n!r} ||| {raw!r}\n" for rank, (t, n, raw) in enumerate(r.n_best, 1))
        outputs.append((args.nbest_output, "".join(rows)))
    if args.dump_beam:
        outputs.append((args.dump_beam, dump_attention(results)))
    for path, content in outputs:
        atomic_write_bytes(path, content.encode("utf-8"))
    log.info("translated %d line(s)", len(lines))
    return 0


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def read_vectors(path, dim):
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise CliError(f"{path}:{n}: vector for {word!r} has {len(values)} dimensions, model uses {dim}")
            if word in vectors:
                raise CliError(f"{path}:{n}: duplicate word {word!r}")
            vectors[word] = np.array([float(v) for v in values])
    return vectors


def cmd_embeddings(args):
    model, optim, meta = load_checkpoint(args.model)
    name = "src_emb" if args.side == "src" else "tgt_emb"
    vocab_path = args.vocab or meta.get("data", {}).get(f"vocab_{args.side}")
    if vocab_path is None:
        raise CliError("no vocabulary given and none recorded in the checkpoint")
    vocab = Vocab.load(vocab_path)
    table = model.params[name].data
    if len(vocab) != table.shape[0]:
        raise CliError(f"vocabulary has {len(vocab)} entries, embedding table {table.shape[0]}")
    if args.action == "export":
        lines = [tok + " " + " ".join(repr(float(x)) for x in table[i]) + "\n" for i, tok in enumerate(vocab.itos)]
        atomic_write_bytes(args.vectors, "".join(lines).encode("utf-8"))
        print(f"exported {len(vocab)} vectors")
        return 0
    vectors = read_vectors(args.vectors, table.shape[1])
    loaded = 0
    for i, tok in enumerate(vocab.itos):
        if tok in vectors:
            table[i] = vectors[tok]
            loaded += 1
    out = args.output or args.model
    extra = {k: v for k, v in meta.items() if k not in ("format", "version", "model_config", "config_hash", "dtype",
                                                       "optim", "progress", "container_sha256")}
    save_checkpoint(out, model, optim, meta.get("progress"), extra)
    print(f"{loaded} loaded, {len(vocab) - loaded} kept")
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------

def cmd_serve(args):
    from .server import serve

    cfg = C.resolve(_flags(args, SERVE_KEYS), args.config, args.preset)
    translator = Translator(args.model)
    max_input = args.max_input_len or translator.meta.get("data", {}).get("max_len") or C.DEFAULTS["max_len"]
    serve(translator, cfg, max_input_len=max_input)
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "translate": cmd_translate,
            "embeddings": cmd_embeddings, "serve": cmd_serve}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (CliError, DataError, C.ConfigFileError, ValueError, OSError) as exc:
        print(f"minimt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
