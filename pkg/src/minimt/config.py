"""Shipped defaults, presets, and flag > file > default resolution."""
from __future__ import annotations

import hashlib
import json

DEFAULTS = {
    # preprocess
    "max_len": 50,
    "src_vocab_size": 50_000,
    "tgt_vocab_size": 50_000,
    "words_min_frequency": 1,
    "share_vocab": False,
    "shard_size": 100_000,
    "tokenize": False,
    "bpe_merges": 0,
    "src_features": 0,
    "seed": 1,
    # model
    "cell": "LSTM",
    "layers": 2,
    "rnn_size": 500,
    "word_vec_size": 300,
    "brnn": False,
    "attention": "general",
    "input_feed": True,
    "copy": False,
    "dropout": 0.1,
    "param_init": 0.1,
    "precision": 64,
    # training
    "epochs": 13,
    "batch_size": 64,
    "optim": "SGD",
    "learning_rate": None,        # SGD 1.0, Adam 0.001
    "learning_rate_decay": 0.5,
    "start_decay_at": 9,
    "clip_norm": 5.0,
    "replicas": 1,
    "mode": "sync",
    "staleness_bound": 1,
    "report_every": 50,
    # translation
    "beam_size": 5,
    "decode_max_len": 100,
    "n_best": 1,
    "length_alpha": 0.0,
    "coverage_beta": 0.0,
    "replace_unk": False,
    "phrase_table": None,
    "max_unk": None,
    "translate_batch_size": 30,
    # server
    "host": "127.0.0.1",
    "port": 5000,
}

PRESETS = {
    "default": {},
    # subword setups need longer sequences
    "bpe": {"max_len": 100, "bpe_merges": 32_000, "tokenize": True, "share_vocab": True},
}


class ConfigFileError(ValueError):
    pass


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigFileError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - set(DEFAULTS) - {"preset"})
    if unknown:
        raise ConfigFileError(f"{path}: unknown keys {unknown}")
    return data


def resolve(flags=None, config_path=None, preset=None):
    """Effective configuration: flags over config file over preset over defaults.

    ``flags`` holds only explicitly given values (None means not given).
    """
    file_cfg = load_config_file(config_path) if config_path else {}
    preset = preset or file_cfg.get("preset") or "default"
    if preset not in PRESETS:
        raise ConfigFileError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[preset])
    cfg.update({k: v for k, v in file_cfg.items() if k != "preset"})
    cfg.update({k: v for k, v in (flags or {}).items() if v is not None})
    cfg["preset"] = preset
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
