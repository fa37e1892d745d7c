import json
import os

import numpy as np
import pytest
from conftest import copy_corpus, write_lines

from minimt.cli import main
from minimt.data import Vocab
from minimt.trainer import load_checkpoint

TINY_MODEL = ["--rnn_size", "8", "--word_vec_size", "4", "--layers", "1", "--report_every", "0"]


def preprocess(tmp_path, src_lines, tgt_lines=None, out="data", *extra):
    src = write_lines(tmp_path / "src.txt", src_lines)
    tgt = write_lines(tmp_path / "tgt.txt", tgt_lines if tgt_lines is not None else src_lines)
    rc = main(["preprocess", "--train_src", src, "--train_tgt", tgt, "--valid_src", src, "--valid_tgt", tgt,
               "--save_data", str(tmp_path / out), *extra])
    return rc, tmp_path / out


def read_dir(path):
    return {name: (path / name).read_bytes() for name in sorted(os.listdir(path))}


def test_preprocess_ten_lines(tmp_path):
    lines = copy_corpus(10, seed=4)
    rc, out = preprocess(tmp_path, lines)
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["shards"]["train"]) == 1
    assert manifest["shards"]["train"][0]["size"] == 10
    vocab = Vocab.load(str(out / "src.vocab"))
    assert set(vocab.itos[4:]) == {w for line in lines for w in line.split()}
    assert manifest["config"]["max_len"] == 50


def test_preprocess_is_idempotent(tmp_path):
    lines = copy_corpus(30, seed=5)
    _, a = preprocess(tmp_path, lines, None, "a", "--shard_size", "7")
    _, b = preprocess(tmp_path, lines, None, "b", "--shard_size", "7")
    assert read_dir(a) == read_dir(b)


def test_preprocess_line_mismatch_names_line(tmp_path, capsys):
    rc, out = preprocess(tmp_path, ["a b", "c", "d"], ["a b", "c"])
    assert rc == 1
    assert "line 3" in capsys.readouterr().err
    assert not (out / "manifest.json").exists()


def test_preprocess_with_tokenizer_and_bpe(tmp_path):
    lines = ["Hello, world!", "Hello again, world.", "The world says hello."]
    rc, out = preprocess(tmp_path, lines, None, "data", "--tokenize", "--bpe_merges", "8")
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["tokenize"] and manifest["bpe_codes"] == "bpe.codes"
    assert main(["train", "--data", str(out / "manifest.json"), "--save_model", str(tmp_path / "m"),
                 "--epochs", "0", *TINY_MODEL]) == 0
    src = write_lines(tmp_path / "in.txt", ["Hello, world!"])
    assert main(["translate", "--model", str(tmp_path / "m_e0.ckpt"), "--src", src,
                 "--output", str(tmp_path / "out.txt"), "--decode_max_len", "3"]) == 0
    assert len((tmp_path / "out.txt").read_text().splitlines()) == 1


def test_train_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    _, out = preprocess(tmp_path, copy_corpus(20))
    assert main(["train", "--data", str(out / "manifest.json"), "--save_model", str(tmp_path / "m"),
                 "--epochs", "0", *TINY_MODEL]) == 0
    ckpts = sorted(p for p in os.listdir(tmp_path) if p.endswith(".ckpt"))
    assert ckpts == ["m_e0.ckpt"]
    meta = json.loads((tmp_path / "m_e0.ckpt.json").read_text())
    assert meta["train_config"]["epochs"] == 0
    assert meta["preset"] == "default"


def test_train_missing_manifest(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.json"), "--save_model", str(tmp_path / "m")]) == 1
    assert "missing manifest" in capsys.readouterr().err


def test_train_resume_matches_continuous(tmp_path):
    _, out = preprocess(tmp_path, copy_corpus(40, seed=2))
    common = ["--data", str(out / "manifest.json"), "--batch_size", "8", *TINY_MODEL]
    assert main(["train", *common, "--save_model", str(tmp_path / "full"), "--epochs", "2"]) == 0
    assert main(["train", *common, "--save_model", str(tmp_path / "half"), "--epochs", "1"]) == 0
    assert main(["train", *common, "--save_model", str(tmp_path / "rest"), "--epochs", "2",
                 "--from", str(tmp_path / "half_e1.ckpt")]) == 0
    a, _, _ = load_checkpoint(str(tmp_path / "full_last.ckpt"))
    b, _, _ = load_checkpoint(str(tmp_path / "rest_last.ckpt"))
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_translate_copy_model(copy_model, tmp_path):
    ckpt, _ = copy_model
    src = write_lines(tmp_path / "in.txt", ["a b c", "f e d c b"])
    out = tmp_path / "out.txt"
    assert main(["translate", "--model", ckpt, "--src", src, "--output", str(out)]) == 0
    assert out.read_text().splitlines() == ["a b c", "f e d c b"]


def test_translate_empty_file(copy_model, tmp_path):
    ckpt, _ = copy_model
    src = write_lines(tmp_path / "in.txt", [])
    out = tmp_path / "out.txt"
    assert main(["translate", "--model", ckpt, "--src", src, "--output", str(out)]) == 0
    assert out.read_text() == ""


def test_translate_blank_line_gives_blank_output(copy_model, tmp_path):
    ckpt, _ = copy_model
    src = write_lines(tmp_path / "in.txt", ["a b", "", "c"])
    out = tmp_path / "out.txt"
    assert main(["translate", "--model", ckpt, "--src", src, "--output", str(out)]) == 0
    assert out.read_text().split("\n")[:3] == ["a b", "", "c"]


def test_translate_nbest_and_attention_dump(copy_model, tmp_path):
    ckpt, _ = copy_model
    lines = ["a b c", "d e"]
    src = write_lines(tmp_path / "in.txt", lines)
    nbest, attn = tmp_path / "nbest.txt", tmp_path / "attn.json"
    assert main(["translate", "--model", ckpt, "--src", src, "--output", str(tmp_path / "out.txt"),
                 "--n_best", "3", "--nbest_output", str(nbest), "--dump_beam", str(attn)]) == 0
    rows = [r.split(" ||| ") for r in nbest.read_text().splitlines()]
    assert len(rows) == 6
    for k in range(2):
        block = rows[3 * k: 3 * k + 3]
        assert [r[0] for r in block] == ["1", "2", "3"]
        scores = [float(r[2]) for r in block]
        assert scores == sorted(scores, reverse=True)
        assert len({r[1] for r in block}) == 3
    assert rows[0][1] == "a b c"
    mats = json.loads(attn.read_text())
    assert len(mats) == 2
    for mat, line in zip(mats, lines):
        m = np.array(mat)
        assert m.shape == (len(line.split()) + 1, len(line.split()))
        assert np.allclose(m.sum(axis=1), 1.0)


def test_translate_vocab_mismatch(copy_model, tmp_path, capsys):
    ckpt, root = copy_model
    meta = json.loads(open(ckpt + ".json").read())
    bad = tmp_path / "bad.vocab"
    vocab = Vocab.load(meta["data"]["vocab_tgt"])
    Vocab(vocab.itos[:4] + list(reversed(vocab.itos[4:]))).save(str(bad))
    import shutil
    for suffix in ("", ".json"):
        shutil.copy(ckpt + suffix, str(tmp_path / "m.ckpt") + suffix)
    meta["data"]["vocab_tgt"] = str(bad)
    (tmp_path / "m.ckpt.json").write_text(json.dumps(meta))
    src = write_lines(tmp_path / "in.txt", ["a"])
    out = tmp_path / "out.txt"
    assert main(["translate", "--model", str(tmp_path / "m.ckpt"), "--src", src, "--output", str(out)]) == 1
    assert "digest mismatch" in capsys.readouterr().err
    assert not out.exists()


def test_end_to_end_determinism(tmp_path):
    lines = copy_corpus(30, seed=6)
    outs = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        d.mkdir()
        _, data = preprocess(d, lines)
        assert main(["train", "--data", str(data / "manifest.json"), "--save_model", str(d / "m"),
                     "--epochs", "1", "--batch_size", "8", *TINY_MODEL]) == 0
        assert main(["translate", "--model", str(d / "m_last.ckpt"), "--src", str(d / "src.txt"),
                     "--output", str(d / "out.txt"), "--n_best", "2", "--nbest_output", str(d / "nb.txt")]) == 0
        outs.append((d / "nb.txt").read_bytes())
    assert outs[0] == outs[1]


@pytest.fixture
def two_word_model(tmp_path):
    _, out = preprocess(tmp_path, ["x y", "y x"])
    assert main(["train", "--data", str(out / "manifest.json"), "--save_model", str(tmp_path / "m"),
                 "--epochs", "0", *TINY_MODEL]) == 0
    return str(tmp_path / "m_e0.ckpt")


def test_embeddings_round_trip(two_word_model, tmp_path):
    vec = str(tmp_path / "v.txt")
    before, _, _ = load_checkpoint(two_word_model)
    assert main(["embeddings", "export", "--model", two_word_model, "--vectors", vec]) == 0
    out = str(tmp_path / "imported.ckpt")
    assert main(["embeddings", "import", "--model", two_word_model, "--vectors", vec, "--output", out]) == 0
    after, _, _ = load_checkpoint(out)
    for name in before.params:
        assert np.array_equal(before.params[name].data, after.params[name].data)


def test_embeddings_import_counts(two_word_model, tmp_path, capsys):
    vec = write_lines(tmp_path / "v.txt", ["x 1 2 3 4", "y 5 6 7 8", "zzz 0 0 0 0"])
    assert main(["embeddings", "import", "--model", two_word_model, "--vectors", vec]) == 0
    assert "2 loaded, 4 kept" in capsys.readouterr().out
    model, _, meta = load_checkpoint(two_word_model)
    vocab = Vocab.load(meta["data"]["vocab_src"])
    assert model.params["src_emb"].data[vocab.lookup("y")].tolist() == [5, 6, 7, 8]


def test_embeddings_dimension_mismatch_leaves_checkpoint(two_word_model, tmp_path, capsys):
    before = open(two_word_model, "rb").read()
    vec = write_lines(tmp_path / "v.txt", ["x 1 2 3"])
    assert main(["embeddings", "import", "--model", two_word_model, "--vectors", vec]) == 1
    assert "dimensions" in capsys.readouterr().err
    assert open(two_word_model, "rb").read() == before


def test_embeddings_duplicate_word(two_word_model, tmp_path, capsys):
    vec = write_lines(tmp_path / "v.txt", ["x 1 2 3 4", "x 1 2 3 4"])
    assert main(["embeddings", "import", "--model", two_word_model, "--vectors", vec]) == 1
    assert "duplicate" in capsys.readouterr().err


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"beam": 2}')
    src = write_lines(tmp_path / "s.txt", ["a"])
    rc = main(["preprocess", "--train_src", src, "--train_tgt", src, "--save_data", str(tmp_path / "d"),
               "--config", str(cfg)])
    assert rc == 1
    assert "unknown keys" in capsys.readouterr().err
