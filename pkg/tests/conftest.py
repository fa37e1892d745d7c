import numpy as np
import pytest

from minimt.cli import main

SYMBOLS = "a b c d e f".split()


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return str(path)


def copy_corpus(n, seed=0, max_len=5):
    rng = np.random.default_rng(seed)
    return [" ".join(rng.choice(SYMBOLS, rng.integers(1, max_len + 1))) for _ in range(n)]


@pytest.fixture(scope="session")
def copy_model(tmp_path_factory):
    """A small copy model trained through the command line; returns (checkpoint, workdir)."""
    root = tmp_path_factory.mktemp("copy_model")
    lines = copy_corpus(800)
    src = write_lines(root / "src.txt", lines)
    assert main(["preprocess", "--train_src", src, "--train_tgt", src, "--valid_src", src, "--valid_tgt", src,
                 "--save_data", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data" / "manifest.json"), "--save_model", str(root / "m"),
                 "--epochs", "10", "--rnn_size", "32", "--word_vec_size", "16", "--layers", "1", "--optim", "Adam",
                 "--learning_rate", "0.01", "--dropout", "0", "--batch_size", "16", "--report_every", "0"]) == 0
    return str(root / "m_last.ckpt"), root


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
