import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from c4av.dataset import build_vocabulary, load_commands_corpus, load_dataset  # noqa: E402
from c4av.synthetic import SyntheticConfig, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_synthetic(SyntheticConfig(num_images=100, seed=3), root)
    return root


@pytest.fixture(scope="session")
def toy_vocab(toy_root):
    return build_vocabulary(load_commands_corpus(toy_root, "train"))


@pytest.fixture(scope="session")
def toy_val(toy_root, toy_vocab):
    return load_dataset(toy_root, "val", toy_vocab)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
