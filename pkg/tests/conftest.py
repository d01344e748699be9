import sys

import pytest

from dualenc.config import TrainConfig, apply_overrides
from dualenc.datapipe import gen_synthetic

TINY = {
    "seed": "3",
    "max_steps": "6",
    "eval_interval": "3",
    "model.embed_dim": "8",
    "replicas.n_replicas": "2",
    "replicas.per_replica": "4",
    "speech.widths": "6,6,6",
    "speech.kernels": "3,5,7",
    "speech.input_dim": "32",
    "image.input_dim": "32",
    "data.target_frames": "10",
    "k_list": "1,2",
}


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    gen_synthetic(root, n_pairs=16, dev_pairs=6, test_pairs=5, speech_T=8, seed=1)
    return root


@pytest.fixture
def tiny_config(tiny_corpus):
    def make(**extra):
        overrides = dict(TINY, **{"data.manifest": str(tiny_corpus / "manifest.tsv")})
        overrides.update({k.replace("__", "."): str(v) for k, v in extra.items()})
        return apply_overrides(TrainConfig(), overrides)
    return make


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
