import os
import time
from pathlib import Path

import numpy as np
import pytest

from lalm_edit import data as D
from lalm_edit.cli import RunConfig, run
from lalm_edit.model import ModelConfig, ToyLALM, load_checkpoint

MICRO = ModelConfig(
    vocab_size=9, d_audio=4, d_text=4, audio_layers=1, text_layers=1, heads=1,
    frames_per_word=2, mlp_ratio=2, max_positions=16, seed=3,
)


@pytest.fixture
def micro_model():
    return ToyLALM(MICRO)


def micro_prompt(words=(5, 6, 7), subject_span=(0, 1), seed=1):
    return D.render_speech(list(words), [1, 2], subject_span, MICRO, seed=seed)


@pytest.fixture(scope="session")
def small_corpus():
    return D.generate_fact_corpus(n_subjects=12, n_relations=3, n_objects=6, templates_per_relation=3, seed=3, n_neutral=8, min_neighbors=1)


@pytest.fixture(scope="session")
def small_config(small_corpus):
    return D.config_for(small_corpus, d_audio=8, d_text=8, audio_layers=2, text_layers=2, heads=2, frames_per_word=2, seed=1)


@pytest.fixture(scope="session")
def small_model(small_config):
    return ToyLALM(small_config)


class PinnedRun:
    """The default pipeline, run once per session.

    ``LALM_EDIT_PINNED_DIR`` may name a finished default run to reuse.
    """

    def __init__(self, root):
        reuse = os.environ.get("LALM_EDIT_PINNED_DIR")
        if reuse:
            root = Path(reuse)
        self.cfg = RunConfig(out=str(root))
        t0 = time.perf_counter()
        if not reuse:
            run(self.cfg, "all")
        self.seconds = time.perf_counter() - t0
        self.reused = bool(reuse)
        self.corpus = D.FactCorpus.load(root / "corpus" / "corpus.json")
        self.model = load_checkpoint(root / "model.ckpt")

    @property
    def root(self):
        return self.cfg.root


@pytest.fixture(scope="session")
def pinned(tmp_path_factory):
    return PinnedRun(tmp_path_factory.mktemp("pinned"))


@pytest.fixture(scope="session")
def pinned_sample(pinned):
    from lalm_edit.cli import eval_facts

    facts, known = eval_facts(pinned.cfg, pinned.model, pinned.corpus)
    suites = [D.make_eval_suite(f, pinned.corpus, pinned.model.config, seed=pinned.cfg.sample_seed, pool=known) for f in facts]
    return facts, known, suites


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
