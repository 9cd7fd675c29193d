import numpy as np
import pytest

from embadv.data import DatasetSpec, generate
from embadv.model import TaskKind, init_params


def tiny_params(seed=0, vocab=10, d_emb=3, hidden=(4,), activation="tanh", dropout=0.0, scale=1.0):
    return init_params(vocab_size=vocab, d_emb=d_emb, hidden=hidden, activation=activation,
                       dropout_rate=dropout, embedding_scale=scale, seed=seed)


def tiny_dataset(kind=TaskKind.RANKING, n=6, seed=0, noise=0.0):
    spec = DatasetSpec(task_kind=kind, num_examples=n, vocab_size=10, seq_len=5, num_options=3,
                       candidates_per_question=3, key_token_count=4, label_noise_rate=noise,
                       seed=seed)
    return generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[TaskKind.RANKING, TaskKind.PAIRWISE], ids=["ranking", "pairwise"])
def kind(request):
    return request.param


# lines appended by test_acceptance, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
