import numpy as np
import pytest

from dicosa import dataio, encoder, trainer
from dicosa.model import AlignmentModel


def synthetic_batch(n, k_true=4, concept_dim=4, frames=3, mismatch=0.25, noise=0.3, seed=0):
    recs, masks = dataio.generate_synthetic(dataio.SyntheticConfig(
        num_samples=n, k_true=k_true, concept_dim=concept_dim, num_frames=frames,
        mismatch_prob=mismatch, noise_sigma=noise, seed=seed))
    return recs, masks


def random_model(dim, k, seed=0, pooling="adaptive", hidden=None):
    """Untied orthogonal start so every parameter block carries a generic value."""
    m = AlignmentModel.init(dim, k, pooling=pooling, hidden=hidden, seed=seed, init="orthogonal", tied=False)
    rng = np.random.default_rng(seed + 100)
    m.params["b1"] = 0.1 * rng.standard_normal(m.params["b1"].shape)
    m.params["b2"] = np.array([0.2])
    return m


def head_objective(T, Vpair, k, pooling, alpha, beta, tau_prime, ls_weight=1.0):
    def fun(params):
        L, _, grads, _ = trainer.head_loss(params, T, Vpair, k, pooling, alpha, beta, tau_prime,
                                           ls_weight=ls_weight)
        return L, grads
    return fun


def pooled_batch(recs, tau=3.0):
    T, F, M = dataio.stack_records(recs)
    return T, encoder.aggregate_pairs(T, F, M, tau)


@pytest.fixture
def small_store():
    recs, masks = synthetic_batch(12, seed=3)
    return recs, masks


ACCEPTANCE_LINES: list[str] = []


def pytest_sessionstart(session):
    import time

    session.config.suite_t0 = time.perf_counter()


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so its suite-runtime check covers everything else
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
