import numpy as np
import pytest

from mdpo_lab.model import ModelConfig, MultimodalLM, SequenceBatch
from mdpo_lab.rng import SeededRng


def tiny_config(seed=0, **kw):
    """V=8, d=16, one layer: small enough for finite differences over every parameter."""
    base = dict(vocab_size=8, d_model=16, n_layers=1, n_heads=2, max_seq_len=16, image_grid=3,
                seed=seed, init_std=0.2, patch_init_std=1.0, zero_head=False)
    base.update(kw)
    return ModelConfig(**base)


def jitter(model, scale, seed):
    """Perturb every parameter in place (used to make policy != reference)."""
    rng = SeededRng(seed).split("jitter")
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)
    return model


def random_batch(cfg, n, lq, lr, seed, ragged=False):
    rng = SeededRng(seed).split("batch")
    g = cfg.image_grid
    mask = np.ones((n, lr), dtype=bool)
    if ragged:
        for i in range(n):
            mask[i, int(rng.integers(1, lr + 1)):] = False
    return SequenceBatch(
        images=rng.uniform(0.0, 1.0, size=(n, g, g, cfg.channels)),
        question_tokens=rng.integers(0, cfg.vocab_size, size=(n, lq)),
        response_tokens=rng.integers(0, cfg.vocab_size, size=(n, lr)),
        response_mask=mask,
    )


@pytest.fixture
def tiny_model():
    return MultimodalLM(tiny_config())


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
