from __future__ import annotations

import numpy as np
import pytest

from battrul.data.synth import SynthSpec, generate_synthetic

# filled by test_acceptance; echoed at the end of every run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Six short synthetic cells, enough for smoke runs of the whole pipeline."""
    return generate_synthetic(SynthSpec(n_cells=6, eol_range=(200, 260), seed=7))


def tiny_config(**overrides):
    """Small models and short schedules so a full fold trains in seconds."""
    from battrul.harness import ExperimentConfig
    from battrul.hs import HsConfig
    from battrul.stman import StManConfig
    from battrul.training import TrainConfig

    base = dict(
        n_w=10,
        k=2,
        rul_mape_floor=0.01,
        hs=HsConfig(hidden=6, n_modules=1, layers_per_module=1),
        stman=StManConfig(k=3, d_model=4, n_heads=2, d_fuse=4, d_h=4),
        hs_train=TrainConfig(lr=5e-3, batch_size=16, epochs=12, patience=12),
        rul_train=TrainConfig(lr=3e-3, batch_size=16, epochs=4, patience=4),
    )
    base.update(overrides)
    return ExperimentConfig(**base)
