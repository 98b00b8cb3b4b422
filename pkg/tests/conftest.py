from __future__ import annotations

import numpy as np
import pytest

from sbl.config import RunConfig
from sbl.decoder import Mode, SblDecoderConfig
from sbl.encoder import EncoderConfig
from sbl.lexicon import PhonemeInventory
from sbl.synth import dataset_from_config
from sbl.training import SblModel

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training runs (deselect with -m 'not slow')")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def inventory() -> PhonemeInventory:
    return PhonemeInventory.from_symbols({"A": ["p", "q", "s"], "B": ["q", "r", "s", "t"]})


def small_model(inventory, mode=Mode.SBL_ALL, n_blocks=2, d_model=16, flag=False, seed=0, dropout=0.0):
    enc = EncoderConfig(n_blocks=1, n_heads=2, d_model=d_model, d_k=4, d_v=4, d_ff=32, dropout=dropout, feature_dim=6)
    dec = SblDecoderConfig(n_blocks=n_blocks, n_heads=2, d_model=d_model, d_k=4, d_v=4, d_ff=32, dropout=dropout,
                           mode=mode, flag_enabled=flag)
    model = SblModel(enc, dec, inventory, max_len=7, seed=seed)
    model.eval()
    return model


@pytest.fixture
def make_model(inventory):
    return lambda **kw: small_model(inventory, **kw)


def tiny_config(data_dir, **train) -> RunConfig:
    cfg = RunConfig()
    cfg.data.dir = str(data_dir)
    cfg.data.words = 6
    cfg.data.samples_per_word = 4
    cfg.model.d_model = 16
    cfg.model.d_ff = 32
    cfg.model.d_k = cfg.model.d_v = 4
    cfg.model.enc_blocks = cfg.model.dec_blocks = 1
    cfg.train.batch_size = 8
    cfg.train.max_steps = 4
    cfg.train.warmup = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root)
    dataset_from_config(cfg.data, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
