import os
from dataclasses import replace

import pytest

from batchlens.config import parse_config_file, resolve_config
from batchlens.data import BALANCED, RANDOM
from batchlens.experiments import (eval_balanced, eval_standard, load_datasets,
                                   train)
from batchlens.tensor import Rng

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DESK_CONFIG = os.path.join(REPO_ROOT, "configs", "desk_synthetic.cfg")


def load_desk_config(**overrides):
    pairs = parse_config_file(DESK_CONFIG)
    cfg = resolve_config(pairs, base_dir=os.path.dirname(DESK_CONFIG))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class DeskRun:
    """One trained network plus its protocol errors on the committed config."""

    def __init__(self, cfg, network, test_ds, train_ds):
        self.cfg = cfg
        self.network = network
        self.test_ds = test_ds
        self.train_ds = train_ds
        self.standard = eval_standard(network, test_ds, cfg.eval_batch)
        self.balanced = eval_balanced(network, test_ds, Rng(cfg.seed).split(77))
        self.shuffled = eval_balanced(network, test_ds, Rng(cfg.seed).split(78),
                                      shuffled=True, repeats=cfg.balanced_repeats)


@pytest.fixture(scope="session")
def desk():
    """Train the committed desk configuration under both batch plans.

    This is the one-time smoke run the trend criteria are frozen against;
    it dominates the suite's runtime.
    """
    runs = {}
    for plan in (BALANCED, RANDOM):
        cfg = load_desk_config(train_plan=plan, eval_protocols="")
        train_ds, test_ds = load_datasets(cfg)
        result = train(cfg, train_ds, test_ds)
        assert not result.diverged
        runs[plan] = DeskRun(cfg, result.network, test_ds, train_ds)
    return runs
