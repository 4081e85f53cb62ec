import dataclasses

import pytest

import framerec as fr


def small_config(**train_overrides) -> fr.RunConfig:
    """Desk-scale config used across tests: 60 users, 50 items, short runs."""
    cfg = fr.default_config()
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(
        cfg.data, synth=fr.SynthConfig(n_users=60, n_items=50,
                                       seq_len_range=(6, 10), noise=0.2)))
    overrides = {"epochs": 8, "seed": 7, **train_overrides}
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **overrides))


@pytest.fixture(scope="session")
def tiny_cfg():
    return small_config()


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    records, store = fr.synth_generate(tiny_cfg.data.synth, seed=123)
    dataset = fr.leave_one_out_split(fr.four_core_filter(records),
                                     tiny_cfg.backbone.max_len)
    return dataset, store


@pytest.fixture(scope="session")
def trained_tiny(tiny_data, tiny_cfg):
    dataset, store = tiny_data
    return fr.fit(dataset, store, tiny_cfg)
