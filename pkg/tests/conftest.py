import numpy as np
import pytest
import torch
from hypothesis import settings

from asyncfm.backbone import BackboneConfig, ContextBundle, init_params
from asyncfm.rater import RaterConfig, init_rater

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

torch.set_num_threads(1)

TINY = dict(d=16, layers=2, heads=2, ffn=32, L=4, D=3, S=3, d_in=5, num_tasks=3)


def tiny_config(**kw) -> BackboneConfig:
    return BackboneConfig(**{**TINY, **kw})


def random_ctx(gen: np.random.Generator, cfg: BackboneConfig, B: int, dtype=torch.float64) -> ContextBundle:
    states = torch.from_numpy(gen.standard_normal((B, cfg.S, cfg.d_in))).to(dtype)
    tasks = torch.from_numpy(gen.integers(0, cfg.num_tasks, B))
    return ContextBundle(states, tasks)


@pytest.fixture
def tiny_model():
    cfg = tiny_config()
    return init_params(np.random.default_rng(0), cfg, torch.float64)


@pytest.fixture
def tiny_rater(tiny_model):
    cfg = tiny_model.config
    rater = init_rater(np.random.default_rng(1), RaterConfig(layers=2, heads=2, ffn=32, d_r=16),
                       cfg.d, cfg.ctx_len, cfg.L, cfg.D, torch.float64)
    rater.ready = True
    return rater


# acceptance criteria register one line each; printed after the run
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
