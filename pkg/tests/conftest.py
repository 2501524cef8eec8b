import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ifvit.backbone import ModelConfig, build_model  # noqa: E402
from ifvit.diffusion import make_schedule  # noqa: E402
from ifvit.numerics import RngState  # noqa: E402


def tiny_config(fusion="intermediate", conditioning="crossattn", **overrides):
    base = dict(fusion=fusion, conditioning=conditioning, depth=5,
                n_image=1 if fusion == "intermediate" else 0, n_text=1 if fusion == "intermediate" else 0,
                embed_dim=16, heads=2, mlp_ratio=2, patch_size=4, img_channels=3, img_size=8,
                text_len=8, text_in_dim=16, vocab_size=17)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(params=[("early", "concat"), ("intermediate", "concat"),
                        ("early", "crossattn"), ("intermediate", "crossattn")],
                ids=lambda p: f"{p[0]}-{p[1]}")
def setting(request):
    return request.param


@pytest.fixture
def small_model(setting):
    return build_model(tiny_config(*setting), RngState(7))


@pytest.fixture
def randomized_model(setting):
    """Small model with every parameter (head and biases included) set at random."""
    model = build_model(tiny_config(*setting), RngState(7))
    g = np.random.default_rng(99)
    for p in model.parameters():
        p.data = (0.3 * g.standard_normal(p.shape)).astype(np.float32)
    return model


def run_tiny_pipeline(root, fusion="intermediate", conditioning="crossattn", seed=1234, steps=None):
    """gen-data then train with the tiny preset; returns the run directory."""
    from ifvit import cli, config

    cfg = config.preset("tiny")
    cfg.model.fusion, cfg.model.conditioning, cfg.run.seed = fusion, conditioning, seed
    data_dir, run_dir = os.path.join(root, "data"), os.path.join(root, "run")
    path = cli.cmd_gen_data(cfg, cfg.train.n_train, data_dir)
    cli.cmd_train(cfg, path, run_dir, steps)
    return run_dir


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Tiny preset, intermediate fusion with cross-attention, 2000 training steps."""
    return run_tiny_pipeline(str(tmp_path_factory.mktemp("tiny_intermediate")))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``PASS``/``FAIL``/``SKIP`` line per criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"{status} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
