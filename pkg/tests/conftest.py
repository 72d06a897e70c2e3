"""Shared fixtures.

``tiny_cfg`` trains in seconds and exercises the pipeline plumbing.
``trained`` builds the default-config checkpoints once and caches them under
``.pytest_artifacts`` (keyed by config hash, so a config change retrains).
"""

from pathlib import Path

import pytest

from repainv.config import defaults, override
from repainv.pipeline import Workspace, ensure_ae, ensure_flow

ARTIFACTS = Path(__file__).resolve().parent.parent / ".pytest_artifacts"


def tiny_config():
    cfg = defaults()
    cfg = override(cfg, "data", train_count=96, heldout_count=32)
    cfg = override(cfg, "ae", steps=40, batch=32, hidden=48)
    cfg = override(cfg, "flow", steps=20, batch=16, dim=16, depth=2, tap=1, hidden=16,
                   temb_dim=8, head_hidden=16, eval_every=10)
    cfg = override(cfg, "solver", steps=6, inner_iters=3, tuned=False)
    cfg = override(cfg, "experiment", images=4, sweep_images=3, sweep_steps="2,4")
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_ws(tmp_path_factory, tiny_cfg):
    ws = Workspace(tmp_path_factory.mktemp("tiny_ws"))
    for w in (tiny_cfg["flow"]["w_repa"], 0.0):
        ensure_flow(ws, tiny_cfg, "latent", w)
    return ws


class Trained:
    def __init__(self, cfg, ws):
        self.cfg = cfg
        self.ws = ws
        self.ae = ensure_ae(ws, cfg)
        self.model, self.head = ensure_flow(ws, cfg, "latent", cfg["flow"]["w_repa"])
        self.model0, self.head0 = ensure_flow(ws, cfg, "latent", 0.0)


@pytest.fixture(scope="session")
def trained():
    return Trained(defaults(), Workspace(ARTIFACTS / "work"))
