import numpy as np
import pytest
import torch

from restorl.diffusion import build_schedule
from restorl.model import ArchConfig, init_model

TINY = ArchConfig(channels=1, width=4, depth=1, emb_dim=4, dtype="float64")


def randomize(model, seed=0, scale=0.3):
    """Replace every parameter with N(0, scale^2) so no gradient is trivially zero."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def schedule():
    return build_schedule(20, 1e-3, 0.2)


@pytest.fixture
def tiny_model():
    return randomize(init_model(TINY, 0))


@pytest.fixture
def conds():
    g = torch.Generator().manual_seed(1)
    return torch.rand((3, 1, 8, 8), generator=g, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fd_gradient_error(model, loss_fn, h=1e-6):
    """Relative error between autograd and central differences over every parameter.

    ``loss_fn()`` must be a deterministic scalar function of the model's current
    parameters. Returns ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||).
    """
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    auto = torch.cat([p.grad.ravel() for p in model.parameters()])
    fd = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd.append((up - down) / (2 * h))
    fd = torch.tensor(fd, dtype=torch.float64)
    scale = max(torch.linalg.vector_norm(auto).item(), torch.linalg.vector_norm(fd).item())
    return torch.linalg.vector_norm(auto - fd).item() / scale


SMALL = {
    "seed": 3,
    "data": {"task": "lowlight", "n": 16, "size": 16},
    "schedule": {"T": 20, "beta_start": 1e-3, "beta_end": 0.2, "sampling_steps": 4},
    "model": {"width": 4, "depth": 1, "emb_dim": 4},
    "sft": {"steps": 20, "batch_size": 4, "log_every": 10},
    "scorer": {"tasks": ["lowlight"], "n_images": 6, "n_heldout": 3, "severities": [0.2, 0.5, 0.8, 1.0],
               "width": 4, "epochs": 2},
    "rl": {"iterations": 3, "batch_size": 4, "rollouts_per_image": 2, "eval_every": 2, "checkpoint_every": 1},
    "eval": {"max_images": 4},
}


def write_config(path, data=None):
    import yaml

    path.write_text(yaml.safe_dump(SMALL if data is None else data))
    return path


@pytest.fixture(scope="session")
def base_run(tmp_path_factory):
    """Dataset, SFT checkpoint and scorer for the small config, built once."""
    from restorl import pipeline
    from restorl.config import load_config

    root = tmp_path_factory.mktemp("base")
    cfg = load_config(write_config(root / "cfg.yaml"), output_dir=str(root / "run"))
    pipeline.ensure_base_artifacts(cfg)
    return root / "cfg.yaml", root / "run"


@pytest.fixture
def run_copy(base_run, tmp_path):
    """A private copy of the shared base run directory."""
    import shutil

    cfg, run = base_run
    dst = tmp_path / "run"
    shutil.copytree(run, dst)
    return cfg, dst
