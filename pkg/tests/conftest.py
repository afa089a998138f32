import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def finite_difference_check(fn, tensors, n_coords=12, h=1e-6, seed=0):
    """Relative error between autograd and central differences on sampled coordinates.

    ``fn`` maps the list of float64 ``tensors`` to a scalar. Returns
    ``||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)`` over the sampled coordinates.
    """
    tensors = [t.detach().clone().requires_grad_(True) for t in tensors]
    grads = torch.autograd.grad(fn(tensors), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    rng = np.random.default_rng(seed)
    auto, numeric = [], []
    with torch.no_grad():
        for _ in range(n_coords):
            k = int(rng.integers(len(tensors)))
            flat = tensors[k].view(-1)
            i = int(rng.integers(flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(tensors).item()
            flat[i] = orig - h
            down = fn(tensors).item()
            flat[i] = orig
            auto.append(grads[k].view(-1)[i].item())
            numeric.append((up - down) / (2 * h))
    auto, numeric = np.array(auto), np.array(numeric)
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(auto - numeric) / scale)


@pytest.fixture
def fd_check():
    return finite_difference_check


@pytest.fixture(scope="session")
def pairs8():
    from uniugg_mini.data import generate_pairs

    return generate_pairs(range(8))


TINY_MODEL = {
    "encoder": {"dim": 16, "depth": 1, "heads": 2},
    "decoder": {"enc_dim": 16, "dim": 16, "depth": 1, "heads": 2, "descriptor_dim": 4},
    "vae": {"in_dim": 16, "hidden": 8, "width": 8, "depth": 1, "heads": 2},
    "denoiser": {"dim": 16, "depth": 1, "heads": 2, "context_dim": 16},
    "conditioner": {"token_dim": 16, "dim": 16, "depth": 1, "heads": 2},
    "schedule": {"steps": 10},
}


def tiny_config(stage, out_dir, steps=3, **updates):
    """Stage config with a tiny model, 4 pairs and a short schedule."""
    from uniugg_mini.config import default_stage_config

    base = {"model": TINY_MODEL, "optim.total_steps": steps, "optim.batch_size": 2, "dataset.n_pairs": 4,
            "out_dir": str(out_dir)}
    return default_stage_config(stage, **{**base, **updates})


@pytest.fixture(scope="session")
def tiny_chain(tmp_path_factory):
    """Checkpoints of every stage of a tiny 3-step run, keyed by stage name."""
    from uniugg_mini.config import STAGES
    from uniugg_mini.training import run_stage

    root = tmp_path_factory.mktemp("chain")
    ckpts, prev = {}, None
    for stage in STAGES:
        res = run_stage(tiny_config(stage, root / stage, init_ckpt=prev))
        ckpts[stage] = prev = str(res.checkpoint)
    return ckpts


CRITERIA = {
    "test_c01_loss_formula_oracles": "loss-formula oracles",
    "test_c02_gradient_suite": "gradient suite",
    "test_c03_geometric_invariants": "geometric invariants",
    "test_c04_diffusion_statistics": "diffusion statistics",
    "test_c05_spatial_vae": "spatial VAE",
    "test_c06_encoder_decoder_overfit": "encoder+decoder overfit",
    "test_c07_generation_contrast": "generation contrast",
    "test_c08_vqa_overfit": "VQA overfit",
    "test_c09_cli_determinism": "CLI determinism",
    "test_c10_loss_additivity": "loss additivity",
}


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    verdicts = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            name = getattr(rep, "nodeid", "").rpartition("::")[2]
            if name not in CRITERIA or not hasattr(rep, "when"):
                continue
            detail = dict(rep.user_properties).get("detail", "")
            if rep.when == "call" or rep.failed:
                status = "PASS" if rep.passed else "FAIL"
                prev = verdicts.get(name)
                if prev is None or status == "FAIL":
                    verdicts[name] = (status, detail or (prev[1] if prev else "") or rep.when + " error")
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in enumerate(CRITERIA, 1):
        if name in verdicts:
            status, detail = verdicts[name]
            terminalreporter.write_line(f"{status}  [{k:2d}] {CRITERIA[name]}: {detail}")
