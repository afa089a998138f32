import json
import math

import numpy as np
import pytest
import torch
from conftest import tiny_config
from hypothesis import given
from hypothesis import strategies as st

from uniugg_mini import training
from uniugg_mini.checkpoint import load_checkpoint, save_checkpoint
from uniugg_mini.config import (
    FULL_SCALE_BATCH_SIZE,
    FULL_SCALE_STAGE1_LR,
    FULL_SCALE_STAGE23_LR,
    STAGES,
    OptimConfig,
    RunConfig,
    default_stage_config,
    load_config,
)
from uniugg_mini.data import THREADS_ENV, data_threads, generate_pairs
from uniugg_mini.errors import ConfigurationError, NumericError, ValidationError
from uniugg_mini.optim import AdamState, cosine_lr, optimizer_step
from uniugg_mini.training import PREREQUISITE, TRAINABLE, run_stage

# -- config ------------------------------------------------------------------------


def test_full_scale_constants_and_desk_defaults():
    assert FULL_SCALE_STAGE1_LR == 1e-3 and FULL_SCALE_STAGE23_LR == 2e-5
    assert FULL_SCALE_BATCH_SIZE == 256
    assert OptimConfig().batch_size == 8
    assert default_stage_config("encoder_pretrain").optim.base_lr == FULL_SCALE_STAGE1_LR


@pytest.mark.parametrize("updates", [
    {"optim.warmup_ratio": 1.0}, {"optim.warmup_ratio": -0.1}, {"optim.batch_size": 0},
    {"loss.gamma": -1.0}, {"loss.lambda1": -0.5}, {"stage": "stage9"},
])
def test_config_invariants(updates):
    with pytest.raises(ConfigurationError):
        RunConfig().override(updates)


def test_config_overrides_and_round_trip(tmp_path):
    cfg = RunConfig().override({"optim.base_lr": 0.5, "model": {"encoder": {"depth": 2}}, "seed": 3})
    assert cfg.optim.base_lr == 0.5 and cfg.model.encoder.depth == 2 and cfg.seed == 3
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert load_config(tmp_path / "c.json", {"seed": 4}).seed == 4
    with pytest.raises(ConfigurationError):
        RunConfig().override({"optim.not_a_field": 1})
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"bogus": 1})


def test_every_stage_has_defaults():
    for stage in STAGES:
        cfg = default_stage_config(stage)
        assert cfg.stage == stage and cfg.optim.total_steps >= 1


def test_data_threads_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert data_threads() == 3
    a = generate_pairs(range(3))
    monkeypatch.setenv(THREADS_ENV, "junk")
    assert data_threads() == 1
    b = generate_pairs(range(3))
    assert all(np.array_equal(x.image_j, y.image_j) for x, y in zip(a, b))


# -- schedule and optimizer ------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_lr(0, 100, 0.1, 1e-3) == 0.0
    assert cosine_lr(10, 100, 0.1, 1e-3) == 1e-3
    assert abs(cosine_lr(100, 100, 0.1, 1e-3)) < 1e-12
    assert cosine_lr(500, 100, 0.1, 1e-3) == cosine_lr(100, 100, 0.1, 1e-3)
    assert cosine_lr(0, 10, 0.0, 2.0) == 2.0


def test_cosine_errors():
    with pytest.raises(ValidationError):
        cosine_lr(-1, 10, 0.1, 1.0)
    with pytest.raises(ValidationError):
        cosine_lr(0, 0, 0.1, 1.0)


@given(st.integers(2, 5000), st.floats(0.0, 0.9), st.floats(1e-6, 1.0))
def test_cosine_properties(total, warmup, base):
    values = [cosine_lr(s, total, warmup, base) for s in range(total + 1)]
    assert min(values) >= 0 and max(values) <= base * (1 + 1e-12)
    w = warmup * total
    if w >= 1:
        # continuity across the warmup boundary
        left = cosine_lr(int(math.floor(w)), total, warmup, base)
        assert abs(left - base) <= base / w + 1e-12


def test_optimizer_zero_grads():
    p = torch.randn(5, dtype=torch.float64)
    before = p.clone()
    optimizer_step([p], [torch.zeros(5, dtype=torch.float64)], AdamState(), 0.1)
    assert torch.equal(p, before)
    optimizer_step([p], [None], AdamState(), 0.1)
    assert torch.equal(p, before)


def test_optimizer_unit_step():
    p = torch.tensor([1.0], dtype=torch.float64)
    optimizer_step([p], [torch.tensor([1.0], dtype=torch.float64)], AdamState(), 0.1)
    # m_hat = v_hat = 1, so the update is lr / (1 + eps)
    assert abs(p.item() - (1 - 0.1 / (1 + 1e-8))) < 1e-15
    assert abs(p.item() - 0.9) < 1e-8


def test_optimizer_decay_formula():
    rng = np.random.default_rng(0)
    p0, g1, g2 = (rng.normal(size=4) for _ in range(3))
    lr, wd, (b1, b2), eps = 0.05, 0.3, (0.9, 0.999), 1e-8
    p = torch.as_tensor(p0.copy())
    state = AdamState()
    optimizer_step([p], [torch.as_tensor(g1)], state, lr, wd)
    optimizer_step([p], [torch.as_tensor(g2)], state, lr, wd)
    q, m, v = p0.copy(), np.zeros(4), np.zeros(4)
    for k, g in enumerate((g1, g2), start=1):
        q = q - lr * wd * q
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        q = q - lr * (m / (1 - b1 ** k)) / (np.sqrt(v / (1 - b2 ** k)) + eps)
    assert np.allclose(p.numpy(), q, rtol=0, atol=1e-14)


def test_optimizer_matches_torch_adamw():
    torch.manual_seed(0)
    a = torch.randn(3, 4, dtype=torch.float64)
    b = a.clone().requires_grad_(True)
    opt = torch.optim.AdamW([b], lr=0.01, weight_decay=0.1)
    state = AdamState()
    for _ in range(5):
        g = torch.randn(3, 4, dtype=torch.float64)
        optimizer_step([a], [g], state, 0.01, 0.1)
        b.grad = g.clone()
        opt.step()
    assert (a - b.detach()).abs().max() < 1e-12


def test_optimizer_errors():
    p = torch.zeros(2)
    with pytest.raises(NumericError):
        optimizer_step([p], [torch.tensor([float("nan"), 0.0])], AdamState(), 0.1)
    assert torch.equal(p, torch.zeros(2))
    with pytest.raises(ValidationError):
        optimizer_step([p], [torch.zeros(3)], AdamState(), 0.1)


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
               "b.bias": np.array([np.float32(1e-45), -0.0, np.inf], dtype=np.float32),
               "c.scalar": np.array(2.5, dtype=np.float32)}
    cfg = json.loads(RunConfig().to_json())
    path = save_checkpoint(tmp_path / "x.ckpt", tensors, cfg, 17, {"stages_done": ["vae"]})
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.config == cfg and ck.meta["stages_done"] == ["vae"]
    for k, v in tensors.items():
        assert ck.tensors[k].shape == v.shape and ck.tensors[k].tobytes() == v.tobytes()
    again = save_checkpoint(tmp_path / "y.ckpt", ck.tensors, ck.config, ck.step, ck.meta)
    assert again.read_bytes() == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "bad.ckpt")
    path = save_checkpoint(tmp_path / "ok.ckpt", {"w": np.ones(100, np.float32)}, {}, 0, {})
    (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "cut.ckpt")
    with pytest.raises((ValidationError, ConfigurationError)):
        save_checkpoint(tmp_path / "f64.ckpt", {"w": np.ones(3)}, {}, 0, {})


# -- stage runner -------------------------------------------------------------------------


@pytest.mark.parametrize("stage", [s for s in STAGES if s != "encoder_pretrain"])
def test_missing_prerequisite(stage, tmp_path):
    with pytest.raises(ConfigurationError):
        run_stage(tiny_config(stage, tmp_path))


def test_wrong_prerequisite_stage(tiny_chain, tmp_path):
    with pytest.raises(ConfigurationError, match="encoder_pretrain"):
        run_stage(tiny_config("unified_s1", tmp_path, init_ckpt=tiny_chain["encoder_pretrain"]))


def test_incomplete_prerequisite(tmp_path):
    first = run_stage(tiny_config("encoder_pretrain", tmp_path / "a", steps=4), stop_after=2)
    assert load_checkpoint(first.checkpoint).meta["complete"] is False
    with pytest.raises(ConfigurationError):
        run_stage(tiny_config("vae", tmp_path / "b", init_ckpt=str(first.checkpoint)))


def test_chain_records_stages(tiny_chain):
    meta = load_checkpoint(tiny_chain["unified_s3"]).meta
    assert meta["stages_done"] == list(STAGES) and meta["complete"]
    assert set(PREREQUISITE) == set(STAGES[1:])


@pytest.mark.parametrize("stage", STAGES[1:])
def test_freezing_contract(tiny_chain, stage):
    before = load_checkpoint(tiny_chain[PREREQUISITE[stage]]).tensors
    after = load_checkpoint(tiny_chain[stage]).tensors
    changed = {k for k in before if not k.startswith("optim.") and before[k].tobytes() != after[k].tobytes()}
    allowed = TRAINABLE[stage] + (("latent_scale",) if stage == "vae" else ())
    assert changed and all(k.startswith(allowed) for k in changed)


def test_latent_scale_set_after_vae(tiny_chain):
    assert load_checkpoint(tiny_chain["encoder_pretrain"]).tensors["latent_scale"].item() == 1.0
    assert load_checkpoint(tiny_chain["vae"]).tensors["latent_scale"].item() != 1.0


def test_metrics_log_format(tiny_chain):
    from pathlib import Path

    lines = (Path(tiny_chain["unified_s3"]).parent / "metrics.jsonl").read_text().splitlines()
    rows = [json.loads(line) for line in lines]
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert {"step", "lr", "gen", "vqa", "total"} <= set(rows[0])
    assert (Path(tiny_chain["unified_s3"]).parent / "qa.jsonl").exists()


def test_nan_loss_aborts_with_step(tmp_path, monkeypatch):
    real = training.stage_loss

    def poisoned(cfg, model, data, idx, step):
        out = real(cfg, model, data, idx, step)
        if step == 2:
            out["kd"] = out["kd"] * float("nan")
        return out

    monkeypatch.setattr(training, "stage_loss", poisoned)
    with pytest.raises(NumericError, match="at step 2"):
        run_stage(tiny_config("encoder_pretrain", tmp_path, steps=4))


def test_runs_are_bit_identical(tmp_path):
    a = run_stage(tiny_config("encoder_pretrain", tmp_path / "a", steps=3))
    b = run_stage(tiny_config("encoder_pretrain", tmp_path / "b", steps=3))
    assert a.metrics.read_bytes() == b.metrics.read_bytes()
    ta, tb = load_checkpoint(a.checkpoint).tensors, load_checkpoint(b.checkpoint).tensors
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


@pytest.mark.parametrize("stage", ["encoder_pretrain", "unified_s2"])
def test_resume_matches_uninterrupted(tmp_path, tiny_chain, stage):
    init = None if stage == "encoder_pretrain" else tiny_chain["unified_s1"]
    full = run_stage(tiny_config(stage, tmp_path / "full", steps=10, init_ckpt=init))
    part = run_stage(tiny_config(stage, tmp_path / "part", steps=10, init_ckpt=init), stop_after=4)
    assert load_checkpoint(part.checkpoint).step == 4
    resumed = run_stage(tiny_config(stage, tmp_path / "part", steps=10, init_ckpt=init), resume=part.checkpoint)
    assert resumed.metrics.read_bytes() == full.metrics.read_bytes()
    ta, tb = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
    assert ta.meta == tb.meta
    assert all(ta.tensors[k].tobytes() == tb.tensors[k].tobytes() for k in ta.tensors)


def test_resume_rejects_other_stage(tmp_path, tiny_chain):
    with pytest.raises(ConfigurationError):
        run_stage(tiny_config("unified_s2", tmp_path, init_ckpt=tiny_chain["unified_s1"]),
                  resume=tiny_chain["unified_s1"])


def test_architecture_taken_from_init_checkpoint(tmp_path, tiny_chain):
    cfg = tiny_config("vae", tmp_path, init_ckpt=tiny_chain["encoder_pretrain"]).override(
        {"model": {"encoder": {"dim": 32, "heads": 2}, "decoder": {"enc_dim": 32}, "vae": {"in_dim": 32},
                   "conditioner": {"token_dim": 32}}})
    res = run_stage(cfg)
    assert load_checkpoint(res.checkpoint).tensors["encoder.pos_embed"].shape[-1] == 16


def test_batch_indices_deterministic():
    a = training.batch_indices(10, 4, 0, 5)
    assert a == training.batch_indices(10, 4, 0, 5) and len(set(a)) == 4
    assert training.batch_indices(3, 8, 0, 0) == [0, 1, 2]
    g1, g2 = training.step_generator(0, 3), training.step_generator(0, 3)
    assert torch.equal(torch.randn(4, generator=g1), torch.randn(4, generator=g2))
