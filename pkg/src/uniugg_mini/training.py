"""Stage runner: data preparation, per-stage losses, AdamW loop, metrics log and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .conditioner import VOCAB, build_qa_items, save_qa
from .config import RunConfig
from .data import PairBatch, generate_pairs, load_pairs
from .diffusion import gen_loss
from .distill import TeacherStub, kd_loss, sample_token_subset, subset_seed
from .errors import ConfigurationError, NumericError
from .geometry import Pose, ScenePair, plucker_raymap
from .models import UniUGGMini, build_model, tensor_digest
from .optim import AdamState, cosine_lr, optimizer_step
from .spatial_decoder import spatial_loss
from .spatial_vae import vae_loss

log = logging.getLogger(__name__)

PREREQUISITE = {"vae": "encoder_pretrain", "unified_s1": "vae", "unified_s2": "unified_s1",
                "unified_s3": "unified_s2"}
TRAINABLE = {
    "encoder_pretrain": ("encoder.", "rgb_head.", "decoder."),
    "vae": ("vae.", "decoder."),
    "unified_s1": ("conditioner.ref_proj.",),
    "unified_s2": ("conditioner.", "denoiser."),
    "unified_s3": ("conditioner.", "denoiser."),
}
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.jsonl"


@dataclass
class StageResult:
    checkpoint: Path
    metrics: Path
    last: dict


def configure_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def load_dataset(cfg: RunConfig) -> list[ScenePair]:
    d = cfg.dataset
    if d.data_dir:
        pairs = load_pairs(d.data_dir)[:d.n_pairs]
        if not pairs:
            raise ConfigurationError(f"no scenes found in {d.data_dir}")
        return pairs
    return generate_pairs(range(d.first_seed, d.first_seed + d.n_pairs), d.scene)


def pair_raymaps(pairs: list[ScenePair], grid: int, identity: bool = False) -> torch.Tensor:
    """Raymap of view ``j`` relative to view ``i`` for every pair, (B, grid, grid, 6).

    ``identity=True`` gives the raymap of the reference view relative to itself.
    """
    maps = [plucker_raymap(p.intrinsics, Pose.identity() if identity else p.rel.inverse(), grid, grid)
            for p in pairs]
    return torch.as_tensor(np.stack(maps), dtype=torch.float32)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> list[int]:
    if batch_size >= n:
        return list(range(n))
    rng = np.random.default_rng([seed, step])
    return sorted(int(k) for k in rng.choice(n, batch_size, replace=False))


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(subset_seed(seed, step, 1 << 20))


class StageData:
    """Tensors a stage needs, computed once from the dataset and the frozen parts."""

    def __init__(self, cfg: RunConfig, model: UniUGGMini, pairs: list[ScenePair]):
        self.pairs = pairs
        mcfg = model.cfg
        self.batch = PairBatch.from_pairs(pairs, mcfg.encoder.patch_size)
        b = self.batch
        stage = cfg.stage
        with torch.no_grad():
            if stage in ("encoder_pretrain", "unified_s1"):
                teacher = TeacherStub(mcfg.encoder)
                self.teacher_i, self.teacher_j = teacher(b.image_i), teacher(b.image_j)
            if stage != "encoder_pretrain":
                self.z_i, self.z_j = model.encoder(b.image_i), model.encoder(b.image_j)
            if stage in ("unified_s2", "unified_s3"):
                # generation items: (reference grid, raymap, target latent); with self pairs the
                # reference view is also its own target under the identity transform
                self.gen_ref = self.z_i
                self.x0 = model.latent_scale * model.vae.encode(self.z_j).mean
                self.raymaps = pair_raymaps(pairs, mcfg.encoder.grid)
                if cfg.gen_self_pairs:
                    ident = pair_raymaps(pairs, mcfg.encoder.grid, identity=True)
                    self.gen_ref = torch.cat([self.z_i, self.z_i])
                    self.x0 = torch.cat([self.x0, model.latent_scale * model.vae.encode(self.z_i).mean])
                    self.raymaps = torch.cat([self.raymaps, ident])
        if stage == "unified_s3":
            self.qa = build_qa_items(pairs, VOCAB, cfg.qa_per_pair)


def _components(d: dict) -> dict:
    return {k: float(v.detach()) for k, v in d.items()}


def stage_loss(cfg: RunConfig, model: UniUGGMini, data: StageData, idx: list[int], step: int) -> dict:
    """Loss dict (with ``total``) of one optimization step."""
    w = cfg.loss
    b = data.batch.select(idx)
    t_idx = torch.as_tensor(idx)
    spatial_kw = dict(lambda1=w.lambda1, lambda2=w.lambda2, alpha_conf=w.alpha_conf, tau=w.tau,
                      lambda_l1=w.lambda_l1, lambda_perc=w.lambda_perc)
    stage = cfg.stage
    if stage == "encoder_pretrain":
        z = model.encoder(torch.cat([b.image_i, b.image_j]))
        n = len(idx)
        z_i, z_j = z[:n], z[n:]
        pred_i, pred_j = model.decoder(z_i, z_j)
        ls = spatial_loss(pred_i, pred_j, b, rgb_i=model.rgb_head(z_i), rgb_j=model.rgb_head(z_j), **spatial_kw)
        z_t = torch.cat([data.teacher_i[t_idx], data.teacher_j[t_idx]])
        n_tok = z.shape[1] * z.shape[2]
        subset = np.stack([sample_token_subset(n_tok, w.kd_fraction, subset_seed(cfg.seed, step, k))
                           for k in range(2 * n)])
        kd = kd_loss(z.flatten(1, 2), z_t.flatten(1, 2), subset, w.alpha, w.beta)
        return {"conf": ls["conf"], "match": ls["match"], "rgb": ls["rgb"], "s": ls["total"], "kd": kd,
                "total": ls["total"] + w.lambda_kd * kd}
    if stage == "vae":
        out = vae_loss(model.vae, data.z_i[t_idx], data.z_j[t_idx], b, w.gamma,
                       noise_seed=subset_seed(cfg.seed, step, 0), **spatial_kw)
        return out
    if stage == "unified_s1":
        z = torch.cat([data.z_i[t_idx], data.z_j[t_idx]])
        target = torch.cat([data.teacher_i[t_idx], data.teacher_j[t_idx]]).flatten(1, 2)
        align = ((model.conditioner.ref_proj(z.flatten(1, 2)) - target) ** 2).mean()
        return {"align": align, "total": align}
    # unified stages 2 and 3
    g = step_generator(cfg.seed, step)
    sched = model.schedule
    n = len(data.pairs)
    g_idx = torch.as_tensor([k + r * n for r in range(len(data.x0) // n) for k in idx])
    x0 = data.x0[g_idx]
    t = torch.randint(1, sched.steps + 1, (len(g_idx),), generator=g).numpy()
    eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    cond = model.conditioner
    context = cond.condition(data.gen_ref[g_idx], cond.raymap_to_queries(data.raymaps[g_idx]))
    l_gen = gen_loss(model.denoiser, x0, context, t, eps, sched)
    out = {"gen": l_gen, "total": w.lambda_gen * l_gen}
    if stage == "unified_s3":
        per = cfg.qa_per_pair
        items = [data.qa[k * per + m] for k in idx for m in range(per)]
        z_q = data.z_j[torch.as_tensor([k for k in idx for _ in range(per)])]
        l_vqa = cond.vqa_loss(z_q, [it.question_ids for it in items], [it.answer_ids for it in items])
        out["vqa"] = l_vqa
        out["total"] = out["total"] + w.lambda_vqa * l_vqa
    return out


def _trainable(model: UniUGGMini, stage: str) -> list[tuple[str, torch.nn.Parameter]]:
    prefixes = TRAINABLE[stage]
    return [(n, p) for n, p in model.named_parameters() if n.startswith(prefixes)]


def frozen_digest(model: UniUGGMini, stage: str) -> str:
    """Digest of every tensor the stage must leave untouched."""
    trainable = {n for n, _ in _trainable(model, stage)}
    return tensor_digest((n, t) for n, t in model.state_dict().items() if n not in trainable)


def _load_init(cfg: RunConfig) -> tuple[UniUGGMini, dict]:
    required = PREREQUISITE.get(cfg.stage)
    if required is None:
        return build_model(cfg.model, cfg.seed), {"stages_done": []}
    if not cfg.init_ckpt:
        raise ConfigurationError(f"stage {cfg.stage} needs init_ckpt from stage {required}")
    ckpt = load_checkpoint(cfg.init_ckpt)
    done = ckpt.meta.get("stages_done", [])
    if required not in done or not ckpt.meta.get("complete", False):
        raise ConfigurationError(f"stage {cfg.stage} needs a completed {required} checkpoint; "
                                 f"{cfg.init_ckpt} has stages {done}")
    model_cfg = RunConfig.from_dict({"model": ckpt.config["model"]}).model
    model = build_model(model_cfg, cfg.seed)
    model.load_tensors(ckpt)
    return model, {"stages_done": list(done)}


def _save(path: Path, cfg: RunConfig, model: UniUGGMini, params, state: AdamState, step: int, meta: dict):
    tensors = model.tensors()
    for (name, _), m, v in zip(params, state.exp_avg, state.exp_avg_sq):
        tensors["optim.exp_avg." + name] = m
        tensors["optim.exp_avg_sq." + name] = v
    meta = dict(meta, optimizer_step=state.step, stage=cfg.stage)
    return save_checkpoint(path, tensors, cfg.to_dict(), step, meta)


def run_stage(cfg: RunConfig, resume: str | Path | None = None, stop_after: int | None = None) -> StageResult:
    """Train one stage and write ``checkpoint.ckpt`` and ``metrics.jsonl`` under ``cfg.out_dir``.

    Stages after ``encoder_pretrain`` start from ``cfg.init_ckpt`` and take the model
    architecture from it. ``resume`` continues an interrupted run of the same stage from
    its checkpoint; ``stop_after`` ends the run early after that many steps.
    """
    configure_determinism()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, meta = _load_init(cfg)
    params = _trainable(model, cfg.stage)
    trainable_names = {n for n, _ in params}
    for n, p in model.named_parameters():
        p.requires_grad_(n in trainable_names)
    state = AdamState()
    start = 0
    metrics_path = out / METRICS_NAME
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.meta.get("stage") != cfg.stage:
            raise ConfigurationError(f"cannot resume stage {cfg.stage} from a {ckpt.meta.get('stage')} checkpoint")
        model.load_tensors(ckpt)
        start = ckpt.step
        meta = {"stages_done": [s for s in ckpt.meta.get("stages_done", []) if s != cfg.stage]}
        if ckpt.meta.get("optimizer_step", 0):
            state.step = ckpt.meta["optimizer_step"]
            state.exp_avg = [torch.from_numpy(ckpt.tensors["optim.exp_avg." + n].copy()) for n, _ in params]
            state.exp_avg_sq = [torch.from_numpy(ckpt.tensors["optim.exp_avg_sq." + n].copy()) for n, _ in params]
        kept = []
        if metrics_path.exists():
            kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["step"] < start]
        metrics_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        metrics_path.write_text("")
    (out / "config.json").write_text(cfg.to_json() + "\n")

    data = StageData(cfg, model, load_dataset(cfg))
    if cfg.stage == "unified_s3":
        save_qa(data.qa, out / "qa.jsonl")
        VOCAB.save(out / "vocab.json")
    digest_before = frozen_digest(model, cfg.stage)
    o = cfg.optim
    end = o.total_steps if stop_after is None else min(o.total_steps, stop_after)
    model.train()
    last: dict = {}
    with open(metrics_path, "a") as fh:
        for step in range(start, end):
            lr = cosine_lr(step, o.total_steps, o.warmup_ratio, o.base_lr)
            idx = batch_indices(len(data.pairs), o.batch_size, cfg.seed, step)
            losses = stage_loss(cfg, model, data, idx, step)
            for name, value in losses.items():
                if not torch.isfinite(value):
                    raise NumericError(f"non-finite loss {name!r} at step {step}")
            grads = torch.autograd.grad(losses["total"], [p for _, p in params], allow_unused=True)
            optimizer_step([p for _, p in params], list(grads), state, lr, o.weight_decay, o.betas, o.eps)
            last = {"step": step, "lr": lr, **_components(losses)}
            if step % cfg.log_every == 0 or step == o.total_steps - 1:
                fh.write(json.dumps(last) + "\n")
                fh.flush()
    model.eval()
    if frozen_digest(model, cfg.stage) != digest_before:
        raise RuntimeError(f"frozen parameters changed during stage {cfg.stage}")
    complete = end == o.total_steps
    if complete:
        meta["stages_done"] = meta["stages_done"] + [cfg.stage]
        if cfg.stage == "vae":
            with torch.no_grad():
                mu = model.vae.encode(torch.cat([data.z_i, data.z_j])).mean
                model.latent_scale.fill_(1.0 / float(mu.std()))
    meta["complete"] = complete
    ckpt_path = _save(out / CHECKPOINT_NAME, cfg, model, params, state, end, meta)
    log.info("stage %s: %d steps, checkpoint %s", cfg.stage, end - start, ckpt_path)
    return StageResult(ckpt_path, metrics_path, last)
