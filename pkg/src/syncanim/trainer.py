"""Three-stage training schedule.

Stage 1 jointly trains the pose generator (KL + L1) and the upper-body
field (photometric).  Stage 2 trains the expression generator and the head
field, compositing head rays over the frozen body render.  Stage 3 refines
the lip region with patch losses while both generators stay frozen.
Renders during training are teacher-conditioned on ground-truth parameters;
the generators converge to those targets and inference swaps in predicted
parameters.

All randomness flows through one torch.Generator owned by the train state,
so a run is bit-reproducible in single-thread mode and resumable from a
checkpoint that captures the generator and optimizer states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpointio
from .audiofeat import encode_time_matrix, window_matrix
from .audio2emotion import (
    Audio2EmotionConfig,
    Audio2EmotionModel,
    expression_training_step,
    load_audio2emotion,
    save_audio2emotion,
)
from .audio2pose import (
    Audio2PoseConfig,
    Audio2PoseModel,
    load_audio2pose,
    pose_training_step,
    save_audio2pose,
)
from .dataset import DatasetBundle
from .errors import ConfigInvalid, NonFiniteLoss
from .fields import (
    FieldConfig,
    HeadField,
    UpperBodyField,
    lip_patch_loss,
    load_fields,
    photometric_loss,
    render_rays,
    save_fields,
)
from .posemath import normalize_pose_offset

TRAIN_MAGIC = b"SYTRN\x01"
LOSS_LOG_HEADER = "step,stage,loss_total,loss_kl,loss_reg,loss_photo,loss_lip"


@dataclass(frozen=True)
class TrainConfig:
    stage_steps: tuple[int, int, int] = (2000, 1500, 500)
    rays_per_iter: int = 4096
    n_samples: int = 32
    lr_field: float = 0.01
    lr_audio_modules: float = 0.001
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    batch_frames: int = 16
    lambda_lip: float = 0.01
    patch_size: int = 32
    patch_jitter: int = 3
    single_thread: bool = True
    unfreeze_pose_stage2: bool = False
    # feature noise injected per batch draw; keeps the generators from
    # memorizing per-frame feature fingerprints on small datasets
    audio_aug_std: float = 0.05
    # KL weight ramps from 0 to full strength over this fraction of the
    # stage, preventing posterior collapse before the decoder uses the latent
    kl_warmup_frac: float = 0.3

    def as_dict(self) -> dict:
        return asdict(self)


def desk_profile(seed: int = 0) -> TrainConfig:
    return TrainConfig(seed=seed)


def paper_profile(seed: int = 0) -> TrainConfig:
    """Full-scale settings: 15k/12k/4k steps, 256^2 rays per iteration."""
    return TrainConfig(stage_steps=(15000, 12000, 4000), rays_per_iter=256 * 256,
                       n_samples=64, seed=seed)


def sample_rays(
    n_pixels: int,
    count: int,
    rng: torch.Generator,
    region_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Pixel indices for one ray batch.

    Uniform sampling is without replacement (a full permutation when count
    equals the pixel count); weighted sampling draws with replacement
    proportionally to region_weights.
    """
    if count > n_pixels and region_weights is None:
        raise ConfigInvalid(f"cannot draw {count} distinct rays from {n_pixels} pixels")
    if region_weights is None:
        return torch.randperm(n_pixels, generator=rng)[:count]
    if region_weights.numel() != n_pixels:
        raise ConfigInvalid("region_weights length must equal the pixel count")
    return torch.multinomial(region_weights.double(), count, replacement=True, generator=rng)


@dataclass
class TrainState:
    a2p: Audio2PoseModel
    a2e: Audio2EmotionModel
    body: UpperBodyField
    head: HeadField
    opt_pose: torch.optim.Optimizer
    opt_exp: torch.optim.Optimizer
    opt_body: torch.optim.Optimizer
    opt_head: torch.optim.Optimizer
    rng: torch.Generator
    cfg: TrainConfig
    step: int = 0
    stages_done: set = field(default_factory=set)
    loss_rows: list = field(default_factory=list)
    # bundle-derived tensors, rebuilt on load
    data: dict = field(default_factory=dict)


def _prepare_data(bundle: DatasetBundle, a2p_window: int, dtype=torch.float32) -> dict:
    """Precompute every tensor the stage loops touch."""
    n_train = bundle.n_train
    windows = window_matrix(bundle.features, n=a2p_window)
    t_encs = encode_time_matrix(bundle.n_frames, fps=bundle.features.fps)
    pose_off = np.stack(
        [normalize_pose_offset(p, bundle.pose_stats).as_array() for p in bundle.poses]
    )
    prev_off = np.roll(pose_off, 1, axis=0)
    prev_off[0] = pose_off[0]
    exp_off = (bundle.blendshapes - bundle.exp_stats.mean_b) / bundle.exp_stats.std_b
    exp_off = np.clip(exp_off, -bundle.exp_stats.clamp_width, bundle.exp_stats.clamp_width)
    origins, dirs = bundle.camera.ray_grid(dtype=dtype)
    region_idx = torch.nonzero(
        torch.as_tensor(bundle.head_region.reshape(-1)), as_tuple=False
    ).squeeze(1)
    return {
        "n_train": n_train,
        "windows": torch.as_tensor(windows, dtype=dtype),
        "t_encs": torch.as_tensor(t_encs, dtype=dtype),
        "pose_off": torch.as_tensor(pose_off, dtype=dtype),
        "prev_off": torch.as_tensor(prev_off, dtype=dtype),
        "exp_off": torch.as_tensor(exp_off, dtype=dtype),
        "frames": torch.as_tensor(bundle.frames, dtype=dtype).reshape(bundle.n_frames, -1, 3),
        "feats": torch.as_tensor(bundle.features.frames, dtype=dtype),
        "origins": origins,
        "dirs": dirs,
        "region_idx": region_idx,
        "background": torch.as_tensor(np.asarray(bundle.config.background_color), dtype=dtype),
        "camera": bundle.camera,
        "poses": bundle.poses,
        "blend": bundle.blendshapes,
        "lip_bbox": bundle.lip_bbox,
        "resolution": bundle.config.resolution,
    }


def setup_training(bundle: DatasetBundle, cfg: TrainConfig) -> TrainState:
    if cfg.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)  # deterministic weight init
    feat_dim = bundle.features.dim
    n_blend = bundle.blendshapes.shape[1]
    a2p = Audio2PoseModel(
        Audio2PoseConfig(feat_dim=feat_dim, clamp_width=bundle.pose_stats.clamp_width),
        bundle.pose_stats,
    )
    a2e = Audio2EmotionModel(
        Audio2EmotionConfig(feat_dim=feat_dim, n_blendshapes=n_blend,
                            clamp_width=bundle.exp_stats.clamp_width),
        bundle.exp_stats,
    )
    pose_scale = tuple(float(min(1.0 / s, 1e3)) for s in bundle.pose_stats.std_array())
    fcfg = FieldConfig(
        feat_dim=feat_dim, n_blendshapes=n_blend,
        head_pivot=tuple(bundle.config.rig.head_center), pose_scale=pose_scale,
    )
    gen = torch.Generator().manual_seed(cfg.seed + 7)
    body = UpperBodyField(fcfg, generator=gen)
    head = HeadField(fcfg, generator=gen)
    state = TrainState(
        a2p=a2p, a2e=a2e, body=body, head=head,
        opt_pose=_make_opt(a2p, cfg.lr_audio_modules, cfg),
        opt_exp=_make_opt(a2e, cfg.lr_audio_modules, cfg),
        opt_body=_make_opt(body, cfg.lr_field, cfg),
        opt_head=_make_opt(head, cfg.lr_field, cfg),
        rng=torch.Generator().manual_seed(cfg.seed + 1),
        cfg=cfg,
        data=_prepare_data(bundle, a2p.cfg.window),
    )
    return state


def _make_opt(module, lr, cfg: TrainConfig):
    return torch.optim.AdamW(module.parameters(), lr=lr,
                             weight_decay=cfg.weight_decay, betas=cfg.betas)


def _randint(rng: torch.Generator, hi: int) -> int:
    return int(torch.randint(hi, (1,), generator=rng).item())


def _augment(windows: torch.Tensor, state: TrainState) -> torch.Tensor:
    std = state.cfg.audio_aug_std
    if std <= 0:
        return windows
    return windows + std * torch.randn(windows.shape, generator=state.rng, dtype=windows.dtype)


def _pose_batch(state: TrainState) -> dict:
    d = state.data
    idx = torch.randint(d["n_train"], (state.cfg.batch_frames,), generator=state.rng)
    return {"windows": _augment(d["windows"][idx], state), "target": d["pose_off"][idx],
            "prev": d["prev_off"][idx]}


def _exp_batch(state: TrainState) -> dict:
    d = state.data
    idx = torch.randint(d["n_train"], (state.cfg.batch_frames,), generator=state.rng)
    return {"windows": _augment(d["windows"][idx], state), "target": d["exp_off"][idx],
            "t_enc": d["t_encs"][idx]}


def _render_body_rays(state: TrainState, tau: int, pix: torch.Tensor, grad: bool):
    d = state.data
    cam = d["camera"]
    query = lambda pts: state.body.query(pts, d["poses"][tau])
    if grad:
        return render_rays(d["origins"][pix], d["dirs"][pix], query, state.cfg.n_samples,
                           cam.t_near, cam.t_far, d["background"], rng=state.rng)
    with torch.no_grad():
        return render_rays(d["origins"][pix], d["dirs"][pix], query, state.cfg.n_samples,
                           cam.t_near, cam.t_far, d["background"], rng=state.rng)


def _render_head_composite(state: TrainState, tau: int, pix: torch.Tensor):
    """Head rays alpha-blended over the frozen body render (same formula as composite_frame)."""
    d = state.data
    cam = d["camera"]
    body_rgb, _ = _render_body_rays(state, tau, pix, grad=False)
    query = lambda pts: state.head.query(pts, d["poses"][tau], d["blend"][tau], d["feats"][tau])
    head_rgb, head_op = render_rays(d["origins"][pix], d["dirs"][pix], query,
                                    state.cfg.n_samples, cam.t_near, cam.t_far,
                                    d["background"], rng=state.rng)
    comp = head_op.unsqueeze(-1) * head_rgb + (1.0 - head_op).unsqueeze(-1) * body_rgb
    return comp


def _log(state: TrainState, stage: int, total, kl=0.0, reg=0.0, photo=0.0, lip=0.0):
    if not np.isfinite(total):
        raise NonFiniteLoss(f"stage {stage} loss became non-finite at step {state.step}")
    state.loss_rows.append((state.step, stage, float(total), float(kl), float(reg),
                            float(photo), float(lip)))


def _kl_scale(k: int, steps: int, warmup_frac: float) -> float:
    """0 for the first tenth of the stage, then linear up to 1 by warmup_frac."""
    if steps <= 0 or warmup_frac <= 0.1:
        return 1.0
    frac = k / steps
    return float(min(1.0, max(0.0, (frac - 0.1) / (warmup_frac - 0.1))))


def run_stage1(bundle: DatasetBundle, state: TrainState, n_steps: int | None = None) -> None:
    cfg = state.cfg
    d = state.data
    steps = cfg.stage_steps[0] if n_steps is None else n_steps
    n_pix = d["origins"].shape[0]
    count = min(cfg.rays_per_iter, n_pix)
    for k in range(steps):
        l_pose, l_kl, l_reg = pose_training_step(_pose_batch(state), state.a2p,
                                                 state.opt_pose, state.rng,
                                                 kl_scale=_kl_scale(k, steps, cfg.kl_warmup_frac))
        tau = _randint(state.rng, d["n_train"])
        pix = sample_rays(n_pix, count, state.rng)
        rgb, _ = _render_body_rays(state, tau, pix, grad=True)
        photo = photometric_loss(rgb, d["frames"][tau][pix])
        state.opt_body.zero_grad(set_to_none=True)
        photo.backward()
        state.opt_body.step()
        state.step += 1
        _log(state, 1, l_pose + float(photo.item()), l_kl, l_reg, float(photo.item()))
    state.stages_done.add(1)


def run_stage2(bundle: DatasetBundle, state: TrainState, n_steps: int | None = None) -> None:
    cfg = state.cfg
    d = state.data
    steps = cfg.stage_steps[1] if n_steps is None else n_steps
    region = d["region_idx"]
    count = min(cfg.rays_per_iter, region.numel())
    for k in range(steps):
        l_exp, l_kl, l_reg = expression_training_step(_exp_batch(state), state.a2e,
                                                      state.opt_exp, state.rng,
                                                      kl_scale=_kl_scale(k, steps, cfg.kl_warmup_frac))
        if cfg.unfreeze_pose_stage2:
            pose_training_step(_pose_batch(state), state.a2p, state.opt_pose, state.rng)
        tau = _randint(state.rng, d["n_train"])
        pix = region[sample_rays(region.numel(), count, state.rng)]
        comp = _render_head_composite(state, tau, pix)
        photo = photometric_loss(comp, d["frames"][tau][pix])
        state.opt_head.zero_grad(set_to_none=True)
        photo.backward()
        state.opt_head.step()
        state.step += 1
        _log(state, 2, l_exp + float(photo.item()), l_kl, l_reg, float(photo.item()))
    state.stages_done.add(2)


def _patch_pixels(state: TrainState) -> tuple[torch.Tensor, torch.Tensor, int, int]:
    """Patch pixel indices around the lip bbox, jittered, plus the in-patch lip mask."""
    d = state.data
    res = d["resolution"]
    size = min(state.cfg.patch_size, res)
    x0, y0, x1, y1 = d["lip_bbox"]
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    j = state.cfg.patch_jitter
    if j > 0:
        cx += _randint(state.rng, 2 * j + 1) - j
        cy += _randint(state.rng, 2 * j + 1) - j
    px0 = int(np.clip(cx - size // 2, 0, res - size))
    py0 = int(np.clip(cy - size // 2, 0, res - size))
    ys = torch.arange(py0, py0 + size)
    xs = torch.arange(px0, px0 + size)
    pix = (ys.unsqueeze(1) * res + xs.unsqueeze(0)).reshape(-1)
    in_x = (xs >= x0) & (xs < x1)
    in_y = (ys >= y0) & (ys < y1)
    mask = (in_y.unsqueeze(1) & in_x.unsqueeze(0)).to(torch.float64)
    return pix, mask, size, size


def run_stage3(bundle: DatasetBundle, state: TrainState, n_steps: int | None = None) -> None:
    cfg = state.cfg
    d = state.data
    steps = cfg.stage_steps[2] if n_steps is None else n_steps
    for _ in range(steps):
        tau = _randint(state.rng, d["n_train"])
        pix, mask, ph, pw = _patch_pixels(state)
        comp = _render_head_composite(state, tau, pix).reshape(ph, pw, 3)
        gt = d["frames"][tau][pix].reshape(ph, pw, 3)
        loss = lip_patch_loss(comp, gt, mask, cfg.lambda_lip)
        base = photometric_loss(comp.detach(), gt)
        state.opt_head.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_head.step()
        state.step += 1
        _log(state, 3, float(loss.item()), photo=float(base.item()), lip=float(loss.item()))
    state.stages_done.add(3)


_STAGES = {1: run_stage1, 2: run_stage2, 3: run_stage3}


def run_stage(bundle: DatasetBundle, state: TrainState, stage: int,
              n_steps: int | None = None) -> None:
    _STAGES[stage](bundle, state, n_steps)


def write_loss_log(state: TrainState, path: Path | str) -> None:
    lines = [LOSS_LOG_HEADER]
    for step, stage, total, kl, reg, photo, lip in state.loss_rows:
        lines.append(f"{step},{stage},{total!r},{kl!r},{reg!r},{photo!r},{lip!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _opt_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.array(val)
            out[f"{prefix}.{idx}.{key}"] = arr
    return out


def _load_opt_tensors(opt: torch.optim.Optimizer, prefix: str, tensors: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, idx, key = name.split(".", 2)
        entry = state.setdefault(int(idx), {})
        t = torch.as_tensor(arr)
        if key == "step":
            t = t.to(torch.float32).reshape(())
        entry[key] = t
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, out_dir: Path | str, render_meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_audio2pose(out / "audio2pose.ckpt", state.a2p)
    save_audio2emotion(out / "audio2emotion.ckpt", state.a2e)
    save_fields(out / "fields.ckpt", state.body, state.head)
    tensors = {"rng_state": state.rng.get_state().numpy()}
    if state.loss_rows:
        tensors["loss_rows"] = np.array(state.loss_rows, dtype=np.float64)
    for prefix, opt in (("pose", state.opt_pose), ("exp", state.opt_exp),
                        ("body", state.opt_body), ("head", state.opt_head)):
        tensors.update(_opt_tensors(opt, prefix))
    meta = {
        "step": state.step,
        "stages_done": sorted(state.stages_done),
        "config": state.cfg.as_dict(),
    }
    checkpointio.write_container(out / "trainstate.ckpt", TRAIN_MAGIC, tensors, meta)
    if render_meta is not None:
        (out / "render_meta.json").write_text(json.dumps(render_meta, sort_keys=True, indent=1))
    write_loss_log(state, out / "loss_log.csv")


def load_checkpoint(ckpt_dir: Path | str, bundle: DatasetBundle) -> TrainState:
    out = Path(ckpt_dir)
    tensors, meta = checkpointio.read_container(out / "trainstate.ckpt", TRAIN_MAGIC)
    cfg_d = dict(meta["config"])
    for key in ("stage_steps", "betas"):
        cfg_d[key] = tuple(cfg_d[key])
    cfg = TrainConfig(**cfg_d)
    if cfg.single_thread:
        torch.set_num_threads(1)
    a2p = load_audio2pose(out / "audio2pose.ckpt")
    a2e = load_audio2emotion(out / "audio2emotion.ckpt")
    body, head = load_fields(out / "fields.ckpt")
    rng = torch.Generator()
    rng.set_state(torch.as_tensor(tensors["rng_state"]))
    loss_rows = []
    if "loss_rows" in tensors:
        loss_rows = [
            (int(r[0]), int(r[1]), r[2], r[3], r[4], r[5], r[6])
            for r in tensors["loss_rows"]
        ]
    state = TrainState(
        a2p=a2p, a2e=a2e, body=body, head=head,
        opt_pose=_make_opt(a2p, cfg.lr_audio_modules, cfg),
        opt_exp=_make_opt(a2e, cfg.lr_audio_modules, cfg),
        opt_body=_make_opt(body, cfg.lr_field, cfg),
        opt_head=_make_opt(head, cfg.lr_field, cfg),
        rng=rng, cfg=cfg, step=int(meta["step"]),
        stages_done=set(meta["stages_done"]),
        loss_rows=loss_rows,
        data=_prepare_data(bundle, a2p.cfg.window),
    )
    for prefix, opt in (("pose", state.opt_pose), ("exp", state.opt_exp),
                        ("body", state.opt_body), ("head", state.opt_head)):
        _load_opt_tensors(opt, prefix, tensors)
    return state


def render_meta_from_bundle(bundle: DatasetBundle, cfg: TrainConfig) -> dict:
    ys, xs = np.where(bundle.head_region)
    return {
        "resolution": bundle.config.resolution,
        "focal": bundle.camera.focal,
        "camera_center": list(bundle.camera.center),
        "t_near": bundle.camera.t_near,
        "t_far": bundle.camera.t_far,
        "background": list(bundle.config.background_color),
        "head_region": [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1],
        "lip_bbox": list(bundle.lip_bbox),
        "n_samples": cfg.n_samples,
        "fps": bundle.features.fps,
    }
