"""Class-to-3D lifting against a pose-conditioned diffusion prior.

Two optimization modes over the same radiance field:

* sds: per round, render from a random camera, noise the render, and apply
  the guided noise residual w(t) * (eps_hat - eps) as a gradient through the
  renderer (the denoiser is never differentiated).
* dbp: decoupled back-propagation. Per round, solve the diffusion ODE several
  timesteps at once (a DDIM jump of the current annealed step size), decode a
  clean target image, and spend M plain-MSE updates of the field on it. The
  starting timestep and the jump size both anneal geometrically over rounds.

Every round logs denoiser forward/backward evaluation counts and field
updates so the optimization-cost comparison is exact, not estimated.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import conddiffusion as cd
from . import radiancefield as rf
from . import tensorgrad as tg
from .errors import InvalidConfig
from .quatpose import CameraPose, pose_from_spherical, sine_encode_batch
from .tensorgrad import Tensor


@dataclass
class DbpConfig:
    m_updates: int = 10
    k_start: int = 64
    k_end: int = 4
    t_start_frac: float = 0.98
    t_end_frac: float = 0.02
    stride: int | None = None  # None: one jump of the full annealed step
    use_cfg: bool = True


@dataclass
class SdsConfig:
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98


@dataclass
class CameraConfig:
    elevation_min_deg: float = 10.0
    elevation_max_deg: float = 40.0
    radius: float = 2.0


@dataclass
class LiftConfig:
    class_id: int = 0
    mode: str = "dbp"
    guidance_scale: float = 7.5
    total_rounds: int = 400
    dbp: DbpConfig = field(default_factory=DbpConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    lr_grid: float = 0.05
    lr_decoder: float = 0.005
    grid_resolution: int = 32
    grid_features: int = 8
    samples_per_ray: int = 32
    near: float = 0.9
    far: float = 3.4
    background: tuple = (0.72, 0.72, 0.72)
    turntable_views: int = 8
    turntable_resolution: int = 32

    def __post_init__(self):
        if self.mode not in ("sds", "dbp"):
            raise InvalidConfig(f"mode must be sds or dbp, got {self.mode!r}")
        if self.dbp.m_updates < 1:
            raise InvalidConfig("dbp.m_updates must be >= 1")
        if not self.dbp.k_start >= self.dbp.k_end >= 1:
            raise InvalidConfig("need k_start >= k_end >= 1")
        if not self.dbp.t_start_frac > self.dbp.t_end_frac > 0.0:
            raise InvalidConfig("need t_start_frac > t_end_frac > 0")

    def render_settings(self, model_cfg) -> rf.RenderSettings:
        return rf.RenderSettings(
            samples_per_ray=self.samples_per_ray,
            near=self.near,
            far=self.far,
            background=self.background,
            height=model_cfg.image_size,
            width=model_cfg.image_size,
        )


@dataclass
class RoundRecord:
    t_cur: int
    step: int
    fwd_evals: int
    bwd_evals: int
    field_updates: int
    wall_ms: float
    loss: float


@dataclass
class RunLog:
    rounds: list

    def totals(self) -> dict:
        return {
            "rounds": len(self.rounds),
            "fwd_evals": int(sum(r.fwd_evals for r in self.rounds)),
            "bwd_evals": int(sum(r.bwd_evals for r in self.rounds)),
            "field_updates": int(sum(r.field_updates for r in self.rounds)),
            "wall_ms": float(sum(r.wall_ms for r in self.rounds)),
        }

    def to_json(self) -> str:
        obj = {
            "rounds": [
                {
                    "t_cur": r.t_cur,
                    "step": r.step,
                    "fwd_evals": r.fwd_evals,
                    "bwd_evals": r.bwd_evals,
                    "field_updates": r.field_updates,
                    "wall_ms": r.wall_ms,
                    "loss": r.loss,
                }
                for r in self.rounds
            ],
            "totals": self.totals(),
        }
        return json.dumps(obj, indent=2)

    @staticmethod
    def from_json(text: str) -> "RunLog":
        obj = json.loads(text)
        rounds = [RoundRecord(**{k: r[k] for k in ("t_cur", "step", "fwd_evals", "bwd_evals", "field_updates", "wall_ms", "loss")}) for r in obj["rounds"]]
        return RunLog(rounds)


class LiftOptimizer:
    """Adam over the field, with separate learning rates for grid and decoder."""

    def __init__(self, lr_grid: float, lr_decoder: float):
        self.lr_grid = lr_grid
        self.lr_decoder = lr_decoder
        self.grid_state = tg.AdamState()
        self.dec_state = tg.AdamState()

    def update(self, grid: rf.RadianceGrid, grads: dict) -> None:
        named = {name: grads[p] for name, p in grid.params.items() if p in grads}
        grid_part = {k: v for k, v in named.items() if k == "grid"}
        dec_part = {k: v for k, v in named.items() if k != "grid"}
        tg.adam_update({"grid": grid.params["grid"]}, grid_part, self.grid_state, self.lr_grid)
        tg.adam_update({k: grid.params[k] for k in dec_part}, dec_part, self.dec_state, self.lr_decoder)


def sample_camera(camera: CameraConfig, rng: np.random.Generator) -> CameraPose:
    """Azimuth uniform on the circle, elevation uniform in the configured band."""
    az = rng.uniform(0.0, 2.0 * math.pi)
    el = math.radians(rng.uniform(camera.elevation_min_deg, camera.elevation_max_deg))
    return pose_from_spherical(az, el, camera.radius)


def anneal_schedule(round_index: int, total_rounds: int, T: int, dbp: DbpConfig) -> tuple[int, int]:
    """Geometric interpolation of (T_cur, step_cur), floored at the end values."""
    if round_index >= total_rounds:
        raise InvalidConfig("round_index must stay below total_rounds")
    t_start = max(1, int(round(dbp.t_start_frac * T)))
    t_end = max(1, int(round(dbp.t_end_frac * T)))
    frac = 0.0 if total_rounds == 1 else round_index / (total_rounds - 1)

    def geo(a, b):
        return int(round(a * (b / a) ** frac))

    t_cur = max(geo(t_start, t_end), t_end)
    step_cur = max(geo(dbp.k_start, dbp.k_end), dbp.k_end)
    return t_cur, step_cur


def _guided_eps(model, x_flat, t, cond_c, cond_u, guidance, use_cfg=True):
    """One (optionally guided) denoiser query; returns (eps_hat, fwd_evals)."""
    with tg.no_grad():
        e_c = model.denoise_eps(x_flat, [t], cond_c).data
        if not use_cfg:
            return e_c, 1
        e_u = model.denoise_eps(x_flat, [t], cond_u).data
    return cd.cfg_eps(e_c, e_u, guidance), 2


def sds_step(
    grid: rf.RadianceGrid,
    model: cd.Denoiser,
    pose: CameraPose,
    cfg: LiftConfig,
    rng: np.random.Generator,
    opt: LiftOptimizer,
) -> RoundRecord:
    """One score-distillation update of the field at the given camera.

    The applied gradient is w(t) * (eps_hat - eps) pushed through the render
    (denoiser frozen), realized as the gradient of sum(x * stopgrad(w * r)).
    """
    t0 = time.perf_counter()
    sched = model.schedule
    settings = cfg.render_settings(model.cfg)
    strat_seed = int(rng.integers(0, 2**31))
    t_lo = max(1, int(round(cfg.sds.t_min_frac * sched.T)))
    t_hi = max(t_lo, int(round(cfg.sds.t_max_frac * sched.T)))
    t = int(rng.integers(t_lo, t_hi + 1))
    eps = rng.standard_normal((1, model.cfg.input_dim))

    img = rf.render_image(grid, pose, settings, strat_seed=strat_seed)
    x0 = tg.reshape(tg.sub(tg.scale(img, 2.0), Tensor(np.ones(1))), (1, model.cfg.input_dim))
    x_t = cd.forward_noise(x0.data, t, eps, sched)

    feats = sine_encode_batch([pose.orientation], model.cfg.num_frequencies)
    cond_c = model.embed_condition(model.condition([cfg.class_id]), feats)
    cond_u = model.embed_condition(model.null_condition(1), feats)
    eps_hat, fwd = _guided_eps(model, x_t, t, cond_c, cond_u, cfg.guidance_scale)

    w = 1.0 - sched.alpha_bar[t]
    residual = w * (eps_hat - eps)
    pseudo_loss = tg.reduce_sum(tg.mul(x0, Tensor(residual)))
    grads = tg.backward(pseudo_loss)
    opt.update(grid, grads)

    loss = float(np.mean((eps_hat - eps) ** 2))
    wall = (time.perf_counter() - t0) * 1e3
    return RoundRecord(t, 0, fwd, 0, 1, wall, loss)


def dbp_round(
    grid: rf.RadianceGrid,
    model: cd.Denoiser,
    state: tuple[int, int],
    cfg: LiftConfig,
    rng: np.random.Generator,
    opt: LiftOptimizer,
) -> RoundRecord:
    """One decoupled round: DDIM-jump a noised render into a clean target,
    then run M MSE updates of the field against it."""
    t0 = time.perf_counter()
    t_cur, step_cur = state
    sched = model.schedule
    settings = cfg.render_settings(model.cfg)
    pose = sample_camera(cfg.camera, rng)
    render_seed = int(rng.integers(0, 2**31))
    eps = rng.standard_normal((1, model.cfg.input_dim))
    update_seeds = rng.integers(0, 2**31, size=cfg.dbp.m_updates)

    with tg.no_grad():
        img = rf.render_image(grid, pose, settings, strat_seed=render_seed)
    x0 = 2.0 * img.data.reshape(1, -1) - 1.0
    x_t = cd.forward_noise(x0, t_cur, eps, sched)

    feats = sine_encode_batch([pose.orientation], model.cfg.num_frequencies)
    cond_c = model.embed_condition(model.condition([cfg.class_id]), feats)
    cond_u = model.embed_condition(model.null_condition(1), feats)

    t_stop = max(t_cur - step_cur, 0)
    stride = cfg.dbp.stride or step_cur
    seq = [t_cur]
    while seq[-1] > t_stop:
        seq.append(max(seq[-1] - stride, t_stop))

    fwd = 0
    x_k = x_t
    eps_hat, t_last, x_last = None, t_cur, x_t
    for t_a, t_b in zip(seq[:-1], seq[1:]):
        eps_hat, used = _guided_eps(model, x_k, t_a, cond_c, cond_u, cfg.guidance_scale, cfg.dbp.use_cfg)
        fwd += used
        t_last, x_last = t_a, x_k
        x_k = cd.ddim_step(x_k, t_a, t_b, eps_hat, sched)

    ab = sched.alpha_bar[t_last]
    x0_hat = (x_last - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    target = np.clip((x0_hat + 1.0) / 2.0, 0.0, 1.0).reshape(img.data.shape)

    loss = math.nan
    for m in range(cfg.dbp.m_updates):
        out = rf.render_image(grid, pose, settings, strat_seed=int(update_seeds[m]))
        diff = tg.sub(out, Tensor(target))
        mse = tg.reduce_mean(tg.mul(diff, diff))
        grads = tg.backward(mse)
        opt.update(grid, grads)
        loss = mse.item()

    wall = (time.perf_counter() - t0) * 1e3
    return RoundRecord(t_cur, step_cur, fwd, 0, cfg.dbp.m_updates, wall, loss)


def run_lift(
    model: cd.Denoiser,
    cfg: LiftConfig,
    seed: int = 0,
    out_dir=None,
    round_callback=None,
) -> tuple[rf.RadianceGrid, RunLog]:
    """Run total_rounds of the configured mode from a fresh field.

    Artifacts (grid checkpoint, runlog.json, turntable PPM sequence) are
    written when out_dir is given. round_callback(round_index, grid, record),
    when supplied, runs after every round; measurement inside it must not
    touch the run's rng or counters.
    """
    rng = np.random.default_rng(seed)
    grid = rf.RadianceGrid(cfg.grid_resolution, cfg.grid_features, seed=seed)
    opt = LiftOptimizer(cfg.lr_grid, cfg.lr_decoder)
    records = []
    for r in range(cfg.total_rounds):
        if cfg.mode == "dbp":
            state = anneal_schedule(r, cfg.total_rounds, model.schedule.T, cfg.dbp)
            rec = dbp_round(grid, model, state, cfg, rng, opt)
        else:
            pose = sample_camera(cfg.camera, rng)
            rec = sds_step(grid, model, pose, cfg, rng, opt)
        records.append(rec)
        if not math.isfinite(rec.loss):
            break
        if round_callback is not None:
            round_callback(r, grid, rec)
    runlog = RunLog(records)
    if out_dir is not None:
        persist_lift(out_dir, grid, runlog, cfg, model)
    return grid, runlog


def render_turntable(grid: rf.RadianceGrid, cfg: LiftConfig, elevation_deg: float = 25.0):
    """k evenly spaced azimuth renders of the field at the given elevation."""
    from .quatpose import uniform_hemisphere_poses

    settings = rf.RenderSettings(
        samples_per_ray=cfg.samples_per_ray,
        near=cfg.near,
        far=cfg.far,
        background=cfg.background,
        height=cfg.turntable_resolution,
        width=cfg.turntable_resolution,
    )
    poses = uniform_hemisphere_poses(cfg.turntable_views, math.radians(elevation_deg), cfg.camera.radius)
    frames = []
    with tg.no_grad():
        for pose in poses:
            frames.append(rf.render_image(grid, pose, settings).data.copy())
    return frames, poses


def persist_lift(out_dir, grid: rf.RadianceGrid, runlog: RunLog, cfg: LiftConfig, model: cd.Denoiser) -> None:
    from . import ppm

    os.makedirs(out_dir, exist_ok=True)
    rf.save_grid(os.path.join(out_dir, "grid.ckpt"), grid)
    with open(os.path.join(out_dir, "runlog.json"), "w") as fh:
        fh.write(runlog.to_json())
        fh.write("\n")
    frames, _ = render_turntable(grid, cfg)
    for i, frame in enumerate(frames):
        ppm.write_ppm(os.path.join(out_dir, f"turntable_{i:03d}.ppm"), frame)
