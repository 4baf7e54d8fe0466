"""Epsilon-prediction diffusion with residual pose conditioning.

The denoiser is a residual MLP over flattened images plus a single fused
condition vector: learned class token (or a learned null token for
classifier-free guidance) + zero-initialized pose projection of the
quaternion sine encoding + timestep embedding. Pixels are mapped to [-1, 1]
inside the diffusion and de-normalized on output. Sampling uses the
deterministic DDIM update with arbitrary timestep skips.

The class token is the only thing classifier-free guidance ever drops; the
pose residual stays active on both guidance branches so orientation control
survives guided sampling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .errors import InvalidConfig, InvalidStep, InvalidTimestep, ShapeMismatch
from .quatpose import sine_encode_batch
from .tensorgrad import Tensor

DEFAULT_T = 256

# Linear beta ramp, scaled so the terminal alpha_bar matches the usual
# 1000-step ramp regardless of T.
BETA_MIN_REF = 1e-4
BETA_MAX_REF = 0.02
REF_T = 1000


@dataclass
class NoiseSchedule:
    """Per-timestep beta/alpha/alpha_bar, index 1..T (index 0 is the
    identity sentinel: alpha_bar[0] = 1 so DDIM can land exactly on x0)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_min: float
    beta_max: float


def make_schedule(T: int, beta_min: float | None = None, beta_max: float | None = None) -> NoiseSchedule:
    if T < 2:
        raise InvalidConfig("schedule needs T >= 2")
    if beta_min is None:
        beta_min = BETA_MIN_REF * REF_T / T
    if beta_max is None:
        beta_max = BETA_MAX_REF * REF_T / T
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidConfig(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_min, beta_max, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    return NoiseSchedule(T, beta, alpha, alpha_bar, float(beta_min), float(beta_max))


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and eps {eps.shape} differ")
    if not 1 <= t <= schedule.T:
        raise InvalidTimestep(f"t={t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_noise_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar[np.asarray(t, dtype=np.int64)]
    return np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * eps


def cfg_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond)."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ShapeMismatch("guidance branches must share a shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(x_t: np.ndarray, t: int, t_next: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from t to t_next (t_next = 0 returns x0_hat)."""
    if not 0 <= t_next < t <= schedule.T:
        raise InvalidStep(f"need 0 <= t_next < t <= T, got t={t}, t_next={t_next}")
    ab_t = schedule.alpha_bar[t]
    ab_n = schedule.alpha_bar[t_next]
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_n) * x0_hat + math.sqrt(1.0 - ab_n) * eps_hat


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Strictly decreasing timesteps from T to 0, length steps + 1."""
    if not 1 <= steps <= T:
        raise InvalidConfig(f"steps must be in [1, {T}]")
    seq = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    if np.any(np.diff(seq) >= 0):
        raise InvalidConfig("timestep subsequence failed to decrease strictly")
    return seq


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    classes: int = 8
    cond_dim: int = 64
    hidden: int = 256
    num_frequencies: int = 7
    guidance_default: float = 7.5

    @property
    def input_dim(self) -> int:
        return self.image_size * self.image_size * self.channels

    @property
    def pose_dim(self) -> int:
        return 4 * self.num_frequencies


def _sinusoidal_table(rows: int, dim: int, scale: float = 0.25) -> np.ndarray:
    pos = np.arange(rows, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * idx / dim)
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return scale * table


class Denoiser:
    """Residual-MLP noise predictor with fused class/pose/time conditioning."""

    def __init__(self, cfg: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0):
        self.cfg = cfg
        self.schedule = schedule
        self.forward_calls = 0
        self.backward_calls = 0
        rng = np.random.default_rng(seed)
        d, h, din = cfg.cond_dim, cfg.hidden, cfg.input_dim

        def he(shape, fan_in):
            return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

        self.params: dict[str, Tensor] = {
            "class_emb": Tensor(rng.standard_normal((cfg.classes, d)) * 0.3, requires_grad=True),
            "null_emb": Tensor(rng.standard_normal(d) * 0.3, requires_grad=True),
            # zero init: the pose residual is inert until training moves it
            "pose_w": Tensor(np.zeros((cfg.pose_dim, d)), requires_grad=True),
            "time_emb": Tensor(_sinusoidal_table(schedule.T + 1, d), requires_grad=True),
            "w_in": Tensor(he((din + d, h), din + d), requires_grad=True),
            "b_in": Tensor(np.zeros(h), requires_grad=True),
            "w_h1": Tensor(he((h, h), h), requires_grad=True),
            "b_h1": Tensor(np.zeros(h), requires_grad=True),
            "w_h2": Tensor(he((h, h), h), requires_grad=True),
            "b_h2": Tensor(np.zeros(h), requires_grad=True),
            "w_out": Tensor(rng.standard_normal((h, din)) * (0.1 / math.sqrt(h)), requires_grad=True),
            "b_out": Tensor(np.zeros(din), requires_grad=True),
        }

    def condition(self, class_ids, null_mask=None) -> Tensor:
        """Class-token rows, with null-token substitution where masked."""
        ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
        if np.any((ids < 0) | (ids >= self.cfg.classes)):
            raise InvalidConfig(f"class ids must be in [0, {self.cfg.classes})")
        rows = tg.gather_rows(self.params["class_emb"], ids)
        if null_mask is None:
            return rows
        m = np.asarray(null_mask, dtype=np.float64).reshape(-1, 1)
        keep = tg.mul(rows, Tensor(1.0 - m))
        null = tg.mul(tg.reshape(self.params["null_emb"], (1, -1)), Tensor(m))
        return tg.add(keep, null)

    def null_condition(self, batch: int) -> Tensor:
        ones = np.ones((batch, 1))
        return tg.mul(tg.reshape(self.params["null_emb"], (1, -1)), Tensor(ones))

    def embed_condition(self, cond: Tensor, pose_feats: np.ndarray) -> Tensor:
        """Fused condition c' = c + project(pose); same width as c."""
        feats = np.asarray(pose_feats, dtype=np.float64).reshape(-1, self.cfg.pose_dim)
        residual = tg.matmul(Tensor(feats), self.params["pose_w"])
        return tg.add(cond, residual)

    def denoise_eps(self, x_t, t, cond: Tensor) -> Tensor:
        """Predict noise for a batch of flattened images; output matches input."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float64))
        if x.data.ndim == 1:
            x = tg.reshape(x, (1, -1))
        if x.shape[1] != self.cfg.input_dim:
            raise ShapeMismatch(f"expected flattened inputs of size {self.cfg.input_dim}, got {x.shape}")
        t_arr = np.asarray(t, dtype=np.int64).reshape(-1)
        self.forward_calls += x.shape[0]
        p = self.params
        tvec = tg.gather_rows(p["time_emb"], t_arr)
        c = tg.add(cond, tvec)
        h = tg.concat([x, c], axis=1)
        h = tg.silu(tg.add(tg.matmul(h, p["w_in"]), p["b_in"]))
        h = tg.add(h, tg.silu(tg.add(tg.matmul(h, p["w_h1"]), p["b_h1"])))
        h = tg.add(h, tg.silu(tg.add(tg.matmul(h, p["w_h2"]), p["b_h2"])))
        return tg.add(tg.matmul(h, p["w_out"]), p["b_out"])


def train_step(
    model: Denoiser,
    x0: np.ndarray,
    class_ids: np.ndarray,
    quats,
    rng: np.random.Generator,
    adam_state: tg.AdamState,
    lr: float = 1e-3,
    cfg_drop_prob: float = 0.1,
) -> float:
    """One diffusion training step on a batch of [-1, 1] images.

    Per item: uniform t, Gaussian eps, noising, eps-MSE loss, and an Adam
    update; the class token is replaced by the null token with probability
    cfg_drop_prob (the pose residual is never dropped).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise InvalidConfig("train_step needs a nonempty (B, D) batch")
    batch = x0.shape[0]
    sched = model.schedule
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise_batch(x0, t, eps, sched)
    drop = rng.random(batch) < cfg_drop_prob
    cond = model.condition(class_ids, null_mask=drop)
    cond = model.embed_condition(cond, sine_encode_batch(quats, model.cfg.num_frequencies))
    pred = model.denoise_eps(x_t, t, cond)
    diff = tg.sub(pred, Tensor(eps))
    loss = tg.reduce_mean(tg.mul(diff, diff))
    grads = tg.backward(loss)
    model.backward_calls += batch
    named = {name: grads[p] for name, p in model.params.items() if p in grads}
    tg.adam_update(model.params, named, adam_state, lr)
    return loss.item()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_batch(
    model: Denoiser,
    class_ids,
    quats,
    steps: int,
    guidance_scale: float,
    seeds,
) -> np.ndarray:
    """DDIM-sample a batch of images, one RNG seed per item.

    Returns (B, H, W, C) float images in [0, 1]. Each item's trajectory
    depends only on its own seed and conditioning.
    """
    if steps < 1:
        raise InvalidConfig("steps must be >= 1")
    cfg = model.cfg
    sched = model.schedule
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    batch = ids.size
    seeds = np.asarray(seeds).reshape(-1)
    if seeds.size != batch or len(quats) != batch:
        raise ShapeMismatch("class_ids, quats, and seeds must align")
    x = np.stack([np.random.default_rng(int(s)).standard_normal(cfg.input_dim) for s in seeds])
    pose_feats = sine_encode_batch(quats, cfg.num_frequencies)
    seq = timestep_sequence(sched.T, min(steps, sched.T))
    with tg.no_grad():
        cond_c = model.embed_condition(model.condition(ids), pose_feats)
        cond_u = model.embed_condition(model.null_condition(batch), pose_feats)
        for t, t_next in zip(seq[:-1], seq[1:]):
            tt = np.full(batch, t, dtype=np.int64)
            eps_c = model.denoise_eps(x, tt, cond_c).data
            eps_u = model.denoise_eps(x, tt, cond_u).data
            eps = cfg_eps(eps_c, eps_u, guidance_scale)
            x = ddim_step(x, int(t), int(t_next), eps, sched)
    imgs = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
    return imgs.reshape(batch, cfg.image_size, cfg.image_size, cfg.channels)


def sample(model: Denoiser, class_id: int, quat, steps: int, guidance_scale: float, seed: int) -> np.ndarray:
    """Single-image convenience wrapper around sample_batch."""
    return sample_batch(model, [class_id], [quat], steps, guidance_scale, [seed])[0]


# ---------------------------------------------------------------------------
# checkpoints: OGRAD1 tensors + JSON sidecar
# ---------------------------------------------------------------------------

def _sidecar_path(path) -> str:
    return str(path) + ".json"


def save_model(path, model: Denoiser, extra: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    tg.save_checkpoint(path, arrays)
    cfg = model.cfg
    sidecar = {
        "schedule": {"T": model.schedule.T, "beta_min": model.schedule.beta_min, "beta_max": model.schedule.beta_max},
        "image_size": cfg.image_size,
        "channels": cfg.channels,
        "classes": cfg.classes,
        "cond_dim": cfg.cond_dim,
        "hidden": cfg.hidden,
        "num_frequencies": cfg.num_frequencies,
        "guidance_default": cfg.guidance_default,
    }
    if extra:
        sidecar.update(extra)
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple[Denoiser, dict]:
    """Rebuild a denoiser from an OGRAD1 checkpoint and its sidecar."""
    if not os.path.exists(path) or not os.path.exists(_sidecar_path(path)):
        from .errors import MissingModel

        raise MissingModel(f"checkpoint or sidecar missing at {path}")
    with open(_sidecar_path(path)) as fh:
        sidecar = json.load(fh)
    sched = make_schedule(sidecar["schedule"]["T"], sidecar["schedule"]["beta_min"], sidecar["schedule"]["beta_max"])
    cfg = DenoiserConfig(
        image_size=sidecar["image_size"],
        channels=sidecar["channels"],
        classes=sidecar["classes"],
        cond_dim=sidecar["cond_dim"],
        hidden=sidecar["hidden"],
        num_frequencies=sidecar["num_frequencies"],
        guidance_default=sidecar.get("guidance_default", 7.5),
    )
    model = Denoiser(cfg, sched, seed=0)
    arrays = tg.load_checkpoint(path)
    for name, p in model.params.items():
        key = name if name in arrays else None
        if key is None:
            raise InvalidConfig(f"checkpoint missing tensor {name!r}")
        if arrays[key].shape != p.data.shape:
            raise ShapeMismatch(f"checkpoint tensor {name!r} has shape {arrays[key].shape}, expected {p.data.shape}")
        p.data = np.ascontiguousarray(arrays[key])
    return model, sidecar
