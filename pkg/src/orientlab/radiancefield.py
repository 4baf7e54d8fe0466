"""Dense-grid radiance field with differentiable volume rendering.

A 32^3 feature grid over [-1, 1]^3 is queried by trilinear interpolation
and decoded by a tiny MLP into density (softplus) and color (sigmoid).
Rays composite N stratified samples with alpha weights derived from an
exclusive cumulative sum of sigma * delta, so weights plus residual
transmittance telescope to exactly one. Everything participates in the
autodiff tape, so image losses back-propagate into grid and decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .camera import DEFAULT_FOV_V_DEG, pixel_rays
from .errors import InvalidConfig
from .quatpose import CameraPose
from .tensorgrad import Tensor

# softplus(raw) = 0.1 at this bias: near-transparent start
_SIGMA_BIAS_START = math.log(math.expm1(0.1))


@dataclass
class RenderSettings:
    samples_per_ray: int = 48
    near: float = 0.9
    far: float = 3.5
    background: tuple = (1.0, 1.0, 1.0)
    height: int = 16
    width: int = 16
    fov_v_deg: float = DEFAULT_FOV_V_DEG

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise InvalidConfig("samples_per_ray must be >= 2")
        if not self.near < self.far:
            raise InvalidConfig("need near < far")


class RadianceGrid:
    """Dense feature grid plus decoder; all parameters are trainable."""

    def __init__(self, resolution: int = 32, features: int = 8, seed: int = 0):
        if resolution < 2:
            raise InvalidConfig("grid resolution must be >= 2")
        self.resolution = resolution
        self.features = features
        rng = np.random.default_rng(seed)
        hidden = 16
        self.params: dict[str, Tensor] = {
            "grid": Tensor(rng.standard_normal((resolution**3, features)) * 0.01, requires_grad=True),
            "dec_w1": Tensor(rng.standard_normal((features, hidden)) * math.sqrt(2.0 / features), requires_grad=True),
            "dec_b1": Tensor(np.zeros(hidden), requires_grad=True),
            "dec_ws": Tensor(rng.standard_normal((hidden, 1)) * math.sqrt(1.0 / hidden), requires_grad=True),
            "dec_bs": Tensor(np.full(1, _SIGMA_BIAS_START), requires_grad=True),
            "dec_wc": Tensor(rng.standard_normal((hidden, 3)) * math.sqrt(1.0 / hidden), requires_grad=True),
            "dec_bc": Tensor(np.zeros(3), requires_grad=True),
        }

    # ------------------------------------------------------------------
    def _interp_weights(self, pts: np.ndarray):
        """Constant corner indices/weights for trilinear interpolation."""
        r = self.resolution
        u = (pts + 1.0) * 0.5 * (r - 1)
        u = np.clip(u, 0.0, r - 1 - 1e-9)
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        idx = np.empty((pts.shape[0], 8), dtype=np.int64)
        w = np.empty((pts.shape[0], 8), dtype=np.float64)
        k = 0
        for dx in (0, 1):
            wx = (1.0 - f[:, 0]) if dx == 0 else f[:, 0]
            for dy in (0, 1):
                wy = (1.0 - f[:, 1]) if dy == 0 else f[:, 1]
                for dz in (0, 1):
                    wz = (1.0 - f[:, 2]) if dz == 0 else f[:, 2]
                    idx[:, k] = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                    w[:, k] = wx * wy * wz
                    k += 1
        return idx, w

    def decode(self, feats: Tensor):
        """Decoder MLP: features -> (sigma (P,1), rgb (P,3))."""
        p = self.params
        h = tg.silu(tg.add(tg.matmul(feats, p["dec_w1"]), p["dec_b1"]))
        sigma = tg.softplus(tg.add(tg.matmul(h, p["dec_ws"]), p["dec_bs"]))
        rgb = tg.sigmoid(tg.add(tg.matmul(h, p["dec_wc"]), p["dec_bc"]))
        return sigma, rgb

    def query_batch(self, pts: np.ndarray):
        """Interpolate + decode a batch of points; returns (sigma, rgb, inside).

        Points outside [-1, 1]^3 are clamped for interpolation and flagged so
        the renderer can zero their density.
        """
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        idx, w = self._interp_weights(pts)
        feats = tg.weighted_gather(self.params["grid"], idx, w)
        sigma, rgb = self.decode(feats)
        inside = np.all(np.abs(pts) <= 1.0, axis=1)
        return sigma, rgb, inside


def query_point(grid: RadianceGrid, p, background=(1.0, 1.0, 1.0)):
    """Density/color at one point; outside the box it is empty space:
    sigma = 0 and the background color by convention."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if np.any(np.abs(p) > 1.0):
        return 0.0, np.asarray(background, dtype=np.float64)
    with tg.no_grad():
        sigma, rgb, _ = grid.query_batch(p.reshape(1, 3))
    return float(sigma.data[0, 0]), rgb.data[0].copy()


def _sample_depths(n_rays: int, settings: RenderSettings, jitter: np.ndarray | None):
    """Stratified depths per ray: one sample inside each of N equal bins."""
    n = settings.samples_per_ray
    span = settings.far - settings.near
    if jitter is None:
        jitter = np.full((n_rays, n), 0.5)
    t = settings.near + (np.arange(n)[None, :] + jitter) * (span / n)
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = settings.far - t[:, -1]
    return t, deltas


def composite_colors(sigma: Tensor, rgb: Tensor, deltas: np.ndarray, background):
    """Alpha-composite per-ray samples.

    sigma (R, N) and rgb (R, N, 3) are sample densities/colors, deltas the
    per-sample segment lengths. Weights come from the exclusive/inclusive
    cumulative optical depth, so sum_i w_i + residual transmittance
    telescopes to exactly one. Returns (color (R, 3), weights, residual).
    """
    n_rays, n = sigma.shape
    sd = tg.mul(sigma, Tensor(np.asarray(deltas, dtype=np.float64)))
    s_incl = tg.cumsum(sd, axis=1)
    s_excl = tg.sub(s_incl, sd)
    weights = tg.sub(tg.exp(tg.scale(s_excl, -1.0)), tg.exp(tg.scale(s_incl, -1.0)))
    t_res = tg.exp(tg.scale(tg.reduce_sum(sd, axes=1), -1.0))
    color = tg.reduce_sum(tg.mul(tg.reshape(weights, (n_rays, n, 1)), rgb), axes=1)
    bg = Tensor(np.asarray(background, dtype=np.float64).reshape(1, 3))
    color = tg.add(color, tg.mul(tg.reshape(t_res, (n_rays, 1)), bg))
    return color, weights, t_res


def _composite(grid: RadianceGrid, origins, dirs, settings: RenderSettings, jitter):
    n_rays = origins.shape[0]
    n = settings.samples_per_ray
    t, deltas = _sample_depths(n_rays, settings, jitter)
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    sigma, rgb, inside = grid.query_batch(pts.reshape(-1, 3))
    sigma = tg.mul(sigma, Tensor(inside.astype(np.float64).reshape(-1, 1)))
    sigma = tg.reshape(sigma, (n_rays, n))
    rgb = tg.reshape(rgb, (n_rays, n, 3))
    return composite_colors(sigma, rgb, deltas, settings.background)


def render_rays(grid: RadianceGrid, origins, dirs, settings: RenderSettings, jitter=None) -> Tensor:
    """Differentiable colors for a batch of rays, shape (R, 3)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    color, _, _ = _composite(grid, origins, dirs, settings, jitter)
    return color


def render_rays_aux(grid: RadianceGrid, origins, dirs, settings: RenderSettings, jitter=None):
    """Like render_rays but also returns (weights, residual transmittance)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    return _composite(grid, origins, dirs, settings, jitter)


def render_ray(grid: RadianceGrid, origin, direction, settings: RenderSettings, jitter=None):
    """Single-ray convenience wrapper; returns a (3,) numpy color."""
    with tg.no_grad():
        color = render_rays(grid, origin, direction, settings, jitter)
    return color.data[0].copy()


def _image_jitter(settings: RenderSettings, strat_seed) -> np.ndarray | None:
    if strat_seed is None:
        return None
    rng = np.random.default_rng(strat_seed)
    return rng.random((settings.height * settings.width, settings.samples_per_ray))


def render_image(grid: RadianceGrid, pose: CameraPose, settings: RenderSettings, strat_seed=None) -> Tensor:
    """Differentiable (H, W, 3) render; strat_seed fixes the stratification."""
    origins, dirs = pixel_rays(pose, settings.height, settings.width, settings.fov_v_deg)
    color = render_rays(grid, origins, dirs, settings, _image_jitter(settings, strat_seed))
    return tg.reshape(color, (settings.height, settings.width, 3))


def fit_to_views(
    grid: RadianceGrid,
    images: np.ndarray,
    poses,
    settings: RenderSettings,
    iters: int,
    lr: float = 0.02,
    seed: int = 0,
) -> list:
    """Directly supervise the grid with known views (plain MSE); returns losses."""
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    state = tg.AdamState()
    losses = []
    for i in range(iters):
        v = int(rng.integers(0, len(poses)))
        img = render_image(grid, poses[v], settings, strat_seed=int(rng.integers(0, 2**31)))
        diff = tg.sub(img, Tensor(images[v]))
        loss = tg.reduce_mean(tg.mul(diff, diff))
        grads = tg.backward(loss)
        named = {name: grads[p] for name, p in grid.params.items() if p in grads}
        tg.adam_update(grid.params, named, state, lr)
        losses.append(loss.item())
    return losses


def save_grid(path, grid: RadianceGrid) -> None:
    arrays = {name: p.data for name, p in grid.params.items()}
    arrays["__resolution"] = np.array([grid.resolution], dtype=np.float64)
    arrays["__features"] = np.array([grid.features], dtype=np.float64)
    tg.save_checkpoint(path, arrays)


def load_grid(path) -> RadianceGrid:
    arrays = tg.load_checkpoint(path)
    grid = RadianceGrid(int(arrays["__resolution"][0]), int(arrays["__features"][0]), seed=0)
    for name, p in grid.params.items():
        p.data = np.ascontiguousarray(arrays[name])
    return grid
