"""Minimal volume rendering over small animated synthetic scenes.

Pinhole cameras shoot one ray per pixel center, depths are drawn by
stratified sampling between ``near`` and ``far``, and colors are composited
front to back onto a black background. The compositing step has a hand
written backward pass so radiance networks can be trained with the same
Adam machinery as the 2D fits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import NetworkConfig, PosEncodingSpec, TrainHyper, toy_3d_config, toy_3d_hyper
from .errors import CorruptData, InvalidArgument
from .images import Image, psnr, read_ppm, write_ppm
from .nn import AdamState, MlpNetwork, adam_step, init_network, mlp_backward, mlp_forward, positional_encode
from .training import InvRun, TrainReport, incremental_transfer, inv_train

NEAR = 0.5
FAR = 4.0
# world positions are divided by this before encoding so the sampled region
# stays inside roughly [-1, 1]^3
POSITION_SCALE = 2.0
GT_STEPS = 512


@dataclass
class Camera:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3) camera-to-world; columns are right, up, backward
    focal: float  # pixels
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-5):
            raise InvalidArgument("camera rotation must be orthonormal")
        if self.focal <= 0 or self.width < 1 or self.height < 1:
            raise InvalidArgument("camera needs positive focal length and size")

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    @classmethod
    def look_at(cls, position, target, focal: float, width: int, height: int, up=(0.0, 0.0, 1.0)) -> Camera:
        position = np.asarray(position, dtype=np.float64)
        back = position - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        return cls(position, np.stack([right, true_up, back], axis=1), focal, width, height)


@dataclass
class Rays:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit length
    near: float = NEAR
    far: float = FAR

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise InvalidArgument("rays need 0 < near < far")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> Rays:
        return Rays(self.origins[idx], self.directions[idx], self.near, self.far)


def generate_rays(camera: Camera, near: float = NEAR, far: float = FAR) -> Rays:
    """One ray per pixel center, row-major from the top-left pixel."""
    i = np.arange(camera.width) + 0.5
    j = np.arange(camera.height) + 0.5
    gi, gj = np.meshgrid(i, j)
    d_cam = np.stack(
        [(gi - camera.width / 2) / camera.focal, -(gj - camera.height / 2) / camera.focal, -np.ones_like(gi)],
        axis=-1,
    ).reshape(-1, 3)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return Rays(o, d, near, far)


def stratified_samples(
    near: float, far: float, n: int, rng: np.random.Generator | None = None, count: int | None = None
) -> np.ndarray:
    """Depth ``i`` uniform in the ``i``-th of ``n`` equal bins of ``[near, far]``.

    ``rng=None`` pins every sample to its bin midpoint. With ``count`` the
    result is ``(count, n)`` with independent jitter per row.
    """
    if n < 1:
        raise InvalidArgument("need at least one sample per ray")
    shape = (n,) if count is None else (count, n)
    u = np.full(shape, 0.5) if rng is None else rng.random(shape)
    return near + (np.arange(n) + u) * ((far - near) / n)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class CompositeCache:
    colors: np.ndarray
    deltas: np.ndarray
    trans_after: np.ndarray  # exp(-sum_{j<=i} sigma_j delta_j)


def _deltas(depths: np.ndarray, far: float) -> np.ndarray:
    d = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(d, axis=-1) < 0) or np.any(d[..., -1] > far):
        raise InvalidArgument("depths must be non-decreasing and not beyond far")
    return np.concatenate([np.diff(d, axis=-1), far - d[..., -1:]], axis=-1)


def volume_render(colors, sigmas, depths, far: float) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back quadrature; returns ``(rgb, weights)``.

    Works on a single ray (``colors (n, 3)``) or a batch (``(R, n, 3)``).
    """
    rgb, weights, _ = _composite(colors, sigmas, depths, far)
    return rgb, weights


def _composite(colors, sigmas, depths, far):
    c = np.asarray(colors, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    if np.any(s < 0):
        raise InvalidArgument("densities must be non-negative")
    delta = _deltas(depths, far)
    optical = np.cumsum(s * delta, axis=-1)
    after = np.exp(-optical)
    before = np.concatenate([np.ones_like(after[..., :1]), after[..., :-1]], axis=-1)
    weights = before - after  # T_i * alpha_i
    rgb = np.einsum("...n,...nc->...c", weights, c)
    return rgb, weights, CompositeCache(c, delta, after)


def volume_render_backward(cache: CompositeCache, d_rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a loss w.r.t. ``(colors, sigmas)`` given ``d loss / d rgb``.

    With ``E_i = exp(-S_i)`` and ``S_i`` the optical depth through sample ``i``,
    ``d rgb / d sigma_j = delta_j * sum_{i>=j} E_i (c_i - c_{i+1})`` where the
    color past the last sample is the black background.
    """
    c, delta, after = cache.colors, cache.deltas, cache.trans_after
    d_rgb = np.asarray(d_rgb, dtype=np.float64)
    before = np.concatenate([np.ones_like(after[..., :1]), after[..., :-1]], axis=-1)
    d_colors = (before - after)[..., None] * d_rgb[..., None, :]
    nxt = np.concatenate([c[..., 1:, :], np.zeros_like(c[..., :1, :])], axis=-2)
    g = after * np.einsum("...nc,...c->...n", c - nxt, d_rgb)
    tail = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
    return d_colors, delta * tail


# ---------------------------------------------------------------------------
# network rendering


def encode_points(points: np.ndarray, enc: PosEncodingSpec) -> np.ndarray:
    return positional_encode(points / points.dtype.type(POSITION_SCALE), enc).astype(np.float32, copy=False)


def _encoding_for_width(d: int) -> PosEncodingSpec:
    # 3 + 6L columns include the raw coordinates, 6L do not
    if d >= 3 and (d - 3) % 6 == 0:
        return PosEncodingSpec(3, (d - 3) // 6, True)
    if d % 6 == 0 and d > 0:
        return PosEncodingSpec(3, d // 6, False)
    raise InvalidArgument(f"input width {d} is not a 3D positional encoding")


def position_encoding_for(net: MlpNetwork) -> PosEncodingSpec:
    return _encoding_for_width(net.input_dim - net.view_dim)


def _view_inputs(net, dirs, n):
    if not net.view_dim:
        return None
    v = positional_encode(dirs.astype(np.float32), _encoding_for_width(net.view_dim))
    return np.repeat(v, n, axis=0)


@dataclass
class _RayBatchCache:
    net_cache: object
    comp: CompositeCache
    raw_sigma: np.ndarray


def _render_rays(net: MlpNetwork, rays: Rays, depths: np.ndarray, enc: PosEncodingSpec):
    r, n = depths.shape
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * depths[..., None]
    x = encode_points(pts.reshape(-1, 3).astype(np.float32), enc)
    v = _view_inputs(net, rays.directions, n)
    if v is not None:
        x = np.concatenate([x, v], axis=1)
    out, net_cache = mlp_forward(net, x)
    out = out.reshape(r, n, 4)
    raw_sigma = out[..., 3]
    rgb, _, comp = _composite(out[..., :3], np.maximum(raw_sigma, 0), depths, rays.far)
    return rgb, _RayBatchCache(net_cache, comp, raw_sigma)


def render_rays(
    net: MlpNetwork, rays: Rays, n_samples: int, rng: np.random.Generator | None = None, chunk: int = 4096
) -> np.ndarray:
    """``(N, 3)`` composited colors; ``rng=None`` uses bin midpoints."""
    enc = position_encoding_for(net)
    out = []
    for s in range(0, len(rays), chunk):
        sub = rays.subset(slice(s, s + chunk))
        depths = stratified_samples(rays.near, rays.far, n_samples, rng, count=len(sub))
        out.append(_render_rays(net, sub, depths, enc)[0])
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3))


def render_view(net: MlpNetwork, camera: Camera, n_samples: int = 32, rng: np.random.Generator | None = None) -> Image:
    rgb = render_rays(net, generate_rays(camera), n_samples, rng)
    return Image(np.clip(rgb, 0, 1).reshape(camera.height, camera.width, 3).astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic scene


@dataclass(frozen=True)
class SphereScene:
    """A soft-edged sphere with a linear color gradient over a black void."""

    center: tuple
    radius: float
    color: tuple  # color at the center
    gradient: tuple  # (3, 3) color change per unit offset / radius, row-major
    density: float = 30.0
    softness: float = 0.02

    def sigma(self, points: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(points - np.asarray(self.center), axis=-1)
        return self.density * 0.5 * (1 + np.tanh((self.radius - d) / self.softness))

    def emission(self, points: np.ndarray) -> np.ndarray:
        rel = (points - np.asarray(self.center)) / self.radius
        g = np.asarray(self.gradient).reshape(3, 3)
        return np.clip(np.asarray(self.color) + rel @ g.T, 0, 1)

    def render(self, camera: Camera, steps: int = GT_STEPS) -> Image:
        """Dense fixed-step reference rendering with the same quadrature."""
        rays = generate_rays(camera)
        depths = stratified_samples(rays.near, rays.far, steps, None)
        pts = rays.origins[:, None, :] + rays.directions[:, None, :] * depths[None, :, None]
        rgb, _ = volume_render(self.emission(pts), self.sigma(pts), np.broadcast_to(depths, pts.shape[:2]), rays.far)
        return Image(np.clip(rgb, 0, 1).reshape(camera.height, camera.width, 3).astype(np.float32))


@dataclass
class SceneFrame:
    scene: SphereScene
    train_cameras: list[Camera]
    train_images: list[Image]
    heldout_camera: Camera
    heldout_image: Image

    @property
    def views(self) -> list[tuple[Camera, Image]]:
        return list(zip(self.train_cameras, self.train_images))


def scene_cameras(size: int = 32, n_train: int = 8, distance: float = 2.5, fov_deg: float = 40.0):
    """``n_train`` cameras on a ring at alternating heights plus one held out between two of them."""
    focal = (size / 2) / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n_train):
        a = 2 * math.pi * i / n_train
        z = 0.6 if i % 2 else -0.3
        pos = (distance * math.cos(a), distance * math.sin(a), z)
        cams.append(Camera.look_at(pos, (0, 0, 0), focal, size, size))
    a = 2 * math.pi * 0.5 / n_train
    held = Camera.look_at((distance * math.cos(a), distance * math.sin(a), 0.15), (0, 0, 0), focal, size, size)
    return cams, held


def synth_scene_sequence(frames: int, seed: int = 0, size: int = 32, step: float = 0.03) -> list[SceneFrame]:
    """Moving-sphere frames; the center moves ``step`` scene units per frame.

    The scene box is ``[-1, 1]^3`` so ``step=0.03`` is 1.5% of its extent.
    """
    if frames < 2:
        raise InvalidArgument("a scene sequence needs at least 2 frames")
    rng = np.random.default_rng(seed)
    start = rng.uniform(-0.15, 0.15, 3)
    heading = rng.normal(size=3)
    heading /= np.linalg.norm(heading)
    color = tuple(rng.uniform(0.35, 0.75, 3))
    gradient = tuple(rng.uniform(-0.25, 0.25, 9))
    radius = float(rng.uniform(0.4, 0.5))
    cams, held = scene_cameras(size)
    out = []
    for t in range(frames):
        scene = SphereScene(tuple(start + heading * step * t), radius, color, gradient)
        out.append(SceneFrame(scene, cams, [scene.render(c) for c in cams], held, scene.render(held)))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class ViewSet:
    """All pixels of a set of views as one ray bundle."""

    rays: Rays
    targets: np.ndarray  # (N, 3)

    @classmethod
    def from_views(cls, views: Sequence[tuple[Camera, Image]]) -> ViewSet:
        if len(views) < 2:
            raise InvalidArgument("training needs at least two views")
        bundles = [generate_rays(c) for c, _ in views]
        rays = Rays(np.concatenate([b.origins for b in bundles]), np.concatenate([b.directions for b in bundles]))
        return cls(rays, np.concatenate([img.flat() for _, img in views]).astype(np.float64))


def _fit3d(net, vs: ViewSet, iters, mask, hyper, rng, state, n_samples):
    state = state if state is not None else AdamState.zeros_like(net)
    enc = position_encoding_for(net)
    losses = []
    for it in range(iters):
        idx = rng.integers(0, len(vs.rays), size=hyper.batch_size)
        batch = vs.rays.subset(idx)
        depths = stratified_samples(batch.near, batch.far, n_samples, rng, count=len(idx))
        rgb, cache = _render_rays(net, batch, depths, enc)
        diff = rgb - vs.targets[idx]
        losses.append(float(np.mean(diff * diff)))
        d_rgb = 2 * diff / diff.size
        d_col, d_sig = volume_render_backward(cache.comp, d_rgb)
        d_out = np.concatenate([d_col, (d_sig * (cache.raw_sigma > 0))[..., None]], axis=-1)
        grads = mlp_backward(net, cache.net_cache, d_out.reshape(-1, 4).astype(np.float32), frozen=mask)
        adam_step(net, grads, state, hyper.lr_at(it, iters), hyper.beta1, hyper.beta2, hyper.eps, mask)
    return net, state, losses


def views_psnr(net: MlpNetwork, views: Sequence[tuple[Camera, Image]], n_samples: int = 32) -> float:
    """Mean PSNR of midpoint-sampled renders over ``views``."""
    return float(np.mean([psnr(render_view(net, c, n_samples), img) for c, img in views]))


def train_frame_3d(
    init: MlpNetwork,
    views: Sequence[tuple[Camera, Image]],
    iters: int,
    mask: Sequence[bool] | None = None,
    hyper: TrainHyper | None = None,
    rng: np.random.Generator | None = None,
    state: AdamState | None = None,
    n_samples: int = 32,
) -> tuple[MlpNetwork, TrainReport]:
    hyper = hyper if hyper is not None else toy_3d_hyper()
    start = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng([hyper.seed, 0])
    net, _, losses = _fit3d(init.copy(), ViewSet.from_views(views), iters, mask, hyper, rng, state, n_samples)
    report = TrainReport()
    report.add(views_psnr(net, views, n_samples), iters, time.perf_counter() - start, losses)
    return net, report


def scene_trainer(seq: Sequence[SceneFrame], iters: int, hyper: TrainHyper, n_samples: int = 32):
    sets = [ViewSet.from_views(f.views) for f in seq]

    def trainer(net, t, mask, state):
        rng = np.random.default_rng([hyper.seed, t])
        net, state, losses = _fit3d(net, sets[t], iters, mask, hyper, rng, state, n_samples)
        return net, state, views_psnr(net, seq[t].views, n_samples), losses

    return trainer


def incremental_transfer_3d(
    seq: Sequence[SceneFrame],
    iters_per_frame: int,
    hyper: TrainHyper | None = None,
    config: NetworkConfig | None = None,
    n_samples: int = 32,
    states: list | None = None,
) -> tuple[list[MlpNetwork], TrainReport]:
    hyper = hyper if hyper is not None else toy_3d_hyper()
    config = config or toy_3d_config()
    trainer = scene_trainer(seq, iters_per_frame, hyper, n_samples)
    return incremental_transfer(
        trainer, len(seq), init_network(config, hyper.seed), iters_per_frame, hyper.carry_optimizer, states
    )


def inv_train_3d(
    seq: Sequence[SceneFrame],
    warmup_frames: int,
    k: int | None = None,
    iters_per_frame: int = 300,
    hyper: TrainHyper | None = None,
    config: NetworkConfig | None = None,
    n_samples: int = 32,
    warm_start=None,
) -> InvRun:
    hyper = hyper if hyper is not None else toy_3d_hyper()
    config = config or toy_3d_config()
    if k is not None:
        config = config.with_k(k)
    trainer = scene_trainer(seq, iters_per_frame, hyper, n_samples)
    return inv_train(
        trainer,
        len(seq),
        warmup_frames,
        config,
        init_network(config, hyper.seed),
        iters_per_frame,
        hyper.carry_optimizer,
        warm_start,
    )


# ---------------------------------------------------------------------------
# manifest


def write_scene_sequence(seq: Sequence[SceneFrame], directory: str | Path) -> Path:
    """PPM images plus ``manifest.txt``.

    Each manifest line is ``frame role index focal width height px py pz r00 ... r22 path``
    with role ``train`` or ``heldout``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# frame role index focal width height position(3) rotation(9, row-major) image"]
    for t, fr in enumerate(seq):
        entries = [("train", i, c, img) for i, (c, img) in enumerate(fr.views)]
        entries.append(("heldout", 0, fr.heldout_camera, fr.heldout_image))
        for role, i, cam, img in entries:
            name = f"f{t:03d}_{role}{i}.ppm"
            write_ppm(img, d / name)
            nums = [repr(float(v)) for v in (*cam.position, *cam.rotation.ravel())]
            lines.append(" ".join([str(t), role, str(i), repr(float(cam.focal)), str(cam.width), str(cam.height), *nums, name]))
    path = d / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class ManifestFrame:
    views: list[tuple[Camera, Image]]
    heldout: tuple[Camera, Image] | None


def read_scene_manifest(path: str | Path) -> list[ManifestFrame]:
    path = Path(path)
    frames: dict[int, ManifestFrame] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 19 or parts[1] not in ("train", "heldout"):
            raise CorruptData(f"{path}:{lineno}: malformed manifest line")
        try:
            t, w, h = int(parts[0]), int(parts[4]), int(parts[5])
            focal = float(parts[3])
            nums = np.array([float(v) for v in parts[6:18]])
        except ValueError as exc:
            raise CorruptData(f"{path}:{lineno}: {exc}") from exc
        cam = Camera(nums[:3], nums[3:].reshape(3, 3), focal, w, h)
        img = read_ppm(path.parent / parts[18])
        fr = frames.setdefault(t, ManifestFrame([], None))
        if parts[1] == "train":
            fr.views.append((cam, img))
        else:
            fr.heldout = (cam, img)
    return [frames[t] for t in sorted(frames)]
