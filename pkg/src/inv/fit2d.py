"""Coordinate-to-RGB fitting on small procedural videos.

Hosts the 2D experiments: incremental transfer, two-stage training with a
shared color block, structure swap and color scheme transfer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .config import NetworkConfig, PosEncodingSpec, TrainHyper, toy_2d_config, toy_2d_hyper
from .errors import InvalidArgument
from .images import Image, psnr
from .nn import AdamState, MlpNetwork, adam_step, init_network, mlp_backward, mlp_forward, mse_loss, positional_encode
from .training import InvRun, TrainReport, freeze_all_but_first, incremental_transfer, inv_train

VIDEO_KINDS = ("translate", "rotate", "color_shift")


@dataclass
class Video2D:
    frames: list[Image]
    frame_rate: Fraction = Fraction(30)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidArgument("a video needs at least one frame")
        if len({f.pixels.shape for f in self.frames}) != 1:
            raise InvalidArgument("all frames must share one size")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> Image:
        return self.frames[i]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames[0].size


# ---------------------------------------------------------------------------
# procedural video


@dataclass(frozen=True)
class _Texture:
    base: np.ndarray  # (3,)
    waves: list  # (kx, ky, phase, amplitude(3,))
    blobs: list  # (cx, cy, radius, color(3,))

    @classmethod
    def random(cls, rng: np.random.Generator, size: int) -> _Texture:
        base = rng.uniform(-0.4, 0.4, 3)
        waves = []
        for _ in range(12):
            theta = rng.uniform(0, np.pi)
            k = 2 * np.pi / (rng.uniform(1 / 16, 1 / 4) * size)
            waves.append((k * np.cos(theta), k * np.sin(theta), rng.uniform(0, 2 * np.pi), rng.uniform(-0.5, 0.5, 3)))
        blobs = []
        for _ in range(24):
            cx, cy = rng.uniform(0.05, 0.95, 2) * size
            blobs.append((cx, cy, rng.uniform(2 / 64, 5 / 64) * size, rng.uniform(-1.2, 1.2, 3)))
        return cls(base, waves, blobs)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raw = np.broadcast_to(self.base, x.shape + (3,)).copy()
        for kx, ky, ph, amp in self.waves:
            raw += np.sin(kx * x + ky * y + ph)[..., None] * amp
        for cx, cy, r, col in self.blobs:
            d = np.hypot(x - cx, y - cy)
            raw += (0.5 * (1 + np.tanh((r - d) / 1.5)))[..., None] * col
        return 0.5 + 0.45 * np.tanh(raw)


def _hue_rotation(angle: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis."""
    axis = np.ones(3) / np.sqrt(3)
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def synth_video(
    kind: str,
    frames: int,
    size: int = 64,
    seed: int = 0,
    shift_px: int = 1,
    rotate_deg: float = 1.5,
    hue_deg: float = 6.0,
) -> Video2D:
    """Deterministic procedural video.

    ``translate`` moves a fixed texture right by ``shift_px`` whole pixels per
    frame (so interior pixels of adjacent frames match exactly), ``rotate``
    turns it about the image center and ``color_shift`` keeps the structure
    and rotates the hue.
    """
    if kind not in VIDEO_KINDS:
        raise InvalidArgument(f"unknown video kind {kind!r}; expected one of {VIDEO_KINDS}")
    if frames < 2:
        raise InvalidArgument("synthetic videos have at least 2 frames")
    tex = _Texture.random(np.random.default_rng(seed), size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for t in range(frames):
        if kind == "translate":
            pix = tex(xs - shift_px * t, ys)
        elif kind == "rotate":
            a = math.radians(rotate_deg * t)
            c = (size - 1) / 2
            u, v = xs - c, ys - c
            pix = tex(math.cos(a) * u + math.sin(a) * v + c, -math.sin(a) * u + math.cos(a) * v + c)
        else:
            pix = tex(xs, ys)
            pix = 0.5 + (pix - 0.5) @ _hue_rotation(math.radians(hue_deg * t)).T
        out.append(Image(np.clip(pix, 0, 1).astype(np.float32)))
    return Video2D(out)


def synth_palette_image(size: int = 64, seed: int = 0, colors: int = 4) -> Image:
    """Smooth regions painted from a small random palette.

    Used as the image pairs of the color scheme transfer experiment, where
    the two images differ both in layout and in palette.
    """
    if colors < 2:
        raise InvalidArgument("a palette needs at least two colors")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    fields = []
    for _ in range(colors):
        f = np.zeros((size, size))
        for _ in range(3):
            theta = rng.uniform(0, np.pi)
            k = rng.uniform(3, 9)
            f += np.sin(2 * k * (np.cos(theta) * xs + np.sin(theta) * ys) + rng.uniform(0, 2 * np.pi))
        fields.append(f)
    logits = 3 * np.stack(fields, axis=-1)
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    palette = rng.uniform(0.05, 0.95, (colors, 3))
    return Image(np.clip(w @ palette, 0, 1).astype(np.float32))


# ---------------------------------------------------------------------------
# coordinates / sampling


def pixel_coords(width: int, height: int) -> np.ndarray:
    """Pixel-center coordinates in [-1, 1]^2 as ``(H*W, 2)`` rows of (x, y), row-major."""
    xs = (2 * np.arange(width) + 1) / width - 1
    ys = (2 * np.arange(height) + 1) / height - 1
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float32)


def sample_pixels(image: Image, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws with replacement: ``(coords (n, 2), rgb (n, 3))``."""
    if n < 1:
        raise InvalidArgument("n must be positive")
    idx = rng.integers(0, image.width * image.height, size=n)
    return pixel_coords(image.width, image.height)[idx], image.flat()[idx]


def encoding_for(net_or_dim) -> PosEncodingSpec:
    """Recover the 2D encoding from a network's input width.

    ``2 + 4L`` columns means the raw coordinates are included, ``4L`` that
    they are not; the two families never overlap.
    """
    d = net_or_dim.input_dim if isinstance(net_or_dim, MlpNetwork) else int(net_or_dim)
    if d >= 2 and (d - 2) % 4 == 0:
        return PosEncodingSpec(2, (d - 2) // 4, True)
    if d % 4 == 0 and d > 0:
        return PosEncodingSpec(2, d // 4, False)
    raise InvalidArgument(f"input width {d} is not a 2D positional encoding")


def encoded_grid(width: int, height: int, enc: PosEncodingSpec) -> np.ndarray:
    return positional_encode(pixel_coords(width, height), enc).astype(np.float32)


# ---------------------------------------------------------------------------
# rendering / training


def render_image_2d(net: MlpNetwork, width: int, height: int, enc: PosEncodingSpec | None = None) -> Image:
    enc = enc or encoding_for(net)
    x = encoded_grid(width, height, enc)
    if x.shape[1] != net.input_dim:
        raise InvalidArgument("network input width does not match the encoding")
    out, _ = mlp_forward(net, x)
    return Image(np.clip(out, 0, 1).reshape(height, width, 3))


def frame_rng(hyper: TrainHyper, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([hyper.seed, frame_index])


def _fit(net, grid, target, iters, mask, hyper, rng, state, snapshot_every=None, snapshots=None):
    state = state if state is not None else AdamState.zeros_like(net)
    losses = []
    n = grid.shape[0]
    for it in range(iters):
        if snapshots is not None and snapshot_every and it % snapshot_every == 0:
            snapshots.append((it, net.copy()))
        idx = rng.integers(0, n, size=hyper.batch_size)
        out, cache = mlp_forward(net, grid[idx])
        loss, d = mse_loss(out, target[idx])
        grads = mlp_backward(net, cache, d, frozen=mask)
        adam_step(net, grads, state, hyper.lr_at(it, iters), hyper.beta1, hyper.beta2, hyper.eps, mask)
        losses.append(loss)
    if snapshots is not None and snapshot_every and iters % snapshot_every == 0:
        snapshots.append((iters, net.copy()))
    return net, state, losses


def train_frame_2d(
    init: MlpNetwork,
    image: Image,
    iters: int,
    mask: Sequence[bool] | None = None,
    hyper: TrainHyper | None = None,
    rng: np.random.Generator | None = None,
    state: AdamState | None = None,
) -> tuple[MlpNetwork, TrainReport]:
    """``iters`` Adam steps of batched pixel MSE, starting from a copy of ``init``."""
    hyper = hyper if hyper is not None else toy_2d_hyper()
    start = time.perf_counter()
    enc = encoding_for(init)
    grid = encoded_grid(image.width, image.height, enc)
    rng = rng if rng is not None else frame_rng(hyper, 0)
    net, _, losses = _fit(init.copy(), grid, image.flat(), iters, mask, hyper, rng, state)
    report = TrainReport()
    report.add(psnr(render_image_2d(net, image.width, image.height, enc), image), iters, time.perf_counter() - start, losses)
    return net, report


def video_trainer(video: Video2D, iters: int, hyper: TrainHyper, enc: PosEncodingSpec):
    """Frame trainer over ``video`` for the schedules in :mod:`inv.training`."""
    w, h = video.size
    grid = encoded_grid(w, h, enc)

    def trainer(net, t, mask, state):
        img = video[t]
        net, state, losses = _fit(net, grid, img.flat(), iters, mask, hyper, frame_rng(hyper, t), state)
        return net, state, psnr(render_image_2d(net, w, h, enc), img), losses

    return trainer


def incremental_transfer_2d(
    video: Video2D,
    iters_per_frame: int,
    hyper: TrainHyper | None = None,
    config: NetworkConfig | None = None,
    init: MlpNetwork | None = None,
    states: list | None = None,
) -> tuple[list[MlpNetwork], TrainReport]:
    hyper = hyper if hyper is not None else toy_2d_hyper()
    config = config or toy_2d_config()
    init = init if init is not None else init_network(config, hyper.seed)
    trainer = video_trainer(video, iters_per_frame, hyper, config.pos_enc)
    return incremental_transfer(trainer, len(video), init, iters_per_frame, hyper.carry_optimizer, states)


def scratch_per_frame_2d(
    video: Video2D,
    iters_per_frame: int,
    hyper: TrainHyper | None = None,
    config: NetworkConfig | None = None,
    frames: Sequence[int] | None = None,
) -> tuple[list[MlpNetwork], TrainReport]:
    """Baseline: every frame trained from the same fresh initialization."""
    hyper = hyper if hyper is not None else toy_2d_hyper()
    config = config or toy_2d_config()
    init = init_network(config, hyper.seed)
    trainer = video_trainer(video, iters_per_frame, hyper, config.pos_enc)
    report, nets = TrainReport(), []
    for t in frames if frames is not None else range(len(video)):
        start = time.perf_counter()
        net, _, p, losses = trainer(init.copy(), t, None, None)
        report.add(p, iters_per_frame, time.perf_counter() - start, losses)
        nets.append(net)
    return nets, report


def inv_train_2d(
    video: Video2D,
    warmup_frames: int,
    k: int | None = None,
    iters_per_frame: int = 500,
    hyper: TrainHyper | None = None,
    config: NetworkConfig | None = None,
    warm_start=None,
) -> InvRun:
    hyper = hyper if hyper is not None else toy_2d_hyper()
    config = config or toy_2d_config()
    if k is not None:
        config = config.with_k(k)
    init = init_network(config, hyper.seed)
    trainer = video_trainer(video, iters_per_frame, hyper, config.pos_enc)
    return inv_train(
        trainer, len(video), warmup_frames, config, init, iters_per_frame, hyper.carry_optimizer, warm_start
    )


def color_scheme_transfer_2d(
    net_a: MlpNetwork,
    image_b: Image,
    iters: int,
    k: int = 1,
    snapshot_every: int = 100,
    hyper: TrainHyper | None = None,
    train_all: bool = False,
) -> list[tuple[int, Image]]:
    """Fine-tune the first ``k`` layers of ``net_a`` on ``image_b`` (later layers frozen).

    Returns renders at iteration 0, every ``snapshot_every`` iterations and at
    the end. ``train_all`` is the control arm with every layer trainable.
    """
    hyper = hyper if hyper is not None else toy_2d_hyper()
    if not 0 < k <= net_a.num_layers:
        raise InvalidArgument(f"k must be in [1, {net_a.num_layers}], got {k}")
    enc = encoding_for(net_a)
    grid = encoded_grid(image_b.width, image_b.height, enc)
    mask = None if train_all else freeze_all_but_first(k, net_a.num_layers)
    snaps: list = []
    every = snapshot_every if snapshot_every > 0 else max(iters, 1)
    net, _, _ = _fit(net_a.copy(), grid, image_b.flat(), iters, mask, hyper, frame_rng(hyper, 0), None, every, snaps)
    if not snaps or snaps[-1][0] != iters:
        snaps.append((iters, net))
    return [(it, render_image_2d(n, image_b.width, image_b.height, enc)) for it, n in snaps]
