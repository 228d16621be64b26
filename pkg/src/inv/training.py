"""Frame-to-frame training schedules shared by the 2D and 3D pipelines.

Both schedules are written against a *frame trainer*: a callable that takes
``(net, frame_index, freeze_mask, adam_state)``, trains ``net`` in place on
that frame and returns ``(net, adam_state, psnr_db, loss_trace)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .config import NetworkConfig
from .errors import InvalidArgument
from .model import InvArtifact, make_blocks
from .nn import AdamState, MlpNetwork

FrameTrainer = Callable[
    [MlpNetwork, int, Optional[Sequence[bool]], Optional[AdamState]],
    "tuple[MlpNetwork, AdamState, float, list[float]]",
]


@dataclass
class TrainReport:
    psnr: list[float] = field(default_factory=list)
    iters: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)

    def add(self, psnr_db: float, iters: int, seconds: float, losses: list[float]) -> None:
        self.psnr.append(psnr_db)
        self.iters.append(iters)
        self.seconds.append(seconds)
        self.losses.append(losses)

    def extend(self, other: TrainReport) -> None:
        self.psnr += other.psnr
        self.iters += other.iters
        self.seconds += other.seconds
        self.losses += other.losses

    def to_tsv(self, timings: bool = True) -> str:
        """``frame  psnr_db  iters  seconds``; seconds are written as 0 unless ``timings``."""
        rows = ["frame\tpsnr_db\titers\tseconds"]
        for i, (p, n, s) in enumerate(zip(self.psnr, self.iters, self.seconds)):
            rows.append(f"{i}\t{p:.4f}\t{n}\t{s if timings else 0.0:.3f}")
        return "\n".join(rows) + "\n"


def freeze_all_but_first(k: int, num_layers: int) -> list[bool]:
    return [i >= k for i in range(num_layers)]


def _run_frame(trainer, net, t, mask, state, iters, report):
    start = time.perf_counter()
    net, state, p, losses = trainer(net, t, mask, state)
    report.add(p, iters, time.perf_counter() - start, losses)
    return net, state


def incremental_transfer(
    trainer: FrameTrainer,
    n_frames: int,
    init: MlpNetwork,
    iters: int,
    carry_optimizer: bool = False,
    states: list[AdamState | None] | None = None,
) -> tuple[list[MlpNetwork], TrainReport]:
    """One network per frame; frame t starts from frame t-1's result.

    If ``states`` is a list, the optimizer state handed to the next frame is
    appended to it after every frame (``None`` when moments are not carried).
    """
    if n_frames < 1:
        raise InvalidArgument("need at least one frame")
    report = TrainReport()
    nets = []
    net, state = init.copy(), None
    for t in range(n_frames):
        net, state = _run_frame(trainer, net, t, None, state, iters, report)
        nets.append(net.copy())
        if not carry_optimizer:
            state = None
        if states is not None:
            states.append(state.copy() if state is not None else None)
    return nets, report


@dataclass
class InvRun:
    artifact: InvArtifact
    report: TrainReport
    networks: list[MlpNetwork]  # full model at the end of every frame, warm-up included


def inv_train(
    trainer: FrameTrainer,
    n_frames: int,
    warmup: int,
    config: NetworkConfig,
    init: MlpNetwork,
    iters: int,
    carry_optimizer: bool = False,
    warm_start: tuple | None = None,
) -> InvRun:
    """Warm-up (all layers train) then structure transfer (color layers frozen).

    The color block captured at the end of frame ``warmup - 1`` is the shared
    one. ``warm_start`` may supply ``(networks, report)`` or
    ``(networks, report, states)`` of an identical incremental run instead of
    retraining the warm-up frames; with carried moments the states are needed
    for the result to match a cold run exactly.
    """
    if not 1 <= warmup < n_frames:
        raise InvalidArgument(f"warmup must be in [1, {n_frames - 1}], got {warmup}")
    k = config.structure_layers
    if warm_start is not None:
        nets = [n.copy() for n in warm_start[0][:warmup]]
        report = TrainReport()
        report.extend(_slice_report(warm_start[1], warmup))
        net, state = nets[-1].copy(), None
        if carry_optimizer:
            if len(warm_start) < 3 or warm_start[2][warmup - 1] is None:
                raise InvalidArgument("warm_start with carried optimizer needs the optimizer states")
            state = warm_start[2][warmup - 1].copy()
    else:
        report, nets = TrainReport(), []
        net, state = init.copy(), None
        for t in range(warmup):
            net, state = _run_frame(trainer, net, t, None, state, iters, report)
            nets.append(net.copy())
            if not carry_optimizer:
                state = None
    _, shared = make_blocks(config, net.layers)
    shared_bytes = shared.tobytes()
    mask = freeze_all_but_first(k, net.num_layers)
    frames = []
    for t in range(warmup, n_frames):
        net, state = _run_frame(trainer, net, t, mask, state, iters, report)
        sb, cb = make_blocks(config, net.layers, frame_index=t - warmup)
        if cb.tobytes() != shared_bytes:
            raise AssertionError(f"shared color layers changed while frozen (frame {t})")
        frames.append(sb)
        nets.append(net.copy())
        if not carry_optimizer:
            state = None
    artifact = InvArtifact(config, shared, frames, warmup_count=warmup)
    return InvRun(artifact, report, nets)


def _slice_report(rep: TrainReport, n: int) -> TrainReport:
    return TrainReport(rep.psnr[:n], rep.iters[:n], rep.seconds[:n], rep.losses[:n])
