"""Command-line entry points.

Every subcommand takes ``--config FILE`` (plain ``key = value`` lines) and the
matching ``--key value`` flags; flags win over the file, the file wins over
defaults. Outputs are deterministic for a fixed ``--seed``: metrics tables
write their ``seconds`` column as 0 unless ``--timings`` is given.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PRESETS, TrainHyper, paper_nerf_config
from .errors import InvError
from .images import Image, edge_correlation, histogram_distance, psnr, read_ppm, write_ppm
from .model import MIB, color_bytes, load_artifact, model_bytes, save_artifact, structure_bytes, structure_swap
from .nn import init_network, serialize_weights

VIDEO_KINDS = ("translate", "rotate", "color_shift")


@dataclass
class RunConfig:
    """All tunable keys; each is also a ``--key`` flag."""

    arch: str = field(default="", metadata={"help": "toy2d or toy3d (default follows the data kind)"})
    kind: str = field(default="translate", metadata={"help": "translate, rotate, color_shift or scene"})
    frames: int = field(default=20, metadata={"help": "number of video / scene frames"})
    size: int = field(default=64, metadata={"help": "image side in pixels (scenes use 32 unless set)"})
    k: int = field(default=0, metadata={"help": "structure layers (0 = architecture default)"})
    warmup: int = field(default=5, metadata={"help": "warm-up frames before the color layers freeze"})
    iters: int = field(default=500, metadata={"help": "Adam steps per frame"})
    lr: float = field(default=3e-3, metadata={"help": "Adam learning rate"})
    lr_final: float = field(default=0.0, metadata={"help": "per-frame exponential decay target (0 = constant)"})
    carry: bool = field(default=True, metadata={"help": "carry Adam moments from frame to frame"})
    batch: int = field(default=1024, metadata={"help": "pixels (rays) per step"})
    samples: int = field(default=32, metadata={"help": "depth samples per ray (3D)"})
    seed: int = field(default=0, metadata={"help": "seed for data, init and sampling"})
    codec: int = field(default=1, metadata={"help": "frame codec: 0 raw, 1 streaming delta, 2 batched"})
    fps: float = field(default=30.0, metadata={"help": "pacing / bitrate frame rate"})

    def hyper(self) -> TrainHyper:
        return TrainHyper(
            lr=self.lr,
            batch_size=self.batch,
            seed=self.seed,
            carry_optimizer=self.carry,
            lr_final=self.lr_final or None,
        )

    def network_config(self):
        arch = self.arch or ("toy3d" if self.kind == "scene" else "toy2d")
        if arch not in PRESETS:
            raise UsageError(f"unknown arch {arch!r}")
        return PRESETS[arch](self.k) if self.k else PRESETS[arch]()


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {name}: {text!r}") from exc
    return text.strip()


def read_config_file(path: str | Path) -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = replace(cfg, **read_config_file(args.config))
    explicit = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            explicit[f.name] = _coerce(f.name, v) if isinstance(v, str) else v
    cfg = replace(cfg, **explicit)
    if cfg.kind not in VIDEO_KINDS + ("scene",):
        raise UsageError(f"unknown kind {cfg.kind!r}")
    if cfg.codec not in (0, 1, 2):
        raise UsageError(f"codec must be 0, 1 or 2, got {cfg.codec}")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _video(cfg: RunConfig, seed: int | None = None):
    from .fit2d import synth_video

    return synth_video(cfg.kind, cfg.frames, cfg.size, seed=cfg.seed if seed is None else seed)


def _scene(cfg: RunConfig):
    from .render3d import synth_scene_sequence

    size = cfg.size if cfg.size != RunConfig.size else 32
    return synth_scene_sequence(cfg.frames, cfg.seed, size=size)


def _write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    text = "\t".join(header) + "\n" + "".join("\t".join(str(c) for c in r) + "\n" for r in rows)
    path.write_text(text)
    return text


def _load_video_dir(directory: str):
    from .fit2d import Video2D

    files = sorted(Path(directory).glob("*.ppm"))
    if not files:
        raise UsageError(f"no .ppm frames in {directory}")
    return Video2D([read_ppm(f) for f in files])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> None:
    out = _out_dir(args.out)
    if cfg.kind == "scene":
        from .render3d import write_scene_sequence

        write_scene_sequence(_scene(cfg), out)
        print(f"wrote {cfg.frames} scene frames to {out}")
        return
    video = _video(cfg)
    for i, img in enumerate(video.frames):
        write_ppm(img, out / f"frame_{i:03d}.ppm")
    print(f"wrote {len(video)} frames to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    out = _out_dir(args.out)
    netcfg = cfg.network_config()
    hyper = cfg.hyper()
    if cfg.kind == "scene":
        from .render3d import incremental_transfer_3d, inv_train_3d, render_view

        seq = _scene(cfg)
        if args.mode == "inv":
            run = inv_train_3d(seq, cfg.warmup, None, cfg.iters, hyper, netcfg, cfg.samples)
            nets, report = run.networks, run.report
            save_artifact(run.artifact, out / "artifact.inva")
        else:
            nets, report = incremental_transfer_3d(seq, cfg.iters, hyper, netcfg, cfg.samples)
        renders = [render_view(n, fr.heldout_camera, cfg.samples) for n, fr in zip(nets, seq)]
    else:
        from .fit2d import incremental_transfer_2d, inv_train_2d, render_image_2d

        video = _load_video_dir(args.video) if args.video else _video(cfg)
        w, h = video.size
        if args.mode == "inv":
            run = inv_train_2d(video, cfg.warmup, None, cfg.iters, hyper, netcfg)
            nets, report = run.networks, run.report
            save_artifact(run.artifact, out / "artifact.inva")
        else:
            nets, report = incremental_transfer_2d(video, cfg.iters, hyper, netcfg)
        renders = [render_image_2d(n, w, h) for n in nets]
    if args.mode == "it":
        weights = out / "weights"
        weights.mkdir(exist_ok=True)
        for i, n in enumerate(nets):
            (weights / f"frame_{i:03d}.bin").write_bytes(serialize_weights(n))
        (out / "config.json").write_text(netcfg.to_json() + "\n")
    rdir = out / "renders"
    rdir.mkdir(exist_ok=True)
    for i, img in enumerate(renders):
        write_ppm(img, rdir / f"frame_{i:03d}.ppm")
    text = report.to_tsv(timings=args.timings)
    (out / "metrics.tsv").write_text(text)
    sys.stdout.write(text)


def cmd_swap(cfg: RunConfig, args) -> None:
    from .fit2d import incremental_transfer_2d, render_image_2d

    out = _out_dir(args.out)
    video = _video(cfg)
    w, h = video.size
    nets, _ = incremental_transfer_2d(video, cfg.iters, cfg.hyper(), cfg.network_config())
    ks = [int(x) for x in args.ks.split(",")]
    rows = []
    for t in range(len(nets) - 1):
        for k in ks:
            img = render_image_2d(structure_swap(nets[t], nets[t + 1], k), w, h)
            write_ppm(img, out / f"swap_{t:03d}_k{k}.ppm")
            rows.append((t, t + 1, k, f"{psnr(img, video[t]):.4f}", f"{psnr(img, video[t + 1]):.4f}"))
    sys.stdout.write(_write_tsv(out / "swap.tsv", ["a", "b", "k", "psnr_vs_a", "psnr_vs_b"], rows))


def cmd_transfer(cfg: RunConfig, args) -> None:
    from .fit2d import color_scheme_transfer_2d, synth_palette_image, train_frame_2d

    out = _out_dir(args.out)
    image_a = synth_palette_image(cfg.size, 2 * cfg.seed)
    image_b = synth_palette_image(cfg.size, 2 * cfg.seed + 1)
    net_a, _ = train_frame_2d(init_network(cfg.network_config(), cfg.seed), image_a, args.fit_iters, hyper=cfg.hyper())
    k = cfg.k or cfg.network_config().structure_layers
    snaps = color_scheme_transfer_2d(net_a, image_b, cfg.iters, k, args.every, cfg.hyper(), train_all=args.all_layers)
    rows = []
    for it, img in snaps:
        write_ppm(img, out / f"snap_{it:05d}.ppm")
        rows.append(
            (
                it,
                f"{histogram_distance(img, image_a):.5f}",
                f"{histogram_distance(img, image_b):.5f}",
                f"{edge_correlation(img, image_a):.5f}",
                f"{edge_correlation(img, image_b):.5f}",
            )
        )
    write_ppm(image_a, out / "image_a.ppm")
    write_ppm(image_b, out / "image_b.ppm")
    header = ["iter", "hist_to_a", "hist_to_b", "edge_corr_a", "edge_corr_b"]
    sys.stdout.write(_write_tsv(out / "transfer.tsv", header, rows))


def _render_artifact(art, directory: Path, size: int) -> None:
    from .fit2d import render_image_2d

    directory.mkdir(parents=True, exist_ok=True)
    for i in range(len(art)):
        write_ppm(render_image_2d(art.network(i), size, size), directory / f"frame_{i:03d}.ppm")


def cmd_encode(cfg: RunConfig, args) -> None:
    from .stream import write_session_file

    n = write_session_file(load_artifact(args.artifact), args.out, cfg.codec)
    print(f"wrote {n} bytes to {args.out}")


def cmd_decode(cfg: RunConfig, args) -> None:
    from .stream import read_session_file

    art = read_session_file(args.input)
    save_artifact(art, args.out)
    if args.render:
        _render_artifact(art, Path(args.render), cfg.size)
    print(f"decoded {len(art)} frames to {args.out}")


def cmd_send(cfg: RunConfig, args) -> None:
    from .stream import send_to

    res = send_to(args.to, load_artifact(args.artifact), cfg.fps, cfg.codec)
    print(f"sent {res.frames} frames, {res.bytes_total} bytes, {res.bytes_per_frame:.1f} B/frame, {res.mbps:.6f} Mbps")


def cmd_recv(cfg: RunConfig, args) -> None:
    from .fit2d import render_image_2d
    from .stream import listen, receive_on

    rdir = Path(args.render) if args.render else None
    if rdir:
        rdir.mkdir(parents=True, exist_ok=True)

    def sink(i, net):
        if rdir:
            write_ppm(render_image_2d(net, cfg.size, cfg.size), rdir / f"frame_{i:03d}.ppm")

    srv = listen(args.listen)
    try:
        art, res = receive_on(srv, sink, cfg.fps, timeout=args.timeout)
    finally:
        srv.close()
    save_artifact(art, args.out)
    print(f"received {res.frames} frames, {res.bytes_total} bytes, {res.mbps:.6f} Mbps")


def cmd_bench(cfg: RunConfig, args) -> None:
    rows = []
    if args.paper_config or not args.artifact:
        pc = paper_nerf_config()
        rows.append(("paper", "full", model_bytes(pc), f"{model_bytes(pc) / MIB:.3f}"))
        for k in (3, 6):
            rows.append(("paper", f"structure_k{k}", structure_bytes(pc, k), f"{structure_bytes(pc, k) / MIB:.3f}"))
            rows.append(("paper", f"color_k{k}", color_bytes(pc, k), f"{color_bytes(pc, k) / MIB:.3f}"))
    if args.artifact:
        from .twc import CODEC_NAMES, build_temporal_matrix, compression_report, twc_encode

        art = load_artifact(args.artifact)
        m = build_temporal_matrix(art.frames)
        for cid, name in sorted(CODEC_NAMES.items()):
            rep = compression_report(art, twc_encode(m, cid), cfg.fps)
            rows.append(("twc", f"{name}_bytes", rep.compressed_bytes, f"{rep.compressed_bytes / MIB:.3f}"))
            rows.append(("twc", f"{name}_ratio", f"{rep.ratio:.3f}", ""))
            rows.append(("twc", f"{name}_mbps@{cfg.fps:g}", f"{rep.mbps:.6f}", ""))
    text = "\t".join(["group", "item", "bytes_or_value", "MiB"]) + "\n"
    text += "".join("\t".join(str(c) for c in r) + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_report(cfg: RunConfig, args) -> None:
    ref = Path(args.reference)
    rows = []
    for f in sorted(Path(args.renders).glob("*.ppm")):
        other = ref / f.name
        if other.exists():
            rows.append((f.name, f"{psnr(read_ppm(f), read_ppm(other)):.4f}"))
    if not rows:
        raise UsageError("no matching .ppm names between the two directories")
    mean = float(np.mean([float(r[1]) for r in rows]))
    rows.append(("mean", f"{mean:.4f}"))
    text = "image\tpsnr_db\n" + "".join(f"{a}\t{b}\n" for a, b in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, help=f.metadata.get("help"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inv", description="Incremental neural video experiments and streaming.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a toy 2D video or 3D scene sequence")
    p.add_argument("--out", required=True)
    p = add("train", cmd_train, "incremental transfer or two-stage training")
    p.add_argument("--mode", choices=["it", "inv"], default="inv")
    p.add_argument("--video", help="directory of .ppm frames instead of a synthetic video")
    p.add_argument("--out", required=True)
    p.add_argument("--timings", action="store_true", help="write measured seconds into metrics.tsv")
    p = add("swap", cmd_swap, "structure swap between adjacent incremental frames")
    p.add_argument("--ks", default="1,2,3")
    p.add_argument("--out", required=True)
    p = add("transfer", cmd_transfer, "color scheme transfer snapshots")
    p.add_argument("--fit-iters", type=int, default=2000)
    p.add_argument("--every", type=int, default=100)
    p.add_argument("--all-layers", action="store_true", help="control arm: every layer trainable")
    p.add_argument("--out", required=True)
    p = add("encode", cmd_encode, "artifact file to .invs session")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p = add("decode", cmd_decode, ".invs session to artifact file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render", help="directory for per-frame renders")
    p = add("send", cmd_send, "stream an artifact to host:port")
    p.add_argument("--artifact", required=True)
    p.add_argument("--to", required=True)
    p = add("recv", cmd_recv, "receive one session on host:port")
    p.add_argument("--listen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render")
    p.add_argument("--timeout", type=float, default=60.0)
    p = add("bench", cmd_bench, "sizes, compression ratios and bitrates")
    p.add_argument("--paper-config", action="store_true")
    p.add_argument("--artifact")
    p.add_argument("--out")
    p = add("report", cmd_report, "PSNR table between two directories of renders")
    p.add_argument("--renders", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out")
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    try:
        cfg = resolve_config(args)
        args.func(cfg, args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InvError, OSError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
