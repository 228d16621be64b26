"""Structure/Color layer partitioning and the per-frame video artifact.

A trained network is cut after its first ``k`` trunk layers. The prefix (the
*structure block*) changes every frame; the suffix (the *color block*, which
always includes every head layer) is captured once and shared.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import Heads, LayerShape, NetworkConfig
from .errors import CorruptData, InvalidArgument
from .nn import DenseLayer, MlpNetwork, deserialize_layers, serialize_layers

MIB = 2**20


@dataclass
class StructureBlock:
    frame_index: int
    layers: list[DenseLayer]

    def tobytes(self) -> bytes:
        return serialize_layers(self.layers)

    @property
    def shapes(self) -> list[LayerShape]:
        return [l.shape for l in self.layers]

    def same_bits(self, other: StructureBlock) -> bool:
        return (
            self.frame_index == other.frame_index
            and len(self.layers) == len(other.layers)
            and all(a.same_bits(b) for a, b in zip(self.layers, other.layers))
        )


@dataclass
class ColorBlock:
    layers: list[DenseLayer]
    # network shell needed to reassemble: (heads, input_dim, view_dim)
    heads: Heads = Heads.RGB
    input_dim: int = 0
    view_dim: int = 0

    def tobytes(self) -> bytes:
        return serialize_layers(self.layers)

    def same_bits(self, other: ColorBlock) -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.same_bits(b) for a, b in zip(self.layers, other.layers)
        )


def split_model(net: MlpNetwork, k: int, frame_index: int = 0) -> tuple[StructureBlock, ColorBlock]:
    if not 0 < k < net.num_layers:
        raise InvalidArgument(f"k must be in [1, {net.num_layers - 1}], got {k}")
    if k > len(net.trunk):
        raise InvalidArgument(f"k={k} would cut into the output heads (trunk has {len(net.trunk)} layers)")
    sb = StructureBlock(frame_index, [l.copy() for l in net.layers[:k]])
    cb = ColorBlock([l.copy() for l in net.layers[k:]], net.heads, net.input_dim, net.view_dim)
    return sb, cb


def assemble_model(sb: StructureBlock, cb: ColorBlock) -> MlpNetwork:
    """Concatenate a frame's structure layers with the shared color layers."""
    if not sb.layers or not cb.layers:
        raise InvalidArgument("cannot assemble from an empty block")
    if sb.layers[-1].out_dim != cb.layers[0].in_dim:
        raise InvalidArgument(
            f"structure block outputs {sb.layers[-1].out_dim} features, "
            f"color block expects {cb.layers[0].in_dim}"
        )
    input_dim = cb.input_dim or sb.layers[0].in_dim + cb.view_dim
    return MlpNetwork([l.copy() for l in sb.layers + cb.layers], input_dim, cb.heads, cb.view_dim)


def structure_swap(net_a: MlpNetwork, net_b: MlpNetwork, k: int) -> MlpNetwork:
    """B's first ``k`` layers on top of A's remaining layers."""
    shapes_a = [l.shape for l in net_a.layers]
    if shapes_a != [l.shape for l in net_b.layers] or net_a.heads != net_b.heads:
        raise InvalidArgument("structure swap needs structurally identical networks")
    if not 0 <= k <= net_a.num_layers:
        raise InvalidArgument(f"k must be in [0, {net_a.num_layers}], got {k}")
    layers = [l.copy() for l in net_b.layers[:k]] + [l.copy() for l in net_a.layers[k:]]
    return MlpNetwork(layers, net_a.input_dim, net_a.heads, net_a.view_dim)


def structure_bytes(config: NetworkConfig, k: int | None = None) -> int:
    """Serialized size of the first ``k`` layers, counting both networks of a coarse/fine pair."""
    k = config.structure_layers if k is None else k
    if not 0 <= k <= config.num_layers:
        raise InvalidArgument(f"k must be in [0, {config.num_layers}], got {k}")
    return 4 * config.param_count(k) * config.num_networks


def model_bytes(config: NetworkConfig) -> int:
    return structure_bytes(config, config.num_layers)


def color_bytes(config: NetworkConfig, k: int | None = None) -> int:
    return model_bytes(config) - structure_bytes(config, k)


def structure_shapes(config: NetworkConfig) -> list[LayerShape]:
    return config.layer_shapes()[: config.structure_layers] * config.num_networks


def color_shapes(config: NetworkConfig) -> list[LayerShape]:
    return config.layer_shapes()[config.structure_layers :] * config.num_networks


# ---------------------------------------------------------------------------
# artifact


@dataclass
class InvArtifact:
    config: NetworkConfig
    shared_color: ColorBlock
    frames: list[StructureBlock] = field(default_factory=list)
    warmup_count: int = 0

    def __post_init__(self):
        expected = structure_shapes(self.config)
        for i, fr in enumerate(self.frames):
            if fr.frame_index != i:
                raise InvalidArgument(f"frame indices must run 0..N-1; position {i} holds {fr.frame_index}")
            if fr.shapes != expected:
                raise InvalidArgument(f"frame {i} does not match the configured structure layers")
        if [l.shape for l in self.shared_color.layers] != color_shapes(self.config):
            raise InvalidArgument("shared color block does not match the configured color layers")
        self.shared_color.heads = self.config.heads
        self.shared_color.input_dim = self.config.input_dim
        self.shared_color.view_dim = self.config.view_dim

    def __len__(self) -> int:
        return len(self.frames)

    def network(self, i: int) -> MlpNetwork:
        """Full model for frame ``i`` (single-network configs)."""
        if self.config.num_networks != 1:
            raise InvalidArgument("paired coarse/fine artifacts are for size accounting only")
        return assemble_model(self.frames[i], self.shared_color)

    def same_bits(self, other: InvArtifact) -> bool:
        return (
            self.config == other.config
            and self.warmup_count == other.warmup_count
            and self.shared_color.same_bits(other.shared_color)
            and len(self.frames) == len(other.frames)
            and all(a.same_bits(b) for a, b in zip(self.frames, other.frames))
        )


def make_blocks(config: NetworkConfig, layers: Sequence[DenseLayer], frame_index: int = 0):
    """Split a flat single-network layer list according to ``config``."""
    k = config.structure_layers
    sb = StructureBlock(frame_index, [l.copy() for l in layers[:k]])
    cb = ColorBlock([l.copy() for l in layers[k:]], config.heads, config.input_dim, config.view_dim)
    return sb, cb


ARTIFACT_MAGIC = b"INVA"
ARTIFACT_VERSION = 1


def artifact_to_bytes(art: InvArtifact) -> bytes:
    """``INVA`` | u16 version | u32 meta length | meta JSON | color blob | frame blobs."""
    meta = json.dumps(
        {"config": art.config.to_dict(), "warmup_count": art.warmup_count, "frames": len(art.frames)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    parts = [ARTIFACT_MAGIC, struct.pack("<HI", ARTIFACT_VERSION, len(meta)), meta, art.shared_color.tobytes()]
    parts += [fr.tobytes() for fr in art.frames]
    return b"".join(parts)


def artifact_from_bytes(data: bytes) -> InvArtifact:
    if data[:4] != ARTIFACT_MAGIC or len(data) < 10:
        raise CorruptData("not an artifact file")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != ARTIFACT_VERSION:
        raise CorruptData(f"unsupported artifact version {version}")
    try:
        meta = json.loads(data[10 : 10 + mlen])
        config = NetworkConfig.from_dict(meta["config"])
        n = int(meta["frames"])
        warmup = int(meta["warmup_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptData(f"bad artifact metadata: {exc}") from exc
    off = 10 + mlen
    cshapes, sshapes = color_shapes(config), structure_shapes(config)
    csize = 4 * sum(s.param_count for s in cshapes)
    ssize = 4 * sum(s.param_count for s in sshapes)
    if len(data) != off + csize + n * ssize:
        raise CorruptData("artifact length does not match its metadata")
    color = ColorBlock(deserialize_layers(data[off : off + csize], cshapes), config.heads, config.input_dim, config.view_dim)
    off += csize
    frames = []
    for i in range(n):
        frames.append(StructureBlock(i, deserialize_layers(data[off : off + ssize], sshapes)))
        off += ssize
    return InvArtifact(config, color, frames, warmup)


def save_artifact(art: InvArtifact, path: str | Path) -> None:
    Path(path).write_bytes(artifact_to_bytes(art))


def load_artifact(path: str | Path) -> InvArtifact:
    return artifact_from_bytes(Path(path).read_bytes())
