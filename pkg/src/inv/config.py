"""Architecture and optimizer configuration.

A :class:`NetworkConfig` fully determines the layer shapes of a network, so it
doubles as the schema for weight blobs: ``deserialize_weights(blob, config)``
needs nothing else.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from enum import Enum

from .errors import InvalidArgument


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    NONE = "none"


class Heads(str, Enum):
    """Output head layouts.

    ``RGB``: trunk followed by one sigmoid RGB layer (2D fitting).
    ``RGB_SIGMA``: trunk feeds a raw density layer and a sigmoid RGB layer.
    ``RGB_SIGMA_VIEWDEP``: the NeRF layout -- density head, feature layer,
    view branch over (feature ++ encoded view direction), sigmoid RGB head.
    """

    RGB = "rgb"
    RGB_SIGMA = "rgb_sigma"
    RGB_SIGMA_VIEWDEP = "rgb_sigma_viewdep"


@dataclass(frozen=True)
class PosEncodingSpec:
    input_dim: int
    num_freqs: int
    include_input: bool = True

    def __post_init__(self):
        if self.input_dim < 1:
            raise InvalidArgument(f"input_dim must be positive, got {self.input_dim}")
        if self.num_freqs < 0:
            raise InvalidArgument(f"num_freqs must be >= 0, got {self.num_freqs}")

    @property
    def out_dim(self) -> int:
        return self.input_dim * int(self.include_input) + 2 * self.input_dim * self.num_freqs


@dataclass(frozen=True)
class LayerShape:
    in_dim: int
    out_dim: int
    activation: Activation

    @property
    def param_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class NetworkConfig:
    pos_enc: PosEncodingSpec
    hidden_width: int
    num_hidden_layers: int
    heads: Heads = Heads.RGB
    structure_layers: int = 1
    view_enc: PosEncodingSpec | None = None
    view_width: int = 128
    paired_coarse_fine: bool = False

    def __post_init__(self):
        if self.hidden_width < 1 or self.num_hidden_layers < 1:
            raise InvalidArgument("hidden_width and num_hidden_layers must be positive")
        if not 0 < self.structure_layers <= self.num_hidden_layers:
            # structure layers index the trunk only; heads always belong to the color block
            raise InvalidArgument(
                f"structure_layers must be in [1, {self.num_hidden_layers}], "
                f"got {self.structure_layers}"
            )
        if (self.heads is Heads.RGB_SIGMA_VIEWDEP) != (self.view_enc is not None):
            raise InvalidArgument("view_enc is required exactly when heads is rgb_sigma_viewdep")

    @property
    def view_dim(self) -> int:
        return self.view_enc.out_dim if self.view_enc is not None else 0

    @property
    def input_dim(self) -> int:
        return self.pos_enc.out_dim + self.view_dim

    @property
    def output_dim(self) -> int:
        return 3 if self.heads is Heads.RGB else 4

    def layer_shapes(self) -> list[LayerShape]:
        w = self.hidden_width
        shapes = [LayerShape(self.pos_enc.out_dim, w, Activation.RELU)]
        shapes += [LayerShape(w, w, Activation.RELU) for _ in range(self.num_hidden_layers - 1)]
        if self.heads is Heads.RGB:
            shapes.append(LayerShape(w, 3, Activation.SIGMOID))
        elif self.heads is Heads.RGB_SIGMA:
            shapes.append(LayerShape(w, 1, Activation.NONE))
            shapes.append(LayerShape(w, 3, Activation.SIGMOID))
        else:
            shapes.append(LayerShape(w, 1, Activation.NONE))
            shapes.append(LayerShape(w, w, Activation.NONE))
            shapes.append(LayerShape(w + self.view_dim, self.view_width, Activation.RELU))
            shapes.append(LayerShape(self.view_width, 3, Activation.SIGMOID))
        return shapes

    @property
    def num_layers(self) -> int:
        return len(self.layer_shapes())

    @property
    def num_networks(self) -> int:
        return 2 if self.paired_coarse_fine else 1

    def param_count(self, first: int | None = None) -> int:
        """Parameters of one network, or of its first ``first`` layers."""
        shapes = self.layer_shapes()
        if first is not None:
            shapes = shapes[:first]
        return sum(s.param_count for s in shapes)

    def with_k(self, k: int) -> NetworkConfig:
        return replace(self, structure_layers=k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = self.heads.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["pos_enc"] = PosEncodingSpec(**d["pos_enc"])
        if d.get("view_enc") is not None:
            d["view_enc"] = PosEncodingSpec(**d["view_enc"])
        d["heads"] = Heads(d["heads"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> NetworkConfig:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1024
    seed: int = 0
    # keep Adam moments across frames instead of restarting them every frame
    carry_optimizer: bool = False
    # if set, lr decays exponentially to this value over each frame's iterations
    lr_final: float | None = None

    def lr_at(self, it: int, iters: int) -> float:
        if self.lr_final is None or iters <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (it / (iters - 1))


def paper_nerf_config(k: int = 3) -> NetworkConfig:
    """The 12-layer NeRF without skip connections, as a coarse+fine pair."""
    return NetworkConfig(
        pos_enc=PosEncodingSpec(3, 10, True),
        view_enc=PosEncodingSpec(3, 4, True),
        hidden_width=256,
        num_hidden_layers=8,
        heads=Heads.RGB_SIGMA_VIEWDEP,
        structure_layers=k,
        view_width=128,
        paired_coarse_fine=True,
    )


def toy_2d_config(k: int = 1) -> NetworkConfig:
    return NetworkConfig(
        pos_enc=PosEncodingSpec(2, 8, True),
        hidden_width=64,
        num_hidden_layers=4,
        heads=Heads.RGB,
        structure_layers=k,
    )


def toy_3d_config(k: int = 3) -> NetworkConfig:
    return NetworkConfig(
        pos_enc=PosEncodingSpec(3, 6, True),
        hidden_width=64,
        num_hidden_layers=8,
        heads=Heads.RGB_SIGMA,
        structure_layers=k,
    )


def toy_2d_hyper(seed: int = 0) -> TrainHyper:
    """Optimizer settings the 2D toy experiments are calibrated with."""
    return TrainHyper(lr=3e-3, seed=seed, carry_optimizer=True)


def toy_3d_hyper(seed: int = 0) -> TrainHyper:
    """Optimizer settings the 3D toy experiments are calibrated with."""
    return TrainHyper(lr=3e-3, seed=seed, carry_optimizer=True)


PRESETS = {
    "paper": paper_nerf_config,
    "toy2d": toy_2d_config,
    "toy3d": toy_3d_config,
}
