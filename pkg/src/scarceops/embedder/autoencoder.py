"""Autoencoder architectures used to fingerprint images.

Two presets exist. ``resnet18_32`` is a CIFAR-style ResNet18 encoder (3x3
stem, no max-pool) whose final layer maps 512 features to the latent code,
followed by a decoder of five stacked transposed convolutions. ``tiny`` is a
small stand-in with the same interface for fast tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from ..tensor import BasicBlock, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, Tensor, make_rng
from ..tensor import functional as F

PRESETS = ("tiny", "resnet18_32")
IMAGE_SHAPE = (3, 32, 32)
FEATURE_DIM = 512


@dataclass
class AutoencoderConfig:
    preset: str = "tiny"
    latent_dim: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    output_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.latent_dim < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("latent_dim, batch_size and epochs must all be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.output_activation != "sigmoid":
            raise ValueError("only the sigmoid output activation is supported")

    def to_dict(self) -> dict:
        return asdict(self)


class TinyTrunk(Module):
    """Three stride-2 convs (8/16/32 channels): 3x32x32 -> 512 features."""

    def __init__(self, rng):
        super().__init__()
        self.convs = [
            Conv2d(rng, 3, 8, 3, stride=2, padding=1),
            Conv2d(rng, 8, 16, 3, stride=2, padding=1),
            Conv2d(rng, 16, 32, 3, stride=2, padding=1),
        ]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.flatten(x)


class ResNet18Trunk(Module):
    """ResNet18 feature extractor for 32x32 inputs: 3x32x32 -> 512 features."""

    stage_channels = (64, 128, 256, 512)

    def __init__(self, rng):
        super().__init__()
        self.stem = Conv2d(rng, 3, 64, 3, stride=1, padding=1, bias=False)
        self.stem_bn = BatchNorm2d(64)
        blocks = []
        in_ch = 64
        for stage, ch in enumerate(self.stage_channels):
            stride = 1 if stage == 0 else 2
            blocks.append(BasicBlock(rng, in_ch, ch, stride))
            blocks.append(BasicBlock(rng, ch, ch, 1))
            in_ch = ch
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            x = block(x)
        return F.global_avg_pool2d(x)


class Encoder(Module):
    def __init__(self, rng, preset: str, latent_dim: int):
        super().__init__()
        self.trunk = TinyTrunk(rng) if preset == "tiny" else ResNet18Trunk(rng)
        self.head = Linear(rng, FEATURE_DIM, latent_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.trunk(x))


class Decoder(Module):
    def __init__(self, rng, preset: str, latent_dim: int):
        super().__init__()
        if preset == "tiny":
            self.seed_shape = (32, 4, 4)
            plan = (32, 16, 8, 3)
        else:
            self.seed_shape = (512, 1, 1)
            plan = (512, 256, 128, 64, 32, 3)
        c, h, w = self.seed_shape
        self.project = Linear(rng, latent_dim, c * h * w)
        self.deconvs = [ConvTranspose2d(rng, a, b, 4, stride=2, padding=1) for a, b in zip(plan, plan[1:])]

    def forward(self, z: Tensor) -> Tensor:
        x = F.reshape(F.relu(self.project(z)), (z.shape[0], *self.seed_shape))
        last = len(self.deconvs) - 1
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            x = F.sigmoid(x) if i == last else F.relu(x)
        return x


class Autoencoder(Module):
    """Encoder ``f`` and decoder ``g`` trained so that ``g(f(x))`` matches ``x``."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        self.config = config
        rng = make_rng(config.seed)
        self.encoder = Encoder(rng, config.preset, config.latent_dim)
        self.decoder = Decoder(rng, config.preset, config.latent_dim)

    def encode(self, x: Tensor) -> Tensor:
        _check_images(x)
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    def transposed_conv_layers(self) -> list[ConvTranspose2d]:
        return [m for m in self.decoder.modules() if isinstance(m, ConvTranspose2d)]


def _check_images(x: Tensor) -> None:
    if x.data.ndim != 4 or tuple(x.shape[1:]) != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape [N, 3, 32, 32], got {list(x.shape)}")


def build(config: Optional[AutoencoderConfig] = None, **overrides) -> Autoencoder:
    if config is None:
        config = AutoencoderConfig(**overrides)
    elif overrides:
        config = AutoencoderConfig(**{**config.to_dict(), **overrides})
    return Autoencoder(config)


class Classifier(Module):
    """Encoder trunk with a class head; outputs per-class scores in (0, 1).

    Trained with MSE against one-hot targets, so it shares the same loss and
    layer set as the autoencoder.
    """

    def __init__(self, preset: str, num_classes: int, seed: int = 0):
        super().__init__()
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.preset = preset
        self.num_classes = num_classes
        rng = make_rng(seed)
        self.trunk = TinyTrunk(rng) if preset == "tiny" else ResNet18Trunk(rng)
        self.head = Linear(rng, FEATURE_DIM, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x)
        return F.sigmoid(self.head(self.trunk(x)))

    def descriptor(self) -> dict:
        return {"kind": "classifier", "preset": self.preset, "num_classes": self.num_classes}
