"""Segmentation network: residual encoder, five-block transposed-convolution decoder."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock, Bottleneck

from .checkpoint import CheckpointError, check_state_dict, load_checkpoint, save_checkpoint
from .core_types import NUM_CLASSES, ShapeError, argmax_labels
from .dataio import Normalizer

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BackbonePreset:
    block: str  # "basic" | "bottleneck"
    layers: tuple[int, int, int, int]
    stem: int
    widths: tuple[int, int, int, int]  # block width per stage; output = width * expansion

    @property
    def expansion(self) -> int:
        return 4 if self.block == "bottleneck" else 1

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(w * self.expansion for w in self.widths)

    @property
    def skip_channels(self) -> tuple[int, int, int, int]:
        return (self.stem, *self.stage_channels[:3])


BACKBONES = {
    "resnet152": BackbonePreset("bottleneck", (3, 8, 36, 3), 64, (64, 128, 256, 512)),
    "resnet50": BackbonePreset("bottleneck", (3, 4, 6, 3), 64, (64, 128, 256, 512)),
    "tiny": BackbonePreset("basic", (1, 1, 1, 1), 8, (8, 16, 32, 64)),
}


@dataclass(frozen=True)
class SegModelConfig:
    backbone: str = "resnet152"
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    num_classes: int = NUM_CLASSES
    input_size: int = 512

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone preset {self.backbone!r}")
        if len(self.decoder_channels) != 5:
            raise ValueError("decoder must have exactly 5 blocks")
        if self.input_size % 32:
            raise ValueError("input size must be divisible by 32")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))

    @classmethod
    def tiny(cls, input_size: int = 64, num_classes: int = NUM_CLASSES) -> "SegModelConfig":
        return cls("tiny", (64, 32, 16, 8, 8), num_classes, input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegModelConfig":
        return cls(d["backbone"], tuple(d["decoder_channels"]), d["num_classes"], d["input_size"])


def _bn(c: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM)


class ResNetEncoder(nn.Module):
    """ResNet trunk without the classifier; tensor names follow torchvision."""

    def __init__(self, preset: BackbonePreset):
        super().__init__()
        self.preset = preset
        block = Bottleneck if preset.block == "bottleneck" else BasicBlock
        self.conv1 = nn.Conv2d(3, preset.stem, 7, stride=2, padding=3, bias=False)
        self.bn1 = _bn(preset.stem)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.inplanes = preset.stem
        self.layer1 = self._make_layer(block, preset.widths[0], preset.layers[0], 1)
        self.layer2 = self._make_layer(block, preset.widths[1], preset.layers[1], 2)
        self.layer3 = self._make_layer(block, preset.widths[2], preset.layers[2], 2)
        self.layer4 = self._make_layer(block, preset.widths[3], preset.layers[3], 2)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def _make_layer(self, block, planes, blocks, stride):
        downsample = None
        if stride != 1 or self.inplanes != planes * block.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, planes * block.expansion, 1, stride=stride, bias=False),
                _bn(planes * block.expansion),
            )
        layers = [block(self.inplanes, planes, stride, downsample, norm_layer=_bn)]
        self.inplanes = planes * block.expansion
        layers += [block(self.inplanes, planes, norm_layer=_bn) for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x):
        stem = self.relu(self.bn1(self.conv1(x)))  # H/2, skip taken after activation
        s1 = self.layer1(self.maxpool(stem))  # H/4
        s2 = self.layer2(s1)  # H/8
        s3 = self.layer3(s2)  # H/16
        s4 = self.layer4(s3)  # H/32
        return stem, s1, s2, s3, s4


class DecoderBlock(nn.Module):
    """4x4 transposed conv (x2 upsampling) -> BN -> ReLU, then 3x3 conv over [up, skip] -> BN -> ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.skip_channels = skip_channels
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 4, stride=2, padding=1)
        self.up_bn = _bn(out_channels)
        self.conv = nn.Conv2d(out_channels + skip_channels, out_channels, 3, padding=1)
        self.conv_bn = _bn(out_channels)

    def forward(self, x, skip=None):
        x = F.relu(self.up_bn(self.up(x)))
        if skip is not None:
            if skip.shape[-2:] != x.shape[-2:]:
                raise ShapeError(f"skip size {tuple(skip.shape[-2:])} != upsampled size {tuple(x.shape[-2:])}")
            x = torch.cat([x, skip], dim=1)
        elif self.skip_channels:
            raise ShapeError("decoder block expects a skip connection")
        return F.relu(self.conv_bn(self.conv(x)))


def decoder_block(prev: torch.Tensor, skip: torch.Tensor | None, out_channels: int,
                  block: DecoderBlock | None = None) -> torch.Tensor:
    """Functional form; builds a fresh block unless one is supplied."""
    if block is None:
        block = DecoderBlock(prev.shape[1], 0 if skip is None else skip.shape[1], out_channels)
        block = block.to(prev.dtype)
    return block(prev, skip)


class SegNet(nn.Module):
    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        preset = BACKBONES[config.backbone]
        self.encoder = ResNetEncoder(preset)
        dec = config.decoder_channels
        bottleneck = preset.stage_channels[3]
        skips = list(reversed(preset.skip_channels)) + [0]  # D1..D4 use skips, D5 none
        ins = [bottleneck, *dec[:4]]
        self.decoder = nn.ModuleList(DecoderBlock(i, s, o) for i, s, o in zip(ins, skips, dec))
        self.head = nn.Conv2d(dec[-1], config.num_classes, 1)
        norm = Normalizer()
        self.register_buffer("input_mean", torch.tensor(norm.mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(norm.std).view(1, 3, 1, 1))

    def set_normalizer(self, norm: Normalizer) -> None:
        with torch.no_grad():
            self.input_mean.copy_(torch.tensor(norm.mean).view(1, 3, 1, 1))
            self.input_std.copy_(torch.tensor(norm.std).view(1, 3, 1, 1))

    def normalizer(self) -> Normalizer:
        return Normalizer(tuple(self.input_mean.flatten().tolist()), tuple(self.input_std.flatten().tolist()))

    def forward(self, x):
        """B x 3 x H x W images in [0, 1] -> B x C x H x W logits."""
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W input, got {tuple(x.shape)}")
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} must be divisible by 32")
        if x.shape[0] == 0:
            return x.new_zeros((0, self.config.num_classes, *x.shape[-2:]))
        x = (x - self.input_mean) / self.input_std
        stem, s1, s2, s3, s4 = self.encoder(x)
        d = s4
        for block, skip in zip(self.decoder, (s3, s2, s1, stem, None)):
            d = block(d, skip)
        return self.head(d)


def load_backbone_weights(model: SegNet, weights: dict[str, torch.Tensor]) -> None:
    """Load a ResNet state dict (torchvision naming, classifier ignored) into the encoder."""
    weights = {k.removeprefix("encoder."): v for k, v in weights.items()}
    expected = model.encoder.state_dict()
    check_state_dict(expected, weights, ignore_prefixes=("fc.",))
    model.encoder.load_state_dict({k: v for k, v in weights.items() if k in expected}, strict=False)


def build_segnet(config: SegModelConfig, init: int | dict | str | os.PathLike = 0) -> SegNet:
    """Build a model from a seed, a backbone state dict, or a backbone checkpoint path."""
    seed = init if isinstance(init, int) else 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegNet(config)
    if isinstance(init, dict):
        load_backbone_weights(model, init)
    elif isinstance(init, (str, os.PathLike)):
        load_backbone_weights(model, read_backbone_file(init))
    return model


def read_backbone_file(path) -> dict[str, torch.Tensor]:
    """Backbone weights from our checkpoint container or a plain torch state dict."""
    try:
        header, tensors = load_checkpoint(path)
        return tensors
    except CheckpointError:
        pass
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable backbone weights {path}: {e}") from e
    if not isinstance(obj, dict):
        raise CheckpointError(f"{path} does not contain a state dict")
    return obj


def seg_forward(model: SegNet, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)


@torch.no_grad()
def predict_probs(model: SegNet, images: torch.Tensor) -> torch.Tensor:
    """B x 3 x H x W -> B x C x H x W softmax probabilities, evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        return torch.softmax(model(images), dim=1)
    finally:
        model.train(was_training)


def predict(model: SegNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """H x W x 3 image in [0, 1] -> (H x W x C probabilities, H x W labels)."""
    param = next(model.parameters())
    x = torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].to(param.dtype)
    probs = predict_probs(model, x)[0].permute(1, 2, 0).cpu().numpy()
    return probs, argmax_labels(probs)


def save_segnet(path, model: SegNet, metadata: dict | None = None):
    return save_checkpoint(path, "segmentation", model.config.to_dict(), model.state_dict(), metadata)


def load_segnet(path) -> tuple[SegNet, dict]:
    header, tensors = load_checkpoint(path, "segmentation")
    model = SegNet(SegModelConfig.from_dict(header["config"]))
    check_state_dict(model.state_dict(), tensors)
    model.load_state_dict(tensors, strict=False)
    model.eval()
    return model, header
