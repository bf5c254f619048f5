"""U-Net meta-model: softmax probability map -> per-pixel soft-label certainty."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import check_state_dict, load_checkpoint, save_checkpoint
from .core_types import NUM_CLASSES
from .segnet import BN_EPS, BN_MOMENTUM, DecoderBlock, ShapeError

# keeps float32 tanh output strictly inside (-1, 1)
OUTPUT_LIMIT = 1.0 - 1e-6


@dataclass(frozen=True)
class MetaModelConfig:
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512, 1024)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    in_channels: int = NUM_CLASSES
    input_size: int = 512

    def __post_init__(self):
        if len(self.encoder_channels) != 5:
            raise ValueError("meta-model needs exactly 5 encoder blocks")
        if len(self.decoder_channels) != 4:
            raise ValueError("meta-model needs exactly 4 decoder blocks")
        if self.input_size % 16:
            raise ValueError("input size must be divisible by 16")
        if self.in_channels < 2:
            raise ValueError("need at least 2 input channels")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))

    @classmethod
    def tiny(cls, input_size: int = 64, in_channels: int = NUM_CLASSES) -> "MetaModelConfig":
        return cls((8, 16, 32, 64, 128), (32, 16, 8, 8), in_channels, input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetaModelConfig":
        return cls(tuple(d["encoder_channels"]), tuple(d["decoder_channels"]), d["in_channels"], d["input_size"])


class EncoderBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, pool: bool):
        layers: list[nn.Module] = [nn.MaxPool2d(2)] if pool else []
        for c_in in (in_channels, out_channels):
            layers += [nn.Conv2d(c_in, out_channels, 3, padding=1),
                       nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
                       nn.ReLU(inplace=True)]
        super().__init__(*layers)


class MetaNet(nn.Module):
    def __init__(self, config: MetaModelConfig):
        super().__init__()
        self.config = config
        enc = config.encoder_channels
        ins = (config.in_channels, *enc[:4])
        self.encoder = nn.ModuleList(EncoderBlock(i, o, pool=k > 0) for k, (i, o) in enumerate(zip(ins, enc)))
        dec = config.decoder_channels
        skips = list(reversed(enc[:4]))
        self.decoder = nn.ModuleList(DecoderBlock(i, s, o) for i, s, o in zip((enc[4], *dec[:3]), skips, dec))
        self.head = nn.Conv2d(dec[-1], 1, 1)

    def forward(self, probs):
        """B x C x H x W probabilities -> B x H x W soft labels in (-1, 1)."""
        if probs.dim() != 4 or probs.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected B x {self.config.in_channels} x H x W, got {tuple(probs.shape)}")
        if probs.shape[-1] % 16 or probs.shape[-2] % 16:
            raise ShapeError(f"spatial size {tuple(probs.shape[-2:])} must be divisible by 16")
        if probs.shape[0] == 0:
            return probs.new_zeros((0, *probs.shape[-2:]))
        feats = self.encode(probs)
        x = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:4])):
            x = block(x, skip)
        return OUTPUT_LIMIT * torch.tanh(self.head(x)[:, 0])

    def encode(self, probs):
        """Per-block encoder outputs (exposed for shape checks)."""
        feats, x = [], probs
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        return feats


def build_metanet(config: MetaModelConfig, seed: int = 0) -> MetaNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MetaNet(config)


def meta_forward(model: MetaNet, probs: torch.Tensor) -> torch.Tensor:
    return model(probs)


def uncertainty_map(soft: np.ndarray | torch.Tensor):
    """Soft labels express certainty; their negation is the uncertainty."""
    return -soft


def save_metanet(path, model: MetaNet, metadata: dict | None = None):
    return save_checkpoint(path, "meta", model.config.to_dict(), model.state_dict(), metadata)


def load_metanet(path) -> tuple[MetaNet, dict]:
    header, tensors = load_checkpoint(path, "meta")
    model = MetaNet(MetaModelConfig.from_dict(header["config"]))
    check_state_dict(model.state_dict(), tensors)
    model.load_state_dict(tensors, strict=False)
    model.eval()
    return model, header
