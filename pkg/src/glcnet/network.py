"""Encoder-decoder segmentation network and projection heads.

The architecture contract, not any particular backbone, is what matters
here: the encoder downsamples by a fixed power-of-two stride, the decoder
restores full input resolution over three named refinement stages, and
every trainable parameter belongs to exactly one named group so
checkpoints can be loaded piecewise.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


class NetworkError(ValueError):
    """Raised for shape/configuration mismatches in the model contract."""


@dataclass
class NetworkConfig:
    in_channels: int = 3
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    decoder_widths: tuple[int, int, int] = (256, 128, 64)
    num_classes: int = 4

    def __post_init__(self) -> None:
        if self.in_channels not in (3, 4):
            raise NetworkError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if len(self.decoder_widths) != 3:
            raise NetworkError("decoder has exactly three refinement stages")
        if not self.encoder_widths:
            raise NetworkError("encoder needs at least one stage")

    @property
    def stride(self) -> int:
        return 2 ** len(self.encoder_widths)

    @property
    def encoder_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def decoder_channels(self) -> int:
        return self.decoder_widths[-1]


def desk_network_config(in_channels: int = 3, num_classes: int = 4) -> NetworkConfig:
    """Small test network: 4-block encoder (stride 8, 64 channels out)."""
    return NetworkConfig(
        in_channels=in_channels,
        encoder_widths=(8, 16, 64),
        decoder_widths=(16, 12, 8),
        num_classes=num_classes,
    )


def _conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Stem plus one downsampling block per configured width."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.in_channels = cfg.in_channels
        self.stride = cfg.stride
        self.out_channels = cfg.encoder_channels
        stem_width = max(8, cfg.encoder_widths[0] // 2)
        blocks = [_conv_bn_relu(cfg.in_channels, stem_width)]
        prev = stem_width
        for width in cfg.encoder_widths:
            blocks.append(_conv_bn_relu(prev, width, stride=2))
            prev = width
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise NetworkError(f"expected (N, C, H, W) batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise NetworkError(
                f"encoder expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise NetworkError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by stride {self.stride}"
            )
        return self.blocks(x)


def _upsample_factors(stride: int, stages: int = 3) -> list[int]:
    # distribute the total upsampling across the decoder stages
    factors = [1] * stages
    i = stages - 1
    remaining = stride
    while remaining > 1:
        factors[i] *= 2
        remaining //= 2
        i = (i - 1) % stages
    return factors


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, up_factor: int):
        super().__init__()
        self.up_factor = up_factor
        self.conv = _conv_bn_relu(cin, cout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.up_factor > 1:
            x = nn.functional.interpolate(
                x, scale_factor=self.up_factor, mode="bilinear", align_corners=False
            )
        return self.conv(x)


class Decoder(nn.Module):
    """Three sequential refinement stages restoring full input resolution."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.in_channels = cfg.encoder_channels
        self.out_channels = cfg.decoder_channels
        factors = _upsample_factors(cfg.stride)
        widths = [cfg.encoder_channels, *cfg.decoder_widths]
        self.stages = nn.ModuleList(
            [DecoderStage(widths[i], widths[i + 1], factors[i]) for i in range(3)]
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise NetworkError(
                f"decoder expects (N, {self.in_channels}, h, w), got {tuple(features.shape)}"
            )
        x = features
        for stage in self.stages:
            x = stage(x)
        return x


class SegmentationModel(nn.Module):
    """Encoder + decoder + 1x1 classifier head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.seg_head = nn.Conv2d(cfg.decoder_channels, cfg.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.seg_head(self.decoder(self.encoder(x)))


class ProjectionHead(nn.Module):
    """Two affine layers with a rectifier between; used only in pretraining."""

    def __init__(self, input_dim: int, output_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or input_dim
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.act = nn.ReLU(inplace=True)
        self.fc2 = nn.Linear(hidden_dim, output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise NetworkError(
                f"projection head expects (N, {self.input_dim}), got {tuple(x.shape)}"
            )
        return self.fc2(self.act(self.fc1(x)))


def build_model(cfg: NetworkConfig, seed: int) -> SegmentationModel:
    """Deterministic construction: same config and seed give identical weights."""
    torch.manual_seed(seed)
    return SegmentationModel(cfg)


ALL_GROUPS = ("encoder", "decoder.1", "decoder.2", "decoder.3", "seg_head", "proj_global", "proj_local")


def parameter_groups(
    model: SegmentationModel,
    proj_global: nn.Module | None = None,
    proj_local: nn.Module | None = None,
) -> dict[str, nn.Module]:
    """Named, disjoint, exhaustive parameter groups for checkpointing."""
    groups: dict[str, nn.Module] = {
        "encoder": model.encoder,
        "decoder.1": model.decoder.stages[0],
        "decoder.2": model.decoder.stages[1],
        "decoder.3": model.decoder.stages[2],
        "seg_head": model.seg_head,
    }
    if proj_global is not None:
        groups["proj_global"] = proj_global
    if proj_local is not None:
        groups["proj_local"] = proj_local
    return groups


def group_gradient_max(module: nn.Module) -> float:
    """Largest absolute gradient over a group; parameters without gradients count as 0."""
    value = 0.0
    for p in module.parameters():
        if p.grad is not None:
            value = max(value, float(p.grad.abs().max()))
    return value
