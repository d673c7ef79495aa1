"""Convolutional backbones shared by the detector and the embedding model."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .geometry import ContractError


@dataclass(frozen=True)
class BackboneConfig:
    """Backbone selection.

    arch "small" is a compact residual net trained from scratch (the desk-scale
    default); "resnet18"/"resnet101" come from torchvision, optionally with
    pretrained classification weights.
    """

    arch: str = "small"
    widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 1
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.arch not in ("small", "resnet18", "resnet101"):
            raise ContractError(f"unknown backbone arch {self.arch!r}")
        if self.arch == "small" and (not self.widths or self.blocks_per_stage < 1):
            raise ContractError("small backbone needs widths and blocks_per_stage >= 1")


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.shortcut(x))


class SmallResNet(nn.Module):
    """Stem plus one strided residual stage per width; global average pooled."""

    def __init__(self, widths: tuple[int, ...], blocks_per_stage: int):
        super().__init__()
        stem = [nn.Conv2d(3, widths[0], 3, 1, 1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()]
        stages: list[nn.Module] = []
        cin = widths[0]
        for w in widths:
            blocks = [ResidualBlock(cin, w, stride=2)]
            blocks += [ResidualBlock(w, w) for _ in range(blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = w
        self.stem = nn.Sequential(*stem)
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.pool(h).flatten(1)

    def stage_modules(self) -> list[nn.Module]:
        return [self.stem, *self.stages]


class TorchvisionBackbone(nn.Module):
    def __init__(self, arch: str, pretrained: bool):
        super().__init__()
        from torchvision import models

        weights = "IMAGENET1K_V1" if pretrained else None
        if arch == "resnet18":
            net = models.resnet18(weights=weights)
        else:
            net = models.resnet101(weights="IMAGENET1K_V2" if pretrained else None)
        self.feature_dim = net.fc.in_features
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def stage_modules(self) -> list[nn.Module]:
        n = self.net
        return [nn.Sequential(n.conv1, n.bn1), n.layer1, n.layer2, n.layer3, n.layer4]


def build_backbone(config: BackboneConfig) -> nn.Module:
    if config.arch == "small":
        return SmallResNet(config.widths, config.blocks_per_stage)
    return TorchvisionBackbone(config.arch, config.pretrained)


def set_trainable_stages(backbone: nn.Module, last_n: int | None) -> None:
    """Freeze all but the last n stages (None trains everything)."""
    stages = backbone.stage_modules()
    if last_n is None or last_n >= len(stages):
        for p in backbone.parameters():
            p.requires_grad_(True)
        return
    for p in backbone.parameters():
        p.requires_grad_(False)
    for stage in stages[len(stages) - last_n :]:
        for p in stage.parameters():
            p.requires_grad_(True)
