"""Backbone plus twin convolutional heads.

The backbone turns a single-channel image into a feature map one cell per
feature grid; the classification head emits a (background, lesion) sigmoid pair
per gravity point and the regression head the (o_x, o_y) offset. Head outputs
are flattened to the exact gravity-point ordering of the anchors module:
cell-row-major, then base-configuration index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .anchors import GridConfig, per_grid_count
from .errors import ConfigMismatchError, InvalidInputError, InvalidInputShapeError

TINY_DESK_WIDTHS = (8, 16, 32, 64, 64)

BACKBONE_KINDS = (
    "tiny-desk",
    "residual-18",
    "residual-34",
    "residual-50",
    "residual-101",
    "residual-152",
)


@dataclass(frozen=True)
class ModelConfig:
    anchors_per_position: int
    backbone_kind: str = "tiny-desk"
    downsample_factor: int = 32
    head_channels: int = 256
    head_depth: int = 4
    pretrained: bool = False

    def __post_init__(self):
        if self.backbone_kind not in BACKBONE_KINDS:
            raise InvalidInputError(f"unknown backbone kind {self.backbone_kind!r}")
        if self.anchors_per_position < 1:
            raise InvalidInputError("anchors_per_position must be >= 1")
        if self.head_channels < 1 or self.head_depth < 1:
            raise InvalidInputError("head_channels and head_depth must be >= 1")


class TinyDeskBackbone(nn.Module):
    """Five stages of conv/relu/maxpool. Small enough to train on a CPU in
    minutes while keeping the same 32x downsampling as the residual backbones."""

    out_channels = TINY_DESK_WIDTHS[-1]
    downsample = 2 ** len(TINY_DESK_WIDTHS)

    def __init__(self):
        super().__init__()
        layers = []
        c_in = 1
        for c_out in TINY_DESK_WIDTHS:
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c_out
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class ResidualBackbone(nn.Module):
    """torchvision residual network trunk adapted to single-channel input by
    replicating the channel; stride-32 feature map from conv1 through layer4."""

    downsample = 32

    def __init__(self, depth: int, pretrained: bool = False):
        super().__init__()
        import torchvision.models as tvm

        ctor = {18: tvm.resnet18, 34: tvm.resnet34, 50: tvm.resnet50,
                101: tvm.resnet101, 152: tvm.resnet152}[depth]
        net = ctor(weights="DEFAULT" if pretrained else None)
        self.trunk = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        self.out_channels = 512 if depth in (18, 34) else 2048

    def forward(self, x):
        return self.trunk(x.expand(-1, 3, -1, -1))


class ConvHead(nn.Module):
    """head_depth 3x3 conv+relu blocks, then a 3x3 conv to 2 outputs per anchor."""

    def __init__(self, in_channels: int, channels: int, depth: int, anchors_per_position: int):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(depth):
            layers += [nn.Conv2d(c, channels, 3, padding=1), nn.ReLU(inplace=True)]
            c = channels
        self.tower = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, anchors_per_position * 2, 3, padding=1)

    def forward(self, x):
        return self.out(self.tower(x))


def _flatten_head(raw: torch.Tensor, n_ap: int) -> torch.Tensor:
    # (B, n_ap*2, h, w) -> (B, h*w*n_ap, 2) in gravity-point order
    b, _, h, w = raw.shape
    return raw.view(b, n_ap, 2, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * n_ap, 2)


class GravityNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone_kind == "tiny-desk":
            self.backbone = TinyDeskBackbone()
        else:
            depth = int(config.backbone_kind.split("-")[1])
            self.backbone = ResidualBackbone(depth, pretrained=config.pretrained)
        if self.backbone.downsample != config.downsample_factor:
            raise ConfigMismatchError(
                f"backbone {config.backbone_kind} downsamples by {self.backbone.downsample}, "
                f"config says {config.downsample_factor}"
            )
        n_ap = config.anchors_per_position
        self.classification_head = ConvHead(
            self.backbone.out_channels, config.head_channels, config.head_depth, n_ap
        )
        self.regression_head = ConvHead(
            self.backbone.out_channels, config.head_channels, config.head_depth, n_ap
        )

    def forward(self, images: torch.Tensor):
        """(B, 1, H, W) in [0, 1] -> class probabilities (B, N_GP, 2) and
        offsets (B, N_GP, 2), N_GP = (H/S)*(W/S)*anchors_per_position."""
        if images.dim() != 4 or images.shape[1] != 1:
            raise InvalidInputShapeError(f"expected (B, 1, H, W) input, got {tuple(images.shape)}")
        s = self.config.downsample_factor
        if images.shape[2] % s or images.shape[3] % s:
            raise InvalidInputShapeError(
                f"image size {tuple(images.shape[2:])} is not divisible by the "
                f"downsample factor {s}"
            )
        features = self.backbone(images)
        n_ap = self.config.anchors_per_position
        class_probs = torch.sigmoid(_flatten_head(self.classification_head(features), n_ap))
        offsets = _flatten_head(self.regression_head(features), n_ap)
        return class_probs, offsets


def build_model(config: ModelConfig) -> GravityNet:
    return GravityNet(config)


def validate_model_grid(config: ModelConfig, grid: GridConfig) -> None:
    """The heads must emit exactly one prediction pair per gravity point."""
    expected = per_grid_count(grid.grid_size, grid.step)
    if config.anchors_per_position != expected:
        raise ConfigMismatchError(
            f"model emits {config.anchors_per_position} anchors per position but the grid "
            f"(K={grid.grid_size}, step={grid.step}) has {expected}"
        )
    s = config.downsample_factor
    if math.ceil(grid.image_height / s) != grid.fm_height or math.ceil(grid.image_width / s) != grid.fm_width:
        raise ConfigMismatchError(
            f"feature map {grid.fm_height}x{grid.fm_width} does not match image "
            f"{grid.image_height}x{grid.image_width} downsampled by {s}"
        )


def init_heads(model: GravityNet, seed: int, lesion_prior: float = 0.01) -> GravityNet:
    """Re-initialize both heads: Xavier weights from the given seed, zero biases.

    The final classification bias starts at the logit of a small lesion prior so
    the dominant negative class does not swamp the first epochs.
    """
    gen = torch.Generator().manual_seed(seed)
    for head in (model.classification_head, model.regression_head):
        for module in head.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.xavier_uniform_(module.weight, generator=gen)
                nn.init.zeros_(module.bias)
    prior_logit = math.log(lesion_prior / (1.0 - lesion_prior))
    bias = model.classification_head.out.bias.detach().view(model.config.anchors_per_position, 2)
    bias[:, 0] = -prior_logit
    bias[:, 1] = prior_logit
    with torch.no_grad():
        model.classification_head.out.bias.copy_(bias.reshape(-1))
    return model


@dataclass(frozen=True)
class Predictions:
    """Per-gravity-point lesion scores and offsets for one image, in grid order."""

    scores: np.ndarray
    offsets: np.ndarray


def predict(model: GravityNet, images) -> list[Predictions]:
    """Inference-mode forward returning one Predictions per image.

    Accepts a (H, W) or (B, H, W) array or a (B, 1, H, W) tensor. The lesion
    score is the second classification channel.
    """
    if isinstance(images, np.ndarray):
        arr = images[None] if images.ndim == 2 else images
        batch = torch.from_numpy(np.ascontiguousarray(arr)).float().unsqueeze(1)
    elif torch.is_tensor(images):
        batch = images if images.dim() == 4 else images.unsqueeze(1)
    else:
        raise InvalidInputError(f"unsupported image input type {type(images)!r}")
    batch = batch.to(next(model.parameters()).device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            class_probs, offsets = model(batch)
    finally:
        model.train(was_training)
    class_probs = class_probs.cpu()
    offsets = offsets.cpu()
    return [
        Predictions(scores=class_probs[i, :, 1].numpy().copy(), offsets=offsets[i].numpy().copy())
        for i in range(batch.shape[0])
    ]
