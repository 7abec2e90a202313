"""Pluggable frame encoders producing 7x7 spatial feature grids."""

from __future__ import annotations

import numpy as np
from PIL import Image

GRID = 7


class MiniBackbone:
    """Seeded random projection network, for tests and smoke runs.

    Downscales the frame to a 56x56 RGB grid, applies a fixed random 3x3
    convolution, relu, then 8x8 average pooling down to 7x7xchannels.
    Deterministic per seed; no learned weights.
    """

    name = "mini"

    def __init__(self, channels: int = 32, seed: int = 0):
        self.channels = channels
        rng = np.random.default_rng(seed)
        self.kernel = rng.standard_normal((3, 3, 3, channels)).astype(np.float32) * 0.1

    def encode(self, image: Image.Image) -> np.ndarray:
        small = image.convert("RGB").resize((56, 56), Image.BILINEAR)
        x = np.asarray(small, dtype=np.float32) / 255.0
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        out = np.zeros((56, 56, self.channels), dtype=np.float32)
        for dy in range(3):
            for dx in range(3):
                patch = xp[dy : dy + 56, dx : dx + 56, :]
                out += patch @ self.kernel[dy, dx]
        out = np.maximum(out, 0.0)
        pooled = out.reshape(GRID, 8, GRID, 8, self.channels).mean(axis=(1, 3))
        return pooled.astype(np.float32)


class ResNet50Backbone:
    """Penultimate-stage (7x7x2048) feature maps from torchvision ResNet-50."""

    name = "resnet50"

    def __init__(self, pretrained: bool = True):
        import torch
        from torchvision import models, transforms

        self._torch = torch
        weights = models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
        net = models.resnet50(weights=weights)
        net.eval()
        # everything up to and including the final residual stage
        self._stem = torch.nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        self.channels = 2048
        self._prep = transforms.Compose(
            [
                transforms.Resize(256),
                transforms.CenterCrop(224),
                transforms.ToTensor(),
                transforms.Normalize(
                    mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
                ),
            ]
        )

    def encode(self, image: Image.Image) -> np.ndarray:
        x = self._prep(image.convert("RGB")).unsqueeze(0)
        with self._torch.no_grad():
            feats = self._stem(x)[0]  # (2048, 7, 7)
        return feats.permute(1, 2, 0).numpy().astype(np.float32)


def make_backbone(name: str, seed: int = 0):
    if name == "mini":
        return MiniBackbone(seed=seed)
    if name == "resnet50":
        return ResNet50Backbone(pretrained=True)
    if name == "resnet50-untrained":
        return ResNet50Backbone(pretrained=False)
    raise ValueError(f"unknown backbone {name!r}")
