"""Forward computation: backbone, feature pyramid, stacked hourglasses,
pose-feature aggregation, and the shared prediction towers.

The detector follows the anchor-free multi-level layout: C3..C5 backbone
features feed a P3..P7 pyramid; every level runs through shared towers
emitting per-location class logits, four side distances (decoded through
exp(s_i * x) with one trainable s_i per level), and a center-ness logit.
With hourglass_count >= 1, stacked hourglass stages after C3 predict
K-channel keypoint heatmaps and pose feature maps; the concatenated pose
features are aligned by a 1x1 convolution, resampled per level, and added
to the pyramid map before the classification tower only.
"""

from __future__ import annotations

import io as _io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigMismatch, IndivisibleInput
from .fileio import atomic_write_bytes

SUPPORTED_VARIANTS = ("resnet50", "resnet101", "tiny")
SUPPORTED_STAGE_COUNTS = (0, 1, 2, 4)
NUM_LEVELS = 5
# Bias of the classification head: start predictions near this foreground
# prior so the focal loss is not swamped by background early in training.
CLS_PRIOR = 0.01
# Cap on s_i * x before exp so decoded distances stay finite in float32.
MAX_REG_EXPONENT = 20.0


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture knobs. ``tiny`` is a desk-scale variant for CPU tests."""

    variant: str = "resnet50"
    num_classes: int = 3
    num_keypoints: int = 17
    hourglass_count: int = 4
    pyramid_channels: int = 256
    hourglass_channels: int = 256
    hourglass_depth: int = 4
    tower_convs: int = 4

    def __post_init__(self):
        if self.variant not in SUPPORTED_VARIANTS:
            raise ConfigMismatch(f"unknown backbone variant {self.variant!r}")
        if self.hourglass_count not in SUPPORTED_STAGE_COUNTS:
            raise ConfigMismatch(
                f"hourglass_count must be one of {SUPPORTED_STAGE_COUNTS}, got {self.hourglass_count}"
            )

    @classmethod
    def for_variant(cls, variant: str, hourglass_count: int = 4,
                    num_keypoints: int = 17, num_classes: int = 3) -> "BackboneConfig":
        if variant == "tiny":
            # Light enough to train on a laptop CPU.
            return cls(variant=variant, num_classes=num_classes, num_keypoints=num_keypoints,
                       hourglass_count=hourglass_count, pyramid_channels=64,
                       hourglass_channels=64, hourglass_depth=2)
        return cls(variant=variant, num_classes=num_classes, num_keypoints=num_keypoints,
                   hourglass_count=hourglass_count)


@dataclass
class NetworkOutputs:
    """Raw per-level and per-stage prediction maps for one batch.

    cls_logits / ctr_logits / reg_raw / reg_dist are indexed P3..P7;
    reg_dist = exp(s_i * reg_raw) is strictly positive. kpt_heatmaps and
    pose_features hold one entry per hourglass stage (empty when T=0),
    all at C3 resolution.
    """

    cls_logits: list[torch.Tensor]
    reg_raw: list[torch.Tensor]
    reg_dist: list[torch.Tensor]
    ctr_logits: list[torch.Tensor]
    kpt_heatmaps: list[torch.Tensor] = field(default_factory=list)
    pose_features: list[torch.Tensor] = field(default_factory=list)


def _gn(channels: int) -> nn.GroupNorm:
    for groups in (32, 8, 1):
        if channels % groups == 0 and channels >= groups:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    """Pre-activation bottleneck with GroupNorm; optional stride on the 3x3."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        mid = max(out_ch // 2, 8)
        self.gn1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, mid, 1)
        self.gn2 = _gn(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1)
        self.gn3 = _gn(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1)
        if in_ch != out_ch or stride != 1:
            self.skip = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.skip = None

    def forward(self, x):
        out = self.conv1(F.relu(self.gn1(x)))
        out = self.conv2(F.relu(self.gn2(out)))
        out = self.conv3(F.relu(self.gn3(out)))
        return out + (x if self.skip is None else self.skip(x))


class TinyBackbone(nn.Module):
    """Stem plus four stride-2 residual stages (widths 16/32/64/128)."""

    out_channels = (32, 64, 128)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 16, 3, stride=2, padding=1), _gn(16), nn.ReLU())
        self.stage1 = ResidualBlock(16, 16, stride=2)
        self.stage2 = ResidualBlock(16, 32, stride=2)
        self.stage3 = ResidualBlock(32, 64, stride=2)
        self.stage4 = ResidualBlock(64, 128, stride=2)

    def forward(self, x):
        c1 = self.stem(x)
        c2 = self.stage1(c1)
        c3 = self.stage2(c2)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return c3, c4, c5


class ResNetBackbone(nn.Module):
    """torchvision ResNet-50/101 exposing the stride-8/16/32 stages."""

    def __init__(self, variant: str):
        super().__init__()
        import torchvision.models as tvm

        resnet = {"resnet50": tvm.resnet50, "resnet101": tvm.resnet101}[variant](weights=None)
        self.stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool)
        self.layer1 = resnet.layer1
        self.layer2 = resnet.layer2
        self.layer3 = resnet.layer3
        self.layer4 = resnet.layer4
        self.out_channels = (512, 1024, 2048)

    def forward(self, x):
        c2 = self.layer1(self.stem(x))
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c3, c4, c5


class FeaturePyramid(nn.Module):
    """Top-down pyramid P3..P7 over C3..C5; P6/P7 by stride-2 convolutions."""

    def __init__(self, in_channels: tuple[int, int, int], channels: int):
        super().__init__()
        c3, c4, c5 = in_channels
        self.lat3 = nn.Conv2d(c3, channels, 1)
        self.lat4 = nn.Conv2d(c4, channels, 1)
        self.lat5 = nn.Conv2d(c5, channels, 1)
        self.out3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.out4 = nn.Conv2d(channels, channels, 3, padding=1)
        self.out5 = nn.Conv2d(channels, channels, 3, padding=1)
        self.p6_conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.p7_conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, c3, c4, c5):
        m5 = self.lat5(c5)
        m4 = self.lat4(c4) + F.interpolate(m5, size=c4.shape[-2:], mode="nearest")
        m3 = self.lat3(c3) + F.interpolate(m4, size=c3.shape[-2:], mode="nearest")
        p3, p4, p5 = self.out3(m3), self.out4(m4), self.out5(m5)
        p6 = self.p6_conv(p5)
        p7 = self.p7_conv(F.relu(p6))
        return [p3, p4, p5, p6, p7]


class Hourglass(nn.Module):
    """Symmetric encoder-decoder of residual blocks with a skip at each depth."""

    def __init__(self, depth: int, channels: int):
        super().__init__()
        self.up1 = ResidualBlock(channels, channels)
        self.low1 = ResidualBlock(channels, channels)
        self.low2 = Hourglass(depth - 1, channels) if depth > 1 else ResidualBlock(channels, channels)
        self.low3 = ResidualBlock(channels, channels)

    def forward(self, x):
        up = self.up1(x)
        low = F.max_pool2d(x, 2)
        low = self.low3(self.low2(self.low1(low)))
        return up + F.interpolate(low, scale_factor=2, mode="nearest")


class PoseBranch(nn.Module):
    """T hourglass stages after C3, each emitting a K-channel heatmap and a
    pose feature map; heatmap and features are merged back between stages so
    every stage is supervised against the same ground truth."""

    def __init__(self, in_channels: int, channels: int, depth: int,
                 num_stages: int, num_keypoints: int):
        super().__init__()
        self.num_stages = num_stages
        self.entry = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1), _gn(channels), nn.ReLU(),
            ResidualBlock(channels, channels),
        )
        self.hourglasses = nn.ModuleList(Hourglass(depth, channels) for _ in range(num_stages))
        self.feature_blocks = nn.ModuleList(
            nn.Sequential(ResidualBlock(channels, channels),
                          nn.Conv2d(channels, channels, 1), _gn(channels), nn.ReLU())
            for _ in range(num_stages)
        )
        self.heatmap_heads = nn.ModuleList(
            nn.Conv2d(channels, num_keypoints, 1) for _ in range(num_stages)
        )
        self.merge_features = nn.ModuleList(
            nn.Conv2d(channels, channels, 1) for _ in range(num_stages - 1)
        )
        self.merge_heatmaps = nn.ModuleList(
            nn.Conv2d(num_keypoints, channels, 1) for _ in range(num_stages - 1)
        )

    def forward(self, c3):
        x = self.entry(c3)
        heatmaps, features = [], []
        for t in range(self.num_stages):
            hg = self.hourglasses[t](x)
            feat = self.feature_blocks[t](hg)
            hm = self.heatmap_heads[t](feat)
            heatmaps.append(hm)
            features.append(feat)
            if t < self.num_stages - 1:
                x = x + self.merge_features[t](feat) + self.merge_heatmaps[t](hm)
        return heatmaps, features


def resample_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resample a map to (H, W): stride pooling down, bilinear up."""
    h, w = x.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    if h >= th and w >= tw and h % th == 0 and w % tw == 0 and h // th == w // tw:
        k = h // th
        return F.max_pool2d(x, kernel_size=k, stride=k)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class PoseAggregator(nn.Module):
    """Concatenate the stage features, align to the pyramid width with a
    zero-initialized 1x1 convolution (training starts from the bare
    detector), then resample per level."""

    def __init__(self, num_stages: int, feature_channels: int, out_channels: int):
        super().__init__()
        self.align = nn.Conv2d(num_stages * feature_channels, out_channels, 1)
        nn.init.zeros_(self.align.weight)
        nn.init.zeros_(self.align.bias)

    def forward(self, pose_features: list[torch.Tensor]) -> torch.Tensor:
        return self.align(torch.cat(pose_features, dim=1))


class PredictionHeads(nn.Module):
    """Shared towers: a classification stack and one regression/center-ness
    trunk with two projections, plus one trainable scalar per level."""

    def __init__(self, channels: int, num_classes: int, num_convs: int = 4,
                 num_levels: int = NUM_LEVELS):
        super().__init__()

        def tower():
            layers = []
            for _ in range(num_convs):
                layers += [nn.Conv2d(channels, channels, 3, padding=1), _gn(channels), nn.ReLU()]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.reg_tower = tower()
        self.cls_out = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.reg_out = nn.Conv2d(channels, 4, 3, padding=1)
        self.ctr_out = nn.Conv2d(channels, 1, 3, padding=1)
        self.scales = nn.Parameter(torch.ones(num_levels))

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_out.bias, -float(torch.log(torch.tensor((1 - CLS_PRIOR) / CLS_PRIOR))))

    def forward_level(self, cls_input, reg_input, level_index):
        cls_logits = self.cls_out(self.cls_tower(cls_input))
        trunk = self.reg_tower(reg_input)
        reg_raw = self.reg_out(trunk)
        ctr_logits = self.ctr_out(trunk)
        reg_dist = torch.exp(torch.clamp(self.scales[level_index] * reg_raw, max=MAX_REG_EXPONENT))
        return cls_logits, reg_raw, reg_dist, ctr_logits


class PoseDet(nn.Module):
    """The full detector; see the module docstring for the data flow."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.variant == "tiny":
            self.backbone = TinyBackbone()
        else:
            self.backbone = ResNetBackbone(config.variant)
        self.fpn = FeaturePyramid(self.backbone.out_channels, config.pyramid_channels)
        self.heads = PredictionHeads(config.pyramid_channels, config.num_classes,
                                     config.tower_convs)
        if config.hourglass_count > 0:
            self.pose_branch = PoseBranch(
                self.backbone.out_channels[0], config.hourglass_channels,
                config.hourglass_depth, config.hourglass_count, config.num_keypoints,
            )
            self.pose_aggregator = PoseAggregator(
                config.hourglass_count, config.hourglass_channels, config.pyramid_channels
            )
        else:
            self.pose_branch = None
            self.pose_aggregator = None

    def forward(self, pixels: torch.Tensor) -> NetworkOutputs:
        if pixels.ndim != 4 or pixels.shape[1] != 3:
            raise IndivisibleInput(f"expected (B, 3, H, W) input, got {tuple(pixels.shape)}")
        h, w = pixels.shape[-2:]
        if h % 128 or w % 128:
            raise IndivisibleInput(f"input size {w}x{h} not divisible by 128")

        c3, c4, c5 = self.backbone(pixels)
        pyramid = self.fpn(c3, c4, c5)

        if self.pose_branch is not None:
            kpt_heatmaps, pose_features = self.pose_branch(c3)
            aligned = self.pose_aggregator(pose_features)
        else:
            kpt_heatmaps, pose_features = [], []
            aligned = None

        outputs = NetworkOutputs([], [], [], [], kpt_heatmaps, pose_features)
        for i, p in enumerate(pyramid):
            cls_input = p if aligned is None else p + resample_to(aligned, p.shape[-2:])
            cls_logits, reg_raw, reg_dist, ctr_logits = self.heads.forward_level(cls_input, p, i)
            outputs.cls_logits.append(cls_logits)
            outputs.reg_raw.append(reg_raw)
            outputs.reg_dist.append(reg_dist)
            outputs.ctr_logits.append(ctr_logits)
        return outputs

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def normalize_pixels(pixels, mean, std) -> torch.Tensor:
    """uint8 (B, H, W, 3) or (H, W, 3) array -> normalized (B, 3, H, W) tensor."""
    import numpy as np

    arr = np.asarray(pixels, dtype=np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: PoseDet,
                    norm_mean, norm_std, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint: config, named parameters,
    normalization stats, format version, plus optional trainer state."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "norm_mean": [float(v) for v in norm_mean],
        "norm_std": [float(v) for v in norm_std],
    }
    if extra:
        payload["extra"] = extra
    buf = _io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | Path, expected: BackboneConfig | None = None):
    """Load a checkpoint; returns (model, payload dict).

    Raises ConfigMismatch when the stored parameters disagree with the stored
    config, or with ``expected`` if given.
    """
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ConfigMismatch(f"{path}: cannot read checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigMismatch(f"{path}: unsupported checkpoint format")
    config = BackboneConfig(**payload["config"])
    if expected is not None and expected != config:
        raise ConfigMismatch(f"{path}: checkpoint config {config} != expected {expected}")
    model = PoseDet(config)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise ConfigMismatch(f"{path}: parameters disagree with config: {exc}") from exc
    return model, payload
