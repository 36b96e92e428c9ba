"""Hybrid segmentation network: 3D encoder, fusion bridge, 2D decoder.

The encoder keeps the slab depth intact (pooling only in-plane) so
per-slice features survive to the bridge, where one of several fusion
strategies combines them; four 2D decoder blocks with skip connections
label the center slice at full resolution.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from .attention import PartitionSpec, SymmetryEnhancedAttention
from .errors import ConfigError


class FusionMode(str, Enum):
    NONE = "none"
    IMAGE_L1 = "image_l1"
    FEATURE_L1 = "feature_l1"
    FEATURE_CONCAT = "feature_concat"
    SEA = "sea"
    SEA_SELF_ONLY = "sea_self_only"


@dataclass(frozen=True)
class AttentionConfig:
    P: int = 2
    Q: int = 2
    d_ratio: float = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    base_width: int = 16
    in_channels: int = 1

    NUM_BLOCKS = 5

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.NUM_BLOCKS)]


def _enc_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
    )


class Encoder3d(nn.Module):
    """Five conv blocks; in-plane max-pooling after the first four.

    Depth is never pooled, so the bridge keeps one feature map per slab
    slice. Skip features are the center-depth slice of each pre-pool block
    output.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widths = cfg.widths()
        chans = [cfg.in_channels] + widths
        self.blocks = nn.ModuleList(_enc_block(chans[i], chans[i + 1]) for i in range(cfg.NUM_BLOCKS))
        self.pool = nn.MaxPool3d(kernel_size=(1, 2, 2), stride=(1, 2, 2))

    def forward(self, x: torch.Tensor):
        center = x.shape[2] // 2
        skips = []
        for block in self.blocks[:-1]:
            x = block(x)
            skips.append(x[:, :, center])
            x = self.pool(x)
        return self.blocks[-1](x), skips


class DecoderBlock2d(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.convs = nn.Sequential(
            nn.Conv2d(in_ch + skip_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.convs(torch.cat([self.up(x), skip], dim=1))


class HybridUnet(nn.Module):
    """Slab in, center-slice logit map out."""

    def __init__(self, base_width: int = 16, temporal_radius: int = 1,
                 fusion: FusionMode | str = FusionMode.NONE,
                 attention: AttentionConfig = AttentionConfig()):
        super().__init__()
        self.fusion = FusionMode(fusion)
        self.temporal_radius = temporal_radius
        self.base_width = base_width
        self.attention_config = attention

        in_ch = 2 if self.fusion is FusionMode.IMAGE_L1 else 1
        enc_cfg = EncoderConfig(base_width=base_width, in_channels=in_ch)
        self.encoder = Encoder3d(enc_cfg)
        widths = enc_cfg.widths()
        bridge_ch = widths[-1]

        if self.fusion in (FusionMode.FEATURE_L1, FusionMode.FEATURE_CONCAT):
            self.fuse_conv = nn.Conv2d(2 * bridge_ch, bridge_ch, kernel_size=1)
        elif self.fusion in (FusionMode.SEA, FusionMode.SEA_SELF_ONLY):
            d = max(1, int(round(bridge_ch * attention.d_ratio)))
            self.attention = SymmetryEnhancedAttention(
                bridge_ch,
                spec=PartitionSpec(attention.P, attention.Q),
                temporal_radius=temporal_radius,
                d=d,
                use_symmetry=self.fusion is FusionMode.SEA,
            )

        skip_widths = widths[:-1][::-1]  # deepest skip first
        dec_in = bridge_ch
        decoders = []
        for skip_ch in skip_widths:
            decoders.append(DecoderBlock2d(dec_in, skip_ch, skip_ch))
            dec_in = skip_ch
        self.decoder = nn.ModuleList(decoders)
        self.final = nn.Conv2d(widths[0], 1, kernel_size=1)

    def fuse_bridge(self, bridge: torch.Tensor, flipped_bridge: torch.Tensor | None = None) -> torch.Tensor:
        """Collapse the (B, C, D, h, w) bridge to the fused center feature."""
        center = bridge[:, :, self.temporal_radius]
        if self.fusion in (FusionMode.NONE, FusionMode.IMAGE_L1):
            return center
        if self.fusion is FusionMode.FEATURE_L1:
            diff = (center - center.flip(-1)).abs()
            return self.fuse_conv(torch.cat([center, diff], dim=1))
        if self.fusion is FusionMode.FEATURE_CONCAT:
            if flipped_bridge is None:
                raise ConfigError("feature_concat fusion requires the flipped-branch bridge")
            return self.fuse_conv(torch.cat([center, flipped_bridge[:, :, self.temporal_radius]], dim=1))
        return self.attention(bridge)

    def forward(self, slab: torch.Tensor) -> torch.Tensor:
        if slab.dim() == 4:
            slab = slab.unsqueeze(1)
        if slab.dim() != 5 or slab.shape[1] != 1:
            raise ValueError("expected a slab of shape (B, 1, D, H, W) or (B, D, H, W)")
        depth, h, w = slab.shape[2:]
        if depth != 2 * self.temporal_radius + 1:
            raise ConfigError(f"slab depth {depth} != 2T+1 for T={self.temporal_radius}")
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigError(f"slice size {h}x{w} must be divisible by 16")

        x = slab
        if self.fusion is FusionMode.IMAGE_L1:
            x = torch.cat([x, (x - x.flip(-1)).abs()], dim=1)
        bridge, skips = self.encoder(x)
        flipped_bridge = None
        if self.fusion is FusionMode.FEATURE_CONCAT:
            flipped_bridge, _ = self.encoder(x.flip(-1))
        feat = self.fuse_bridge(bridge, flipped_bridge)
        for block, skip in zip(self.decoder, reversed(skips)):
            feat = block(feat, skip)
        return self.final(feat)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def config_dict(self) -> dict:
        return {
            "base_width": self.base_width,
            "T": self.temporal_radius,
            "fusion": self.fusion.value,
            "attention": {
                "P": self.attention_config.P,
                "Q": self.attention_config.Q,
                "d_ratio": self.attention_config.d_ratio,
            },
        }

    @classmethod
    def from_config_dict(cls, cfg: dict) -> "HybridUnet":
        att = cfg.get("attention", {})
        return cls(
            base_width=int(cfg["base_width"]),
            temporal_radius=int(cfg["T"]),
            fusion=FusionMode(cfg["fusion"]),
            attention=AttentionConfig(
                P=int(att.get("P", 2)), Q=int(att.get("Q", 2)), d_ratio=float(att.get("d_ratio", 0.5))
            ),
        )


def model_forward(slab, model: HybridUnet) -> np.ndarray:
    """Logit map (H, W) for one (2T+1, H, W) slab, in eval mode."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        t = torch.as_tensor(np.ascontiguousarray(slab), dtype=torch.float32)
        out = model(t.unsqueeze(0))[0, 0]
    if was_training:
        model.train()
    return out.numpy()


def transplant_shared_weights(src: HybridUnet, dst: HybridUnet) -> list[str]:
    """Copy every state entry (weights and buffers) whose name and shape
    match between the two models; returns the copied names."""
    src_state = src.state_dict()
    dst_state = dst.state_dict()
    copied = []
    for name, tensor in src_state.items():
        if name in dst_state and dst_state[name].shape == tensor.shape:
            dst_state[name] = tensor.clone()
            copied.append(name)
    dst.load_state_dict(dst_state)
    return copied
