"""Symmetry-enhanced attention over a stack of per-slice bridge features.

The center slice attends, partition by partition, to every slice of the
stack (self branch) and to every slice of the horizontally mirrored stack
(symmetry branch). Each branch uses scaled dot-product similarities over
the positions of one partition; per-position values from the two branches
are concatenated channel-wise, projected back to the input width, and
added residually to the center feature. The output projection is
zero-initialized so a fresh block is an exact identity.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class PartitionSpec:
    """P x Q grid of equal blocks; the mirror of block (j, k) is block (j, Q+1-k)."""

    P: int = 2
    Q: int = 2

    def __post_init__(self):
        if self.P < 1 or self.Q < 1:
            raise ValueError("P and Q must be >= 1")

    def block_shape(self, h: int, w: int) -> tuple[int, int]:
        if h % self.P != 0 or w % self.Q != 0:
            raise ValueError(f"{h}x{w} feature map not divisible into {self.P}x{self.Q} partitions")
        return h // self.P, w // self.Q


def partition(x: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    """Split (C, H, W) into a (P, Q) grid of (C, H', W') blocks."""
    c, h, w = x.shape
    hp, wq = spec.block_shape(h, w)
    return (
        x.reshape(c, spec.P, hp, spec.Q, wq)
        .transpose(1, 3, 0, 2, 4)
        .copy()
    )


def unpartition(blocks: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    """Inverse of partition; exact round-trip."""
    p, q, c, hp, wq = blocks.shape
    if (p, q) != (spec.P, spec.Q):
        raise ValueError("block grid does not match the partition spec")
    return blocks.transpose(2, 0, 3, 1, 4).reshape(c, p * hp, q * wq).copy()


def hflip_features(x):
    """Mirror a feature map about the vertical midline: out[..., x] = in[..., W-1-x]."""
    if isinstance(x, torch.Tensor):
        return x.flip(-1)
    return np.asarray(x)[..., ::-1].copy()


def attention_similarity(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Row-stochastic similarity Softmax(q^T k / sqrt(d)) for (d, N') inputs."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if queries.shape[0] != keys.shape[0]:
        raise ValueError("queries and keys must share the channel dimension")
    d = queries.shape[0]
    logits = queries.T @ keys / math.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


class SymmetryEnhancedAttention(nn.Module):
    """Attention bridge over (B, C, 2T+1, H, W) feature stacks.

    ``use_symmetry=False`` drops the mirrored branch entirely (fewer
    parameters), which is the self-attention-only ablation.
    """

    def __init__(self, channels: int, spec: PartitionSpec = PartitionSpec(), temporal_radius: int = 1,
                 d: int | None = None, use_symmetry: bool = True):
        super().__init__()
        if channels % 2 != 0:
            raise ConfigError("attention channel count must be even")
        self.channels = channels
        self.spec = spec
        self.temporal_radius = temporal_radius
        self.d = channels // 2 if d is None else d
        if self.d < 1:
            raise ConfigError("reduced channel count d must be >= 1")
        self.use_symmetry = use_symmetry
        half = channels // 2
        self.theta_proj = nn.Conv2d(channels, self.d, 1)
        self.phi_proj = nn.Conv2d(channels, self.d, 1)
        self.g_proj = nn.Conv2d(channels, half, 1)
        if use_symmetry:
            self.h_proj = nn.Conv2d(channels, half, 1)
        self.out_proj = nn.Conv2d(channels if use_symmetry else half, channels, 1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def _blocks(self, x: torch.Tensor) -> torch.Tensor:
        """(N, c, H, W) -> (N, P*Q, c, H'*W')."""
        n, c, h, w = x.shape
        hp, wq = self.spec.block_shape(h, w)
        x = x.reshape(n, c, self.spec.P, hp, self.spec.Q, wq)
        x = x.permute(0, 2, 4, 1, 3, 5)
        return x.reshape(n, self.spec.P * self.spec.Q, c, hp * wq)

    def _unblocks(self, y: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """(B, P*Q, c, H'*W') -> (B, c, H, W)."""
        b, pq, c, n = y.shape
        hp, wq = self.spec.block_shape(h, w)
        y = y.reshape(b, self.spec.P, self.spec.Q, c, hp, wq)
        y = y.permute(0, 3, 1, 4, 2, 5)
        return y.reshape(b, c, h, w)

    def _branch(self, q: torch.Tensor, stack_slices: torch.Tensor, value_proj: nn.Conv2d,
                b: int, depth: int) -> torch.Tensor:
        """One attention branch; returns per-position values (B, P*Q, C/2, N')."""
        k = self._blocks(self.phi_proj(stack_slices)).reshape(b, depth, q.shape[1], self.d, -1)
        v = self._blocks(value_proj(stack_slices)).reshape(b, depth, q.shape[1], self.channels // 2, -1)
        logits = torch.einsum("bqcm,btqcn->btqmn", q, k) / math.sqrt(self.d)
        sim = logits.softmax(dim=-1)
        return torch.einsum("btqmn,btqcn->bqcm", sim, v)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.dim() != 5:
            raise ValueError("expected a (B, C, D, H, W) feature stack")
        b, c, depth, h, w = stack.shape
        if c != self.channels:
            raise ConfigError(f"feature stack has {c} channels, attention block expects {self.channels}")
        if depth != 2 * self.temporal_radius + 1:
            raise ConfigError(f"feature stack depth {depth} != 2T+1 for T={self.temporal_radius}")
        self.spec.block_shape(h, w)

        center = stack[:, :, self.temporal_radius]
        q = self._blocks(self.theta_proj(center))
        slices = stack.permute(0, 2, 1, 3, 4).reshape(b * depth, c, h, w)
        y = self._branch(q, slices, self.g_proj, b, depth)
        if self.use_symmetry:
            mirrored = stack.flip(-1).permute(0, 2, 1, 3, 4).reshape(b * depth, c, h, w)
            y_sym = self._branch(q, mirrored, self.h_proj, b, depth)
            y = torch.cat([y, y_sym], dim=2)
        out = self._unblocks(y, h, w)
        return center + self.out_proj(out)

    def forward_stack(self, stack) -> torch.Tensor:
        """Unbatched convenience: (2T+1, C, H, W) in, (C, H, W) out."""
        t = torch.as_tensor(stack)
        return self.forward(t.permute(1, 0, 2, 3).unsqueeze(0))[0]


def sea_forward(stack, block: SymmetryEnhancedAttention) -> np.ndarray:
    """Enhance the center slice of a (2T+1, C, H, W) numpy feature stack."""
    was_training = block.training
    block.eval()
    with torch.no_grad():
        out = block.forward_stack(torch.from_numpy(np.ascontiguousarray(stack)))
    if was_training:
        block.train()
    return out.numpy()
