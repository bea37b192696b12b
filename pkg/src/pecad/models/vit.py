"""Patch-sequence transformer classifier.

Images are cut into non-overlapping P x P patches in row-major grid order,
each flattened patch is projected linearly, a learned class token is
prepended, learned positional embeddings are added, and a stack of pre-norm
encoder blocks (multi-head self-attention + MLP) processes the sequence.  The
class token after the final norm is the feature vector; a linear head turns
it into a single logit.
"""

from __future__ import annotations

import torch
from torch import nn


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split (B, C, H, W) images into (B, K, C * P * P) flat patches.

    Patches are ordered row-major over the patch grid; each patch vector is
    the (C, P, P) sub-block flattened channel-first.  H and W must be
    divisible by ``patch_size``.
    """
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size ({h}, {w}) not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(patches: torch.Tensor, image_size: int, patch_size: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for square images."""
    b, k, d = patches.shape
    p = patch_size
    g = image_size // p
    if k != g * g or d % (p * p):
        raise ValueError(f"patch tensor of shape {tuple(patches.shape)} does not tile {image_size}")
    c = d // (p * p)
    x = patches.reshape(b, g, g, c, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, image_size, image_size)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm1(x)
        attended, _ = self.attn(normed, normed, normed, need_weights=False)
        x = x + attended
        return x + self.mlp(self.norm2(x))


class ViTBackbone(nn.Module):
    """Patch transformer emitting one logit per slice triplet."""

    def __init__(self, image_size: int, patch_size: int, dim: int, depth: int,
                 heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.image_size = image_size
        self.patch_size = patch_size
        num_patches = (image_size // patch_size) ** 2
        patch_dim = 3 * patch_size * patch_size
        self.patch_embed = nn.Linear(patch_dim, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.encoder = nn.ModuleList(
            [EncoderBlock(dim, heads, mlp_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.feature_dim = dim
        self.head = nn.Linear(dim, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}"
            )
        tokens = self.patch_embed(patchify(x, self.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.encoder:
            tokens = block(tokens)
        return self.norm(tokens)[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)
