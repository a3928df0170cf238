"""The four trainable networks: U-Net generator, patch discriminator, ViT encoder, affine regressor."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import Conv2d, ConvTranspose2d, InstanceNorm2d, LayerNorm, Linear, Module, Parameter

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class UNetGenerator(Module):
    """Small U-Net mapping N x C x H x W images to N x 1 x H x W in [-1, 1].

    ``depth`` encoder stages halve the resolution with 4x4 stride-2 convs;
    ``depth`` decoder stages double it back with transposed convs and
    concatenate the matching encoder skip. A final 3x3 conv over the last
    decoder features (plus the raw input) feeds the tanh output. With
    ``zero_init_output`` that conv starts at zero, so the untrained
    generator emits exactly 0.
    """

    def __init__(self, in_channels=1, out_channels=1, depth=4, base_width=32, image_size=64,
                 rng=None, zero_init_output=True):
        if depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if image_size < 32 or image_size & (image_size - 1) or image_size % (2 ** depth):
            raise ValueError(f"image size {image_size} must be a power of two >= 32 divisible by 2**{depth}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.image_size, self.depth = in_channels, image_size, depth
        widths = [min(base_width * 2 ** k, base_width * 8) for k in range(depth)]
        self.down = []
        self.down_norm = []
        cin = in_channels
        for k, w in enumerate(widths):
            self.down.append(Conv2d(cin, w, 4, 2, 1, rng=rng))
            self.down_norm.append(InstanceNorm2d(w) if k > 0 else None)
            cin = w
        self.down_norm = [n for n in self.down_norm if n is not None]
        self.up = []
        self.up_norm = []
        for k in reversed(range(depth)):
            target = widths[k - 1] if k > 0 else base_width
            self.up.append(ConvTranspose2d(cin, target, 4, 2, 1, rng=rng))
            self.up_norm.append(InstanceNorm2d(target))
            cin = target + (widths[k - 1] if k > 0 else in_channels)
        self.out = Conv2d(cin, out_channels, 3, 1, 1, rng=rng)
        if zero_init_output:
            self.out.weight.data[...] = 0.0

    def check_input(self, x) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (self.image_size,) * 2:
            raise ValueError(f"generator expects N x {self.in_channels} x {self.image_size} x "
                             f"{self.image_size} input, got {x.shape}")

    def forward(self, x):
        x = ad.as_tensor(x)
        self.check_input(x)
        skips = [x]
        h = x
        for k, conv in enumerate(self.down):
            h = conv(h)
            if k > 0:
                h = self.down_norm[k - 1](h)
            h = ad.leaky_relu(h, 0.2)
            skips.append(h)
        skips.pop()  # bottleneck is not concatenated with itself
        for conv, norm in zip(self.up, self.up_norm):
            h = ad.relu(norm(conv(h)))
            h = ad.concatenate([h, skips.pop()], axis=1)
        return ad.tanh(self.out(h))


class PatchDiscriminator(Module):
    """Conditional patch discriminator: (condition, candidate) -> N x 1 x H/2^L x W/2^L logits."""

    def __init__(self, in_channels=2, base_width=32, n_layers=3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.n_layers = n_layers
        self.convs = []
        self.norms = []
        cin = in_channels
        for k in range(n_layers):
            w = min(base_width * 2 ** k, base_width * 8)
            self.convs.append(Conv2d(cin, w, 4, 2, 1, rng=rng))
            if k > 0:
                self.norms.append(InstanceNorm2d(w))
            cin = w
        self.head = Conv2d(cin, 1, 3, 1, 1, rng=rng)

    def forward(self, condition, candidate):
        condition, candidate = ad.as_tensor(condition), ad.as_tensor(candidate)
        if condition.shape != candidate.shape:
            raise ValueError(f"discriminator: condition {condition.shape} and candidate {candidate.shape} differ")
        h = ad.concatenate([condition, candidate], axis=1)
        if h.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} stacked channels, got {h.shape[1]}")
        for k, conv in enumerate(self.convs):
            h = conv(h)
            if k > 0:
                h = self.norms[k - 1](h)
            h = ad.leaky_relu(h, 0.2)
        return self.head(h)


class TransformerBlock(Module):
    def __init__(self, dim, heads, mlp_ratio, rng):
        if dim % heads:
            raise ValueError(f"embedding width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng, std=0.02)
        self.proj = Linear(dim, dim, rng, std=0.02)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, std=0.02)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, std=0.02)
        self.last_attention = None

    def forward(self, x):
        n, t, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(n, t, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        x = x + self.proj(ctx)
        return x + self.fc2(ad.relu(self.fc1(self.norm2(x))))


class ViTEncoder(Module):
    """Vision transformer over channel-stacked image pairs.

    The input is cut into non-overlapping square patches; the configured
    size must yield exactly 64 tokens. ``pool="cls"`` prepends a learned
    class token and returns its final layer-normed state; ``pool="mean"``
    averages the 64 patch tokens instead. One D-vector per batch item.
    """

    N_TOKENS = 64

    def __init__(self, in_channels=2, image_size=64, patch_size=8, dim=128, depth=4, heads=4,
                 mlp_ratio=2, rng=None, pool="cls"):
        if image_size % patch_size or (image_size // patch_size) ** 2 != self.N_TOKENS:
            raise ValueError(f"{image_size}x{image_size} images with {patch_size}x{patch_size} patches give "
                             f"{(image_size / patch_size) ** 2:g} tokens; exactly {self.N_TOKENS} are required")
        if pool not in ("cls", "mean"):
            raise ValueError(f"pool must be 'cls' or 'mean', got {pool!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.image_size, self.patch_size, self.dim = in_channels, image_size, patch_size, dim
        self.pool = pool
        self.patch_embed = Linear(in_channels * patch_size * patch_size, dim, rng, std=0.02)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (self.N_TOKENS, dim)).astype(ad.get_default_dtype()))
        if pool == "cls":
            self.cls_token = Parameter(rng.normal(0.0, 0.02, (1, 1, dim)).astype(ad.get_default_dtype()))
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def patchify(self, x):
        n, c, h, w = x.shape
        p = self.patch_size
        g = h // p
        return x.reshape(n, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, c * p * p)

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(f"ViT expects N x {self.in_channels} x {self.image_size} x {self.image_size}, "
                             f"got {x.shape}")
        h = self.patch_embed(self.patchify(x)) + self.pos_embed
        if self.pool == "cls":
            cls = self.cls_token + ad.Tensor(np.zeros((x.shape[0], 1, self.dim), dtype=h.data.dtype))
            h = ad.concatenate([cls, h], axis=1)
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        return h[:, 0] if self.pool == "cls" else h.mean(axis=1)

    @property
    def attention_maps(self):
        return [b.last_attention for b in self.blocks]


class AffineRegressor(Module):
    """Five Linear-ReLU blocks followed by a linear head emitting [a, b, tx, c, d, ty].

    The head starts with zero weights and the identity as bias, so every
    embedding maps to the identity transform before training.
    """

    def __init__(self, in_dim=128, widths=(128, 128, 64, 64, 32), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.blocks = []
        cin = in_dim
        for w in widths:
            # He init keeps the activation scale through five ReLU blocks
            self.blocks.append(Linear(cin, w, rng, std=float(np.sqrt(2.0 / cin))))
            cin = w
        self.head = Linear(cin, 6, rng)
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = IDENTITY_THETA

    def forward(self, e):
        e = ad.as_tensor(e)
        if e.ndim != 2 or e.shape[1] != self.in_dim:
            raise ValueError(f"regressor expects N x {self.in_dim} embeddings, got {e.shape}")
        h = e
        for layer in self.blocks:
            h = ad.relu(layer(h))
        return self.head(h)
