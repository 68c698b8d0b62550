"""Landmark sketches to face photos: rasterizer, UNet generator, patch critic, losses, watermark."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch import nn

from .errors import ClippedLandmarksWarning, ShapeMismatch

IMAGE_SIZE = 256


# ---------------------------------------------------------------------------
# sketches


class Chain(NamedTuple):
    name: str
    indices: tuple
    closed: bool
    color: tuple   # RGB8


@dataclass(frozen=True)
class FacePalette:
    chains: tuple
    line_width: int = 2

    @classmethod
    def from_dict(cls, obj: dict) -> "FacePalette":
        chains = tuple(Chain(c["name"], tuple(c["indices"]), bool(c["closed"]), tuple(c["color"]))
                       for c in obj["chains"])
        covered = sorted(i for c in chains for i in c.indices)
        if covered != list(range(68)):
            raise ValueError("palette chains must cover each of the 68 landmark indices exactly once")
        return cls(chains, int(obj.get("line_width", 2)))

    @property
    def colors(self) -> set:
        return {c.color for c in self.chains}


def load_palette() -> FacePalette:
    with resources.files("talkinghead.assets").joinpath("palette.json").open() as fh:
        return FacePalette.from_dict(json.load(fh))


def to_pixel(xy, size: int = IMAGE_SIZE) -> np.ndarray:
    """Normalized [-1, 1] coordinates (y up) to integer (col, row) pixels."""
    xy = np.asarray(xy, dtype=np.float64)
    col = np.rint((xy[..., 0] + 1) / 2 * (size - 1))
    row = np.rint((1 - xy[..., 1]) / 2 * (size - 1))
    return np.stack([col, row], axis=-1).astype(int)


def rasterize_sketch(landmarks, palette: FacePalette | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Coloured polyline sketch of one landmark frame, (3, size, size) float32 in [0, 1].

    Each segment is an integer (Bresenham) line; a second copy shifted by one
    pixel across the segment's minor axis gives the 2-pixel width. Later chains
    overwrite earlier ones where they overlap. Points outside [-1, 1] are
    clipped with a :class:`ClippedLandmarksWarning`.
    """
    palette = palette or load_palette()
    xy = np.asarray(landmarks, dtype=np.float64)[:, :2]
    if xy.shape != (68, 2):
        raise ShapeMismatch(f"expected 68 landmarks, got {xy.shape[0]}")
    if np.any(np.abs(xy) > 1):
        warnings.warn("landmarks outside [-1, 1] were clipped", ClippedLandmarksWarning, stacklevel=2)
        xy = np.clip(xy, -1, 1)
    px = to_pixel(xy, size)
    canvas = Image.new("RGB", (size, size))
    draw = ImageDraw.Draw(canvas)
    for chain in palette.chains:
        idx = list(chain.indices) + ([chain.indices[0]] if chain.closed else [])
        for a, b in zip(idx[:-1], idx[1:]):
            draw_segment(draw, px[a], px[b], chain.color, palette.line_width)
    return (np.asarray(canvas, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def draw_segment(draw: ImageDraw.ImageDraw, p0, p1, color, width: int = 2) -> None:
    (c0, r0), (c1, r1) = p0, p1
    horizontal = abs(c1 - c0) >= abs(r1 - r0)
    for k in range(width):
        dc, dr = (0, k) if horizontal else (k, 0)
        draw.line([(int(c0) + dc, int(r0) + dr), (int(c1) + dc, int(r1) + dr)], fill=tuple(color), width=1)


def stack_condition(sketch, reference) -> np.ndarray:
    """Sketch channels then reference-photo channels, (6, 256, 256)."""
    sketch = np.asarray(sketch, dtype=np.float32)
    reference = np.asarray(reference, dtype=np.float32)
    want = (3, IMAGE_SIZE, IMAGE_SIZE)
    if sketch.shape != want or reference.shape != want:
        raise ShapeMismatch(f"sketch {sketch.shape} and reference {reference.shape} must both be {want}")
    return np.concatenate([sketch, reference], axis=0)


# ---------------------------------------------------------------------------
# networks


@dataclass
class RendererConfig:
    base_channels: int = 16
    depth: int = 5
    disc_channels: int = 16
    lr_g: float = 2e-3
    lr_d: float = 2e-4
    w_l1: float = 100.0
    w_perceptual: float = 10.0
    w_adv: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


class UNet(nn.Module):
    """Strided-conv encoder, transposed-conv decoder, skip concatenation at every scale."""

    def __init__(self, in_ch: int = 6, out_ch: int = 3, base: int = 16, depth: int = 5):
        super().__init__()
        widths = [min(base * 2**i, base * 8) for i in range(depth)]
        self.down = nn.ModuleList()
        c_in = in_ch
        for i, w in enumerate(widths):
            norm = nn.Identity() if i == 0 else nn.GroupNorm(4, w)
            self.down.append(nn.Sequential(nn.Conv2d(c_in, w, 4, 2, 1), norm, nn.LeakyReLU(0.2)))
            c_in = w
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            w_out = widths[i - 1] if i > 0 else base
            c_up = c_in if i == depth - 1 else 2 * c_in   # all but the first take a skip concat
            self.up.append(nn.Sequential(nn.ConvTranspose2d(c_up, w_out, 4, 2, 1), nn.GroupNorm(4, w_out), nn.ReLU()))
            c_in = w_out
        self.head = nn.Conv2d(base + in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        skips = [x]
        h = x
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        skips.pop()  # the bottleneck is not concatenated with itself
        for i, layer in enumerate(self.up):
            h = layer(h if i == 0 else torch.cat([h, skips.pop()], dim=1))
        return torch.sigmoid(self.head(torch.cat([h, skips.pop()], dim=1)))


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic on sketch (+) candidate; returns a logit map and features."""

    def __init__(self, in_ch: int = 6, base: int = 16):
        super().__init__()
        self.blocks = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_ch, base, 4, 2, 1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(base, 2 * base, 4, 2, 1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(2 * base, 4 * base, 4, 2, 1), nn.LeakyReLU(0.2)),
        ])
        self.out = nn.Conv2d(4 * base, 1, 3, 1, 1)

    def forward(self, sketch, candidate):
        h = torch.cat([sketch, candidate], dim=1)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        return self.out(h)[:, 0], feats


def generate_frame(stack, generator: UNet) -> np.ndarray:
    """(6, 256, 256) condition stack -> (3, 256, 256) image in [0, 1]."""
    x = torch.as_tensor(np.asarray(stack), dtype=torch.float32)
    if x.shape != (6, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeMismatch(f"expected a (6, 256, 256) stack, got {tuple(x.shape)}")
    generator.eval()
    with torch.no_grad():
        return generator(x[None])[0].numpy()


def discriminate(stack, candidate, disc: PatchDiscriminator) -> np.ndarray:
    s = torch.as_tensor(np.asarray(stack)[None, :3], dtype=torch.float32)
    c = torch.as_tensor(np.asarray(candidate)[None], dtype=torch.float32)
    with torch.no_grad():
        return disc(s, c)[0][0].numpy()


# ---------------------------------------------------------------------------
# losses


def renderer_losses(generated, target, patch_real, patch_fake, feats_fake, feats_real) -> dict:
    """L1, discriminator-feature perceptual distance and least-squares GAN terms.

    ``patch_fake`` should be computed on the generated image for the
    generator term; ``adv_d`` uses whatever is passed (callers detach the
    generated image for the critic step).
    """
    l1 = (generated - target).abs().mean()
    perceptual = sum((a - b).abs().mean() for a, b in zip(feats_fake, feats_real))
    adv_g = ((patch_fake - 1) ** 2).mean()
    adv_d = 0.5 * (((patch_real - 1) ** 2).mean() + (patch_fake**2).mean())
    return {"l1": l1, "perceptual": perceptual, "adv_g": adv_g, "adv_d": adv_d}


def generator_objective(gen_img, target, sketch, disc: PatchDiscriminator, cfg: RendererConfig) -> dict:
    patch_fake, feats_fake = disc(sketch, gen_img)
    with torch.no_grad():
        patch_real, feats_real = disc(sketch, target)
    losses = renderer_losses(gen_img, target, patch_real, patch_fake, feats_fake, feats_real)
    losses["total_g"] = cfg.w_l1 * losses["l1"] + cfg.w_perceptual * losses["perceptual"] + cfg.w_adv * losses["adv_g"]
    return losses


def train_renderer(generator: UNet, disc: PatchDiscriminator, stacks, targets, steps: int,
                   cfg: RendererConfig, seed: int = 0, batch: int = 1, optimizers=None,
                   start_step: int = 0, on_step=None) -> list[dict]:
    """Alternate one critic step and one generator step per iteration."""
    stacks = torch.as_tensor(np.asarray(stacks), dtype=torch.float32)
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.float32)
    opt_g, opt_d = optimizers or (torch.optim.Adam(generator.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999)),
                                  torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999)))
    generator.train()
    disc.train()
    history = []
    for step in range(start_step, steps):
        gen = torch.Generator().manual_seed(seed * 1_000_003 + step)
        idx = torch.randint(0, len(stacks), (batch,), generator=gen)
        x, y = stacks[idx], targets[idx]
        sketch = x[:, :3]
        fake = generator(x)

        patch_real, _ = disc(sketch, y)
        patch_fake, _ = disc(sketch, fake.detach())
        loss_d = 0.5 * (((patch_real - 1) ** 2).mean() + (patch_fake**2).mean())
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        losses = generator_objective(fake, y, sketch, disc, cfg)
        opt_g.zero_grad()
        losses["total_g"].backward()
        opt_g.step()
        record = {k: v.item() for k, v in losses.items()}
        record["adv_d"] = loss_d.item()
        history.append(record)
        if on_step is not None:
            on_step(step, record)
    return history


# ---------------------------------------------------------------------------
# watermark

WATERMARK_SIZE = 16
WATERMARK_OPACITY = 0.6
_GLYPH = [
    "................",
    ".##############.",
    ".#............#.",
    ".#.##......##.#.",
    ".#.##......##.#.",
    ".#..##....##..#.",
    ".#..##....##..#.",
    ".#...##..##...#.",
    ".#...##..##...#.",
    ".#....####....#.",
    ".#....####....#.",
    ".#.....##.....#.",
    ".#............#.",
    ".#....SYNTH...#.",
    ".##############.",
    "................",
]


def watermark_glyph() -> np.ndarray:
    """(3, 16, 16) glyph: light strokes on a dark tile."""
    mask = np.array([[ch != "." for ch in row] for row in _GLYPH], dtype=np.float32)
    tile = 0.1 + 0.85 * mask
    return np.stack([tile, tile, tile])


def apply_watermark(frame) -> np.ndarray:
    """Blend the glyph into the bottom-right 16x16 corner at 60 % opacity; other pixels untouched."""
    out = np.array(frame, dtype=np.float32, copy=True)
    if out.ndim != 3 or out.shape[0] != 3 or min(out.shape[1:]) < WATERMARK_SIZE:
        raise ShapeMismatch(f"cannot watermark an image of shape {out.shape}")
    region = out[:, -WATERMARK_SIZE:, -WATERMARK_SIZE:]
    out[:, -WATERMARK_SIZE:, -WATERMARK_SIZE:] = (1 - WATERMARK_OPACITY) * region + WATERMARK_OPACITY * watermark_glyph()
    return out
