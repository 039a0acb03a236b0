"""Masked-reconstruction pretext task: random masks, decoder, L1 objective.

Several small, possibly overlapping rectangles are blanked out of each image
(never covering more than a quarter of it); an encoder-decoder then regresses
the original image under L1 loss. The encoder is the search network with its
classifier removed; the decoder mirrors the encoder's downsampling with
nearest-neighbour upsampling blocks and is discarded after the search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Linear
from .tensor import Tensor, l1_loss, relu, upsample_nearest2x


@dataclass(frozen=True)
class MaskSpec:
    """Axis-aligned rectangles to blank out, tied to one image size."""

    rects: tuple[tuple[int, int, int, int], ...]  # (top, left, height, width)
    image_size: tuple[int, int]

    def __post_init__(self):
        ih, iw = self.image_size
        for top, left, h, w in self.rects:
            if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > ih or left + w > iw:
                raise ConfigError(
                    f"rectangle (top={top}, left={left}, h={h}, w={w}) does not lie "
                    f"inside a {ih}x{iw} image"
                )
        if 4 * int(self.grid().sum()) > ih * iw:
            raise ConfigError("mask union exceeds a quarter of the image area")

    def grid(self) -> np.ndarray:
        """Boolean (H, W) union of all rectangles."""
        g = np.zeros(self.image_size, dtype=bool)
        for top, left, h, w in self.rects:
            g[top:top + h, left:left + w] = True
        return g

    def coverage(self) -> float:
        ih, iw = self.image_size
        return float(self.grid().sum()) / (ih * iw)


def default_size_range(image_size) -> tuple[int, int]:
    h = min(image_size)
    return (max(1, h // 8), max(2, h // 3))


def generate_masks(
    rng: np.random.Generator,
    image_size: tuple[int, int],
    count_range: tuple[int, int] = (2, 5),
    size_range: tuple[int, int] | None = None,
) -> MaskSpec:
    """Draw random rectangles, capped at 25% union coverage.

    The rectangle count and each rectangle's size/position are sampled first;
    once adding a rectangle would push the union past a quarter of the image,
    it and all later ones are discarded. Deterministic given the generator.
    """
    ih, iw = image_size
    lo, hi = size_range if size_range is not None else default_size_range(image_size)
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    budget = ih * iw  # compare 4*union <= budget
    grid = np.zeros(image_size, dtype=bool)
    rects = []
    for _ in range(count):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, ih - h + 1))
        left = int(rng.integers(0, iw - w + 1))
        trial = grid.copy()
        trial[top:top + h, left:left + w] = True
        if 4 * int(trial.sum()) > budget:
            break
        grid = trial
        rects.append((top, left, h, w))
    return MaskSpec(rects=tuple(rects), image_size=(ih, iw))


def apply_masks(image: np.ndarray, mask: MaskSpec, fill) -> np.ndarray:
    """Copy of the image with masked pixels set to the fill value.

    ``fill`` is a scalar or per-channel array. The image is (H, W, 3).
    """
    image = np.asarray(image)
    if image.shape[:2] != mask.image_size:
        raise ShapeError(
            f"mask was drawn for size {mask.image_size}, image has shape {image.shape}"
        )
    out = image.copy()
    fill = np.asarray(fill, dtype=image.dtype)
    for top, left, h, w in mask.rects:
        out[top:top + h, left:left + w] = fill
    return out


class Decoder:
    """Upsampling reconstruction head: (up2x -> linear -> relu) per encoder
    downsample, channels halved each step, then a final linear to 3 channels
    with no terminal activation."""

    def __init__(self, rng: np.random.Generator, in_channels: int, upsamples: int,
                 out_channels: int = 3):
        self.upsamples = upsamples
        self.mixers = []
        c = in_channels
        for _ in range(upsamples):
            nxt = max(c // 2, 4)
            self.mixers.append(Linear(rng, c, nxt))
            c = nxt
        self.final = Linear(rng, c, out_channels)

    def __call__(self, feats: Tensor) -> Tensor:
        y = feats
        for mixer in self.mixers:
            y = relu(mixer(upsample_nearest2x(y)))
        return self.final(y)

    def named_parameters(self, prefix: str = "decoder"):
        out = []
        for i, mixer in enumerate(self.mixers):
            out += mixer.named_parameters(f"{prefix}.mix{i}")
        out += self.final.named_parameters(f"{prefix}.final")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def car_forward(features_fn, decoder: Decoder, image: np.ndarray, mask: MaskSpec, fill) -> Tensor:
    """Mask the image, encode it, and decode a full-resolution reconstruction.

    ``features_fn`` maps an input Tensor to the encoder's pre-pooling feature
    map (the search network body without its classifier).
    """
    masked = apply_masks(image, mask, fill)
    return decoder(features_fn(Tensor(masked)))


def car_loss(recon: Tensor, original: Tensor, region: str = "all",
             mask: MaskSpec | None = None) -> Tensor:
    """L1 reconstruction loss over the whole image, or the masked region only."""
    if region == "all":
        return l1_loss(recon, original)
    if region == "masked":
        if mask is None:
            raise ConfigError("region='masked' requires the MaskSpec")
        weight = mask.grid().astype(float)[..., None]
        if recon.values.ndim == 4:
            weight = weight[None]
        return l1_loss(recon, original, weight=weight)
    raise ConfigError(f"unknown loss region {region!r}; expected 'all' or 'masked'")
