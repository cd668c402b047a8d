"""Crop / scale / pad mapping from image pixels to the square descriptor input.

The image snippet and the lane channel both go through :class:`SnippetSpec`,
so a point lands on the same snippet pixel in every channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box2D

SNIPPET_SIZE = 128


@dataclass(frozen=True)
class SnippetSpec:
    crop: Box2D
    scale: float
    pad: tuple[float, float]  # (left, top) in snippet pixels
    out_size: int = SNIPPET_SIZE

    def apply(self, points) -> np.ndarray:
        """Image pixel coordinates -> snippet coordinates."""
        p = np.asarray(points, dtype=float)
        origin = np.array([self.crop.u_min, self.crop.v_min])
        return (p - origin) * self.scale + np.asarray(self.pad)

    def invert(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        origin = np.array([self.crop.u_min, self.crop.v_min])
        return (p - np.asarray(self.pad)) / self.scale + origin

    @property
    def content(self) -> tuple[float, float, float, float]:
        """Snippet-space rectangle (u0, v0, u1, v1) covered by the crop."""
        u0, v0 = self.pad
        return u0, v0, u0 + self.crop.width * self.scale, v0 + self.crop.height * self.scale


def snippet_transform(box: Box2D, out_size: int = SNIPPET_SIZE) -> SnippetSpec:
    """Longer crop edge fills ``out_size``; the short axis is zero-padded.

    Padding is split evenly in whole pixels with the odd pixel on the
    trailing (right or bottom) side.
    """
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    w, h = box.width, box.height
    scale = out_size / max(w, h)
    if w >= h:
        extra = out_size - h * scale
        pad = (0.0, float(np.floor(extra / 2)))
    else:
        extra = out_size - w * scale
        pad = (float(np.floor(extra / 2)), 0.0)
    return SnippetSpec(box, scale, pad, out_size)
