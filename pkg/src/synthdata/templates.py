"""
Object templates for the synthetic corpus.

A template is a named layout of parts in a unit object frame (x and y in
[0, 1], origin top-left). Each part is one or more primitives:

    ("disc", cx, cy, r)          r is relative to the frame width
    ("rect", x0, y0, x1, y1)

Parts of a template leave a gap between each other so that, once
rasterized, their masks stay disjoint. Every part is drawn in its own color.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

Primitive = Tuple


@dataclass(frozen=True)
class PartShape:
    name: str
    primitives: Tuple[Primitive, ...]
    color: Tuple[int, int, int]


@dataclass(frozen=True)
class ObjectTemplate:
    name: str
    parts: Tuple[PartShape, ...]
    aspect: float = 1.0  # frame height / width

    @property
    def part_names(self) -> Tuple[str, ...]:
        return tuple(p.name for p in self.parts)


TEMPLATES: Dict[str, ObjectTemplate] = {
    "creature": ObjectTemplate(
        "creature",
        (
            PartShape("creature head", (("disc", 0.5, 0.18, 0.16),), (230, 60, 50)),
            PartShape("creature body", (("rect", 0.15, 0.40, 0.85, 0.72),), (60, 170, 60)),
            PartShape(
                "creature legs",
                (("rect", 0.22, 0.78, 0.36, 1.0), ("rect", 0.64, 0.78, 0.78, 1.0)),
                (50, 80, 220),
            ),
        ),
        aspect=1.0,
    ),
    "lamp": ObjectTemplate(
        "lamp",
        (
            PartShape("lamp shade", (("rect", 0.0, 0.0, 1.0, 0.30),), (245, 210, 40)),
            PartShape("lamp pole", (("rect", 0.40, 0.36, 0.60, 0.82),), (200, 200, 210)),
            PartShape("lamp base", (("rect", 0.10, 0.88, 0.90, 1.0),), (140, 70, 30)),
        ),
        aspect=1.4,
    ),
    "cart": ObjectTemplate(
        "cart",
        (
            PartShape("cart box", (("rect", 0.0, 0.0, 1.0, 0.50),), (40, 200, 200)),
            PartShape(
                "cart wheels",
                (("disc", 0.22, 0.78, 0.16), ("disc", 0.78, 0.78, 0.16)),
                (220, 50, 200),
            ),
        ),
        aspect=0.75,
    ),
    "flower": ObjectTemplate(
        "flower",
        (
            PartShape("flower bloom", (("disc", 0.5, 0.25, 0.25),), (250, 130, 170)),
            PartShape("flower stem", (("rect", 0.42, 0.56, 0.58, 1.0),), (110, 230, 110)),
        ),
        aspect=1.6,
    ),
}

DEFAULT_TEMPLATES = ("creature", "lamp", "cart")


def rasterize_disc(cx: float, cy: float, r: float, height: int, width: int) -> np.ndarray:
    """Pixels whose centers lie within distance r of (cx, cy)."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def rasterize_rect(x0: float, y0: float, x1: float, y1: float, height: int, width: int) -> np.ndarray:
    """Pixels whose centers lie in [x0, x1) x [y0, y1)."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    return ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]


def rasterize_part(
    part: PartShape, frame: Tuple[float, float, float, float], height: int, width: int
) -> np.ndarray:
    """Boolean mask of a part placed in the pixel frame (x, y, w, h)."""
    fx, fy, fw, fh = frame
    bits = np.zeros((height, width), dtype=bool)
    for prim in part.primitives:
        if prim[0] == "disc":
            _, cx, cy, r = prim
            bits |= rasterize_disc(fx + cx * fw, fy + cy * fh, r * fw, height, width)
        elif prim[0] == "rect":
            _, x0, y0, x1, y1 = prim
            bits |= rasterize_rect(fx + x0 * fw, fy + y0 * fh, fx + x1 * fw, fy + y1 * fh, height, width)
        else:
            raise ValueError(f"unknown primitive {prim[0]!r} in part {part.name!r}")
    return bits
