"""2D rasterization and image analysis.

Canvas with max-blend drawing (segments, ellipses, disks), Sobel edge
masks, 2x2 box-filter pyramids, and multi-resolution 3x3 window
extraction. Pixel centers sit on integer coordinates; a primitive covers
a pixel iff the center lies strictly inside the primitive inflated by
half a pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ContractError

PYRAMID_LEVELS = 4
SOBEL_THRESHOLD = 0.5


class Canvas:
    """c-channel raster image with intensities in [0, 1].

    Tracks how many pixels drawing operations covered in total and how many
    fell outside the penalty region (defaults to the canvas rectangle);
    constraint likelihoods read those counters.
    """

    __slots__ = ("width", "height", "channels", "data", "drawn_pixels", "oob_pixels", "penalty_region")

    def __init__(self, width: int, height: int, channels: int = 1, data: np.ndarray | None = None):
        if width < 1 or height < 1 or channels < 1:
            raise ContractError("canvas dimensions must be positive")
        self.width = width
        self.height = height
        self.channels = channels
        if data is None:
            data = np.zeros((height, width, channels), dtype=np.float64)
        else:
            data = np.asarray(data, dtype=np.float64)
            if data.ndim == 2:
                data = data[:, :, None]
            if data.shape != (height, width, channels):
                raise ContractError(f"data shape {data.shape} != {(height, width, channels)}")
        self.data = data
        self.drawn_pixels = 0
        self.oob_pixels = 0
        # inclusive pixel-index bounds (x0, y0, x1, y1)
        self.penalty_region = (0, 0, width - 1, height - 1)

    @classmethod
    def blank(cls, width: int, height: int, channels: int = 1) -> "Canvas":
        return cls(width, height, channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Canvas":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr.shape[1], arr.shape[0], 1, arr)
        return cls(arr.shape[1], arr.shape[0], arr.shape[2], arr)

    def copy(self) -> "Canvas":
        c = Canvas(self.width, self.height, self.channels, self.data.copy())
        c.drawn_pixels = self.drawn_pixels
        c.oob_pixels = self.oob_pixels
        c.penalty_region = self.penalty_region
        return c

    def channel(self, i: int = 0) -> np.ndarray:
        return self.data[:, :, i]

    def fill_mean(self) -> float:
        return float(self.data.mean())

    def same_shape(self, other: "Canvas") -> bool:
        return (self.width, self.height, self.channels) == (other.width, other.height, other.channels)


@dataclass
class EdgeMask:
    width: int
    height: int
    data: np.ndarray  # (h, w) uint8, 0/1


@dataclass
class Pyramid:
    """Box-filter pyramid; level 0 is the source, each next level halves."""

    levels: list = field(default_factory=list)  # (h, w, c) float64 arrays


def _paint(canvas: Canvas, xs: np.ndarray, ys: np.ndarray, value: float) -> None:
    if xs.size == 0:
        return
    total = int(xs.size)
    x0, y0, x1, y1 = canvas.penalty_region
    inside_region = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    canvas.drawn_pixels += total
    canvas.oob_pixels += total - int(inside_region.sum())
    on_canvas = (xs >= 0) & (xs < canvas.width) & (ys >= 0) & (ys < canvas.height)
    if not on_canvas.any():
        return
    xs = xs[on_canvas]
    ys = ys[on_canvas]
    ch = canvas.data[:, :, 0]
    # each lattice point appears at most once per primitive, so fancy
    # indexing (much faster than ufunc.at) is safe here
    ch[ys, xs] = np.maximum(ch[ys, xs], value)


def _grid(xmin: float, xmax: float, ymin: float, ymax: float):
    gx0 = int(math.floor(xmin))
    gx1 = int(math.ceil(xmax))
    gy0 = int(math.floor(ymin))
    gy1 = int(math.ceil(ymax))
    xs = np.arange(gx0, gx1 + 1)
    ys = np.arange(gy0, gy1 + 1)
    return xs[None, :], ys[:, None]


def draw_segment(canvas: Canvas, a, b, width: float = 1.0, value: float = 1.0) -> None:
    """Draw segment a-b as a capsule of the given stroke width.

    A pixel is covered iff its center is strictly within width/2 + 0.5 of
    the segment. Covered pixels are set to max(existing, value); portions
    outside the canvas are clipped but still counted.
    """
    if width < 1.0:
        raise ContractError("stroke width must be >= 1")
    if canvas.channels != 1:
        raise ContractError("drawing requires a single-channel canvas")
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    r = width / 2.0 + 0.5
    gx, gy = _grid(min(ax, bx) - r, max(ax, bx) + r, min(ay, by) - r, max(ay, by) + r)
    dx = bx - ax
    dy = by - ay
    seg2 = dx * dx + dy * dy
    px = gx - ax
    py = gy - ay
    if seg2 == 0.0:
        d2 = px * px + py * py
    else:
        t = np.clip((px * dx + py * dy) / seg2, 0.0, 1.0)
        ex = px - t * dx
        ey = py - t * dy
        d2 = ex * ex + ey * ey
    mask = d2 < r * r
    yy, xx = np.nonzero(mask)
    _paint(canvas, xx + int(gx[0, 0]), yy + int(gy[0, 0]), value)


def draw_disk(canvas: Canvas, center, radius: float, value: float = 1.0) -> None:
    """Filled disk; same half-pixel inflation rule as segments."""
    draw_segment(canvas, center, center, width=2.0 * radius, value=value)


def draw_ellipse(canvas: Canvas, center, axes, angle: float, value: float = 1.0) -> None:
    """Filled rotated ellipse with semi-axes (a, b), inflated by half a pixel."""
    if canvas.channels != 1:
        raise ContractError("drawing requires a single-channel canvas")
    cx, cy = float(center[0]), float(center[1])
    sa = float(axes[0]) + 0.5
    sb = float(axes[1]) + 0.5
    rmax = max(sa, sb)
    gx, gy = _grid(cx - rmax, cx + rmax, cy - rmax, cy + rmax)
    ca = math.cos(angle)
    sn = math.sin(angle)
    px = gx - cx
    py = gy - cy
    u = px * ca + py * sn
    v = -px * sn + py * ca
    mask = (u / sa) ** 2 + (v / sb) ** 2 < 1.0
    yy, xx = np.nonzero(mask)
    _paint(canvas, xx + int(gx[0, 0]), yy + int(gy[0, 0]), value)


# standard 3x3 Sobel responses built from shifted slices of the edge-padded image
def _sobel_gradients(img: np.ndarray):
    p = np.pad(img, 1, mode="edge")
    tl = p[:-2, :-2]
    tc = p[:-2, 1:-1]
    tr = p[:-2, 2:]
    ml = p[1:-1, :-2]
    mr = p[1:-1, 2:]
    bl = p[2:, :-2]
    bc = p[2:, 1:-1]
    br = p[2:, 2:]
    gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)
    gy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)
    return gx, gy


def sobel_edge_mask(canvas: Canvas, threshold: float = SOBEL_THRESHOLD) -> EdgeMask:
    """Binary edge mask: gradient magnitude strictly above threshold.

    Standard integer Sobel kernels on the clamp-to-edge padded image; a
    unit step then responds with magnitude 4, well above the 0.5 default.
    """
    if canvas.channels != 1:
        raise ContractError("sobel_edge_mask requires a single-channel canvas")
    gx, gy = _sobel_gradients(canvas.channel(0))
    mask = (gx * gx + gy * gy) > threshold * threshold
    return EdgeMask(canvas.width, canvas.height, mask.astype(np.uint8))


def _box_down(arr: np.ndarray) -> np.ndarray:
    """2x2 box downsample; odd edges average the available children."""
    h, w, c = arr.shape
    xi = np.arange(0, w, 2)
    yi = np.arange(0, h, 2)
    s = np.add.reduceat(np.add.reduceat(arr, yi, axis=0), xi, axis=1)
    cx = np.minimum(xi + 2, w) - xi  # children per output column (1 or 2)
    cy = np.minimum(yi + 2, h) - yi
    counts = cy[:, None] * cx[None, :]
    return s / counts[:, :, None]


def build_pyramid(canvas: Canvas, levels: int = PYRAMID_LEVELS) -> Pyramid:
    lv = [canvas.data]
    for _ in range(levels - 1):
        lv.append(_box_down(lv[-1]))
    return Pyramid(lv)


def extract_windows(pyramid: Pyramid, position) -> np.ndarray:
    """3x3 windows around the position at every pyramid level.

    The level-k center is position / 2^k rounded half-up to the nearest
    pixel; windows clamp to the edge. Output is level-major, row-major,
    channel-minor: 9 * levels * channels features.
    """
    x, y = float(position[0]), float(position[1])
    out = []
    for k, arr in enumerate(pyramid.levels):
        h, w, _ = arr.shape
        scale = float(1 << k)
        cx = int(math.floor(x / scale + 0.5))
        cy = int(math.floor(y / scale + 0.5))
        xs = np.clip(np.array([cx - 1, cx, cx + 1]), 0, w - 1)
        ys = np.clip(np.array([cy - 1, cy, cy + 1]), 0, h - 1)
        out.append(arr[np.ix_(ys, xs)].ravel())
    return np.concatenate(out)


def mirror_canvas(canvas: Canvas) -> Canvas:
    """Horizontal mirror (column x maps to width-1-x)."""
    return Canvas(canvas.width, canvas.height, canvas.channels, canvas.data[:, ::-1, :].copy())


def write_mask_png(canvas: Canvas, path) -> None:
    """Write a single-channel canvas as an 8-bit grayscale PNG (1.0 -> 255)."""
    if canvas.channels != 1:
        raise ContractError("PNG masks are single-channel")
    arr = np.clip(np.rint(canvas.channel(0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_mask_png(path) -> Canvas:
    """Read an 8-bit grayscale PNG as a binary canvas (>= 128 -> 1.0)."""
    img = Image.open(path).convert("L")
    arr = np.asarray(img, dtype=np.uint8)
    return Canvas.from_array((arr >= 128).astype(np.float64))
