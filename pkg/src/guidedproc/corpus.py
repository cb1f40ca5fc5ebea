"""Constraint-image management: masks, annotations, mirrors, synthetic strokes.

Target images are binary PNG masks with a sidecar `.ann` text file giving
the execution start point and direction (`start_x start_y heading_radians`).
A manifest lists one image path per line. Because the original hand-drawn
collections are not shipped, a synthetic scribble generator (smooth random
strokes of varying width) provides unlimited stand-in targets.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import CorpusLoadError
from .raster import Canvas, draw_segment, mirror_canvas, read_mask_png, write_mask_png
from .rng import KeyedStream, fold
from .trace import normalize_angle

CANONICAL_SIZE = (129, 97)
FILL_BAND = (0.03, 0.5)


@dataclass
class AnnotatedTarget:
    mask: Canvas
    start_x: float
    start_y: float
    start_heading: float
    source_id: str

    def validate(self) -> None:
        m = self.mask.channel(0)
        if not np.any(m > 0):
            raise CorpusLoadError(f"{self.source_id}: mask is empty")
        xi = int(round(self.start_x))
        yi = int(round(self.start_y))
        if not (0 <= xi < self.mask.width and 0 <= yi < self.mask.height) or m[yi, xi] == 0.0:
            raise CorpusLoadError(f"{self.source_id}: start point ({self.start_x}, {self.start_y}) is not on a filled pixel")


def mirror_target(target: AnnotatedTarget) -> AnnotatedTarget:
    """Horizontally mirrored copy: column x -> width-1-x, heading -> pi - heading."""
    w = target.mask.width
    return AnnotatedTarget(
        mask=mirror_canvas(target.mask),
        start_x=(w - 1) - target.start_x,
        start_y=target.start_y,
        start_heading=normalize_angle(math.pi - target.start_heading),
        source_id=target.source_id + "~mirror",
    )


def load_annotation(path):
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 3:
        raise CorpusLoadError(f"{path}: expected 'start_x start_y heading_radians'")
    return float(parts[0]), float(parts[1]), float(parts[2])


def save_annotation(path, x: float, y: float, heading: float) -> None:
    with open(path, "w") as f:
        f.write(f"{x!r} {y!r} {heading!r}\n")


def load_target(image_path, source_id=None) -> AnnotatedTarget:
    if not os.path.exists(image_path):
        raise CorpusLoadError(f"missing image {image_path}")
    ann_path = os.path.splitext(image_path)[0] + ".ann"
    if not os.path.exists(ann_path):
        raise CorpusLoadError(f"missing annotation {ann_path}")
    x, y, heading = load_annotation(ann_path)
    t = AnnotatedTarget(read_mask_png(image_path), x, y, heading, source_id or os.path.basename(image_path))
    t.validate()
    return t


def save_target(target: AnnotatedTarget, image_path) -> None:
    write_mask_png(target.mask, image_path)
    save_annotation(os.path.splitext(image_path)[0] + ".ann", target.start_x, target.start_y, target.start_heading)


def load_corpus(manifest_path, augment: bool = True) -> list:
    """Load a line-per-entry manifest; mirrored copies follow their originals."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    targets = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            t = load_target(os.path.join(base, line), source_id=line)
            targets.append(t)
            if augment:
                targets.append(mirror_target(t))
    return targets


def _render_stroke(points, widths, width: int, height: int) -> Canvas:
    canvas = Canvas.blank(width, height)
    for i in range(len(points) - 1):
        draw_segment(canvas, points[i], points[i + 1], widths[i])
    return canvas


def synth_scribble(stream: KeyedStream, width: int = CANONICAL_SIZE[0], height: int = CANONICAL_SIZE[1], source_id: str = "scribble") -> AnnotatedTarget:
    """One smooth random stroke with bounded curvature and width in [2, 8].

    Rejection-samples until the fill fraction lands in FILL_BAND; the start
    annotation is the stroke's first point and first-segment tangent.
    """
    if width < 32 or height < 32:
        raise CorpusLoadError("synthetic targets need at least 32x32 pixels")
    margin = 8.0
    scale = math.sqrt(width * height / float(CANONICAL_SIZE[0] * CANONICAL_SIZE[1]))
    while True:
        x = margin + stream.uniform() * (width - 2 * margin)
        y = margin + stream.uniform() * (height - 2 * margin)
        h = (stream.uniform() * 2.0 - 1.0) * math.pi
        base_w = 3.0 + stream.uniform() * 2.5
        stroke_w = base_w
        step = 3.0
        n_steps = max(8, int((20 + stream.uniform() * 30) * scale))
        points = [(x, y)]
        widths = []
        for _ in range(n_steps):
            h += max(-0.45, min(0.45, 0.3 * stream.normal()))
            # steer smoothly back toward the interior near the frame
            tx = min(max(x + 3.0 * step * math.cos(h), margin), width - margin)
            ty = min(max(y + 3.0 * step * math.sin(h), margin), height - margin)
            if tx != x + 3.0 * step * math.cos(h) or ty != y + 3.0 * step * math.sin(h):
                want = math.atan2(ty - y, tx - x)
                h += 0.5 * math.remainder(want - h, math.tau)
            x += step * math.cos(h)
            y += step * math.sin(h)
            x = min(max(x, margin), width - margin)
            y = min(max(y, margin), height - margin)
            stroke_w = min(min(8.0, base_w + 1.0), max(max(2.0, base_w - 1.0), stroke_w + 0.2 * stream.normal()))
            points.append((x, y))
            widths.append(stroke_w)
        mask = _render_stroke(points, widths, width, height)
        fill = mask.fill_mean()
        if FILL_BAND[0] <= fill <= FILL_BAND[1]:
            sx, sy = points[0]
            tangent = math.atan2(points[1][1] - sy, points[1][0] - sx)
            t = AnnotatedTarget(mask, sx, sy, normalize_angle(tangent), source_id)
            t.validate()
            return t


def synth_cross(stream: KeyedStream, width: int = CANONICAL_SIZE[0], height: int = CANONICAL_SIZE[1], source_id: str = "cross") -> AnnotatedTarget:
    """Plus-sign target: two crossing strokes, for multimodal-choice tests."""
    cx = width * (0.4 + 0.2 * stream.uniform())
    cy = height * (0.4 + 0.2 * stream.uniform())
    base = (stream.uniform() - 0.5) * (math.pi / 6)
    arm = min(width, height) * (0.28 + 0.12 * stream.uniform())
    stroke_w = 3.0 + stream.uniform() * 3.0
    canvas = Canvas.blank(width, height)
    ends = []
    for k in range(2):
        ang = base + k * math.pi / 2.0
        dx, dy = math.cos(ang), math.sin(ang)
        a = (cx - arm * dx, cy - arm * dy)
        b = (cx + arm * dx, cy + arm * dy)
        draw_segment(canvas, a, b, stroke_w)
        ends.append((a, ang))
    (sx, sy), heading = ends[0]
    t = AnnotatedTarget(canvas, sx, sy, normalize_angle(heading), source_id)
    t.validate()
    return t


def synth_corpus(kind: str, count: int, seed: int, width: int, height: int) -> list:
    """Deterministic batch of synthetic targets ("scribble" or "cross")."""
    gen = {"scribble": synth_scribble, "cross": synth_cross}[kind]
    return [
        gen(KeyedStream(fold(seed, 0xC0, i)), width, height, source_id=f"{kind}-{seed}-{i:04d}")
        for i in range(count)
    ]
