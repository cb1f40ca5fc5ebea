"""Constraint likelihoods, evaluable on any partial output.

Shape matching scores weighted pixel agreement with a binary target mask,
normalized so an empty canvas scores 0 and an exact match scores 1, then
wraps the score in a tight Gaussian. The circuit likelihood has no target
image: it rewards dense edges, a fill fraction near tau, and geometry
kept inside the die region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateConstraintError
from .raster import Canvas, EdgeMask, Pyramid, build_pyramid, sobel_edge_mask
from .trace import gaussian_logpdf

W_FILLED = 2.0 / 3.0
SHAPE_SIGMA = 0.02
CIRCUIT_SIGMA = 0.01
CIRCUIT_TAU = 0.5


def _pixel_weights(target: Canvas, target_edges: EdgeMask, w_filled: float) -> np.ndarray:
    """w(p): 1 where the target is empty, 1 on its edges, w_filled inside."""
    t = target.channel(0)
    w = np.where(t == 0.0, 1.0, np.where(target_edges.data == 1, 1.0, w_filled))
    return w


def sim(image: Canvas, target: Canvas, target_edges: EdgeMask, w_filled: float = W_FILLED) -> float:
    """Weighted fraction of pixels where the binary images agree."""
    if not image.same_shape(target):
        raise ContractError("sim requires identically shaped images")
    w = _pixel_weights(target, target_edges, w_filled)
    match = image.channel(0) == target.channel(0)
    return float(np.sum(w * match) / np.sum(w))


def relative_error(x: float, xbar: float) -> float:
    if xbar == 0.0:
        raise ContractError("relative error undefined for xbar = 0")
    return abs(x - xbar) / abs(xbar)


def edge_density(image: Canvas, threshold: float = 0.5) -> float:
    """Mean of the binary Sobel mask over the image domain."""
    mask = sobel_edge_mask(image, threshold)
    return float(mask.data.mean())


def fill_density(image: Canvas) -> float:
    """Mean intensity over the image domain."""
    if image.channels != 1:
        raise ContractError("fill_density requires a single-channel image")
    return float(image.channel(0).mean())


@dataclass
class ShapeConstraint:
    """Match a binary target mask (precomputed edges, weights, baseline)."""

    target: Canvas
    target_edges: EdgeMask
    w_filled: float = W_FILLED
    sigma: float = SHAPE_SIGMA
    baseline: float = 0.0
    _weights: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    _denom: float = field(default=0.0, repr=False)
    _target_px: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    _pyramid: Pyramid = field(default=None, repr=False)  # type: ignore[assignment]

    @classmethod
    def from_target(cls, target: Canvas, w_filled: float = W_FILLED, sigma: float = SHAPE_SIGMA) -> "ShapeConstraint":
        edges = sobel_edge_mask(target)
        c = cls(target, edges, w_filled, sigma)
        c._weights = _pixel_weights(target, edges, w_filled)
        c._denom = float(c._weights.sum())
        c._target_px = target.channel(0)
        empty = float(np.sum(c._weights * (c._target_px == 0.0)))
        c.baseline = empty / c._denom
        if c.baseline >= 1.0:
            raise DegenerateConstraintError("all-empty target mask cannot be normalized")
        return c

    def sim(self, image: Canvas) -> float:
        if not image.same_shape(self.target):
            raise ContractError("image shape does not match the target")
        match = image.channel(0) == self._target_px
        return float(np.sum(self._weights * match) / self._denom)

    def normalized_similarity(self, image: Canvas) -> float:
        return (self.sim(image) - self.baseline) / (1.0 - self.baseline)

    def log_likelihood(self, canvas: Canvas, trace=None) -> float:
        return gaussian_logpdf(self.normalized_similarity(canvas), 1.0, self.sigma)

    def target_pyramid(self) -> Pyramid:
        if self._pyramid is None:
            self._pyramid = build_pyramid(self.target)
        return self._pyramid

    def prepare_canvas(self, canvas: Canvas) -> None:
        pass


def shape_log_likelihood(image: Canvas, constraint: ShapeConstraint) -> float:
    """Gaussian log density of the normalized similarity around 1."""
    return constraint.log_likelihood(image)


@dataclass
class CircuitConstraint:
    """Dense-edge, half-filled, stay-inside-the-die likelihood."""

    tau: float = CIRCUIT_TAU
    sigma: float = CIRCUIT_SIGMA
    die_bounds: tuple | None = None  # inclusive (x0, y0, x1, y1) pixel bounds
    oob_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ContractError("tau must be in (0,1)")

    def score(self, image: Canvas, oob_pixels: int, drawn_pixels: int) -> float:
        e = edge_density(image)
        f = fill_density(image)
        penalty = 1.0 - self.oob_weight * oob_pixels / max(1, drawn_pixels)
        return e * (1.0 - relative_error(f, self.tau)) * penalty

    def log_likelihood(self, canvas: Canvas, trace=None) -> float:
        return circuit_log_likelihood(canvas, canvas.oob_pixels, canvas.drawn_pixels, self)

    def target_pyramid(self) -> Pyramid | None:
        return None

    def prepare_canvas(self, canvas: Canvas) -> None:
        if self.die_bounds is not None:
            x0, y0, x1, y1 = self.die_bounds
            if not (0 <= x0 <= x1 < canvas.width and 0 <= y0 <= y1 < canvas.height):
                raise ContractError("die_bounds must lie inside the canvas")
            canvas.penalty_region = (x0, y0, x1, y1)


def circuit_log_likelihood(image: Canvas, oob_pixels: int, drawn_pixels: int, constraint: CircuitConstraint) -> float:
    s = constraint.score(image, oob_pixels, drawn_pixels)
    return gaussian_logpdf(s, 1.0, constraint.sigma)
