"""Attack loss, TV and NPS regularisers and the combined patch objective.

Every term returns its value together with the exact gradient with respect
to the patch pixels; the trainer descends on ``total``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .imagery import Patch, Placement
from .metrics import Metric
from .patch_ops import apply_patch, unrotate_array

EPS = 1e-8
_LOG_SPACE_ABOVE = 16


@dataclass(frozen=True)
class Palette:
    colors: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) == 0:
            raise ValueError(f"palette must be a non-empty (K, 3) array, got {c.shape}")
        if len(c) > 64:
            raise ValueError(f"palette has {len(c)} entries; at most 64 are supported")
        if c.min() < 0 or c.max() > 1:
            raise ValueError("palette colors must lie in [0, 1]")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("palette colors must be distinct")
        object.__setattr__(self, "colors", c)


def load_palette(path) -> Palette:
    """Read a text palette: one ``r g b`` triple per line, ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
        rows.append([float(v) for v in parts])
    return Palette(np.array(rows), name=Path(path).stem)


def default_palette() -> Palette:
    """27-point {0, .5, 1}^3 lattice plus grays 0.25, 0.75 and 0.9 (30 colors)."""
    pal = load_palette(resources.files("tipatch") / "data" / "default_palette.txt")
    return Palette(pal.colors, name="default30")


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 1e-4
    lambda_nps: float = 10.0

    def __post_init__(self):
        if self.lambda_tv < 0 or self.lambda_nps < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    attack: float
    tv: float
    nps: float
    total: float
    grad_patch: np.ndarray
    scores: tuple = ()


def attack_loss(score: float, m_range: float) -> float:
    if m_range <= 0:
        raise ValueError(f"metric range must be positive, got {m_range}")
    return 1.0 - score / m_range


def _px(p) -> np.ndarray:
    return p.pixels if isinstance(p, Patch) else np.asarray(p, dtype=np.float64)


def tv(p) -> tuple[float, np.ndarray]:
    """Smoothed isotropic total variation with forward differences, summed over channels.

    Each pixel contributes ``sqrt(dr^2 + dc^2 + EPS)`` where ``dr``/``dc`` are
    the differences to the next row/column; a missing neighbour contributes 0.
    """
    x = _px(p)
    if min(x.shape[1:]) < 2:
        raise ValueError("TV needs a patch of side >= 2")
    dr = np.zeros_like(x)
    dc = np.zeros_like(x)
    dr[:, :-1, :] = x[:, :-1, :] - x[:, 1:, :]
    dc[:, :, :-1] = x[:, :, :-1] - x[:, :, 1:]
    s = np.sqrt(dr * dr + dc * dc + EPS)
    gr = dr / s
    gc = dc / s
    grad = gr + gc
    grad[:, 1:, :] -= gr[:, :-1, :]
    grad[:, :, 1:] -= gc[:, :, :-1]
    return float(s.sum()), grad


def nps(p, pal: Palette) -> tuple[float, np.ndarray]:
    """Sum over pixels of the product of smoothed RGB distances to every palette color."""
    x = _px(p)
    pix = x.reshape(3, -1).T
    diff = pix[:, None, :] - pal.colors[None, :, :]
    d2 = np.sum(diff * diff, axis=2) + EPS
    dist = np.sqrt(d2)
    if len(pal.colors) > _LOG_SPACE_ABOVE:
        prod = np.exp(np.sum(np.log(dist), axis=1))
    else:
        prod = np.prod(dist, axis=1)
    gpix = prod[:, None] * np.sum(diff / d2[:, :, None], axis=1)
    return float(prod.sum()), gpix.T.reshape(x.shape)


def _attack_item(metric: Metric, img, px, pl: Placement, delta: float):
    comp = apply_patch(img, px, pl)
    if delta:
        shifted = comp + delta
        ev = metric.score_and_grad(np.clip(shifted, 0.0, 1.0))
        g = ev.gradient * ((shifted > 0.0) & (shifted < 1.0))
    else:
        ev = metric.score_and_grad(comp)
        g = ev.gradient
    d = px.shape[1]
    return ev.score, unrotate_array(g[:, pl.y:pl.y + d, pl.x:pl.x + d], pl.rot)


def total_loss(images, p, placements, metric: Metric, weights: LossWeights = LossWeights(),
               m_range: float | None = None, palette: Palette | None = None,
               deltas=None, threads: int = 1) -> LossBreakdown:
    """Batch-mean attack loss plus weighted TV and NPS, with the gradient w.r.t. the patch.

    ``deltas`` optionally gives one brightness offset per image, applied
    (with clamping) to the composited image before scoring.
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    if len(placements) != len(images):
        raise ValueError("need exactly one placement per image")
    if m_range is None:
        m_range = metric.descriptor.m_range
    if m_range <= 0:
        raise ValueError(f"metric range must be positive, got {m_range}")
    if palette is None:
        palette = default_palette()
    px = _px(p)
    deltas = [0.0] * len(images) if deltas is None else list(deltas)
    jobs = list(zip(images, placements, deltas))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda j: _attack_item(metric, j[0], px, j[1], j[2]), jobs))
    else:
        results = [_attack_item(metric, img, px, pl, dl) for img, pl, dl in jobs]
    n = len(images)
    attack = 0.0
    grad = np.zeros_like(px)
    for score, g in results:
        attack += attack_loss(score, m_range)
        grad -= g
    attack /= n
    grad /= n * m_range
    tv_val, tv_grad = tv(px)
    nps_val, nps_grad = nps(px, palette)
    total = attack + weights.lambda_tv * tv_val + weights.lambda_nps * nps_val
    grad = grad + weights.lambda_tv * tv_grad + weights.lambda_nps * nps_grad
    return LossBreakdown(attack, tv_val, nps_val, total, grad, tuple(s for s, _ in results))
