"""Parametric print-and-capture distortion chain used in place of a real camera.

A pipeline is an ordered list of stages, each a dict with a ``type`` key::

    {"type": "scale", "factor": 0.88}          bilinear downscale, letterboxed back (black)
    {"type": "brightness", "delta": 0.1}       global additive offset
    {"type": "gamma", "gamma": 1.2}            x ** gamma
    {"type": "gamut_clip", "strength": 0.5,    pull each pixel towards its nearest
     "palette": "default"}                     printable color ("default", file path or list)
    {"type": "blur", "passes": 1}              repeated 3x3 binomial (Gaussian) blur
    {"type": "noise", "sigma": 0.02}           additive Gaussian noise (only stochastic stage)
    {"type": "block_dct_quant", "quality": 75} 8x8 DCT quantisation with the JPEG luma table
    {"type": "keystone", "tilt": 0.1}          optional frontal-to-oblique warp, top edge narrowed

Every stage clamps its output to [0, 1] and preserves the frame size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .imagery import Patch, as_image, rng_stream
from .metrics import Metric, stencil
from .objective import Palette, default_palette, load_palette
from .patch_ops import TileSpec, tile_patch

# JPEG Annex K luminance table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

BINOMIAL3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0

# (parameter, lo, hi) per stage type; bounds are inclusive
STAGE_PARAMS = {
    "scale": [("factor", 1e-6, 1.0)],
    "brightness": [("delta", -1.0, 1.0)],
    "gamma": [("gamma", 0.5, 2.0)],
    "gamut_clip": [("strength", 0.0, 1.0)],
    "blur": [("passes", 0, 10)],
    "noise": [("sigma", 0.0, 0.5)],
    "block_dct_quant": [("quality", 10, 95)],
    "keystone": [("tilt", 0.0, 0.5)],
}


def _check_stage(stage: dict) -> dict:
    kind = stage.get("type")
    if kind not in STAGE_PARAMS:
        raise ValueError(f"unknown camsim stage {kind!r}; known: {sorted(STAGE_PARAMS)}")
    allowed = {"type"} | {name for name, _, _ in STAGE_PARAMS[kind]}
    if kind == "gamut_clip":
        allowed.add("palette")
    extra = set(stage) - allowed
    if extra:
        raise ValueError(f"stage {kind!r}: unknown keys {sorted(extra)}")
    for name, lo, hi in STAGE_PARAMS[kind]:
        if name not in stage:
            raise ValueError(f"stage {kind!r}: missing parameter {name!r}")
        v = stage[name]
        if not lo <= v <= hi:
            raise ValueError(f"stage {kind!r}: {name}={v} outside [{lo}, {hi}]")
    if kind == "scale" and stage["factor"] <= 0:
        raise ValueError("scale factor must be > 0")
    return dict(stage)


@dataclass(frozen=True)
class CamPipeline:
    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(_check_stage(dict(s)) for s in self.stages))

    @classmethod
    def from_json(cls, obj) -> "CamPipeline":
        """Accept a list of stages, ``{"stages": [...]}`` or ``{"camsim": {"stages": [...]}}``."""
        if isinstance(obj, dict):
            obj = obj.get("camsim", obj)
            obj = obj.get("stages", [])
        return cls(tuple(obj))

    @classmethod
    def load(cls, path) -> "CamPipeline":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> list:
        return [dict(s) for s in self.stages]

    def prepend(self, *stages) -> "CamPipeline":
        return CamPipeline(tuple(stages) + self.stages)


@dataclass(frozen=True)
class DistanceProfile:
    """Camera distance -> scale factor, linear in inverse distance (22/25/28 cm at 1.0)."""

    factors: dict = field(default_factory=lambda: {"near": 1.0, "mid": 0.88, "far": 0.79})

    def __post_init__(self):
        for k, v in self.factors.items():
            if not 0.0 < v <= 1.0:
                raise ValueError(f"distance factor {k}={v} outside (0, 1]")

    @classmethod
    def from_distances(cls, distances: dict, reference: float | None = None) -> "DistanceProfile":
        ref = reference if reference is not None else min(distances.values())
        return cls({k: ref / d for k, d in distances.items()})


# ---------------------------------------------------------------- stages

def resize_bilinear(x: np.ndarray, nh: int, nw: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a (C, H, W) array."""
    _, h, w = x.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(nh, h)
    c0, c1, fc = axis(nw, w)
    top = x[:, r0, :] * (1 - fr)[None, :, None] + x[:, r1, :] * fr[None, :, None]
    return top[:, :, c0] * (1 - fc)[None, None, :] + top[:, :, c1] * fc[None, None, :]


def _scale(x, factor):
    if factor == 1.0:
        return x
    _, h, w = x.shape
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    small = resize_bilinear(x, nh, nw)
    out = np.zeros_like(x)
    oy, ox = (h - nh) // 2, (w - nw) // 2
    out[:, oy:oy + nh, ox:ox + nw] = small
    return out


def _resolve_palette(spec) -> Palette:
    if spec is None or spec == "default":
        return default_palette()
    if isinstance(spec, str):
        return load_palette(spec)
    return Palette(np.asarray(spec, dtype=np.float64))


def _gamut_clip(x, strength, palette):
    if strength == 0.0:
        return x
    pal = _resolve_palette(palette).colors
    pix = x.reshape(3, -1).T
    d2 = np.sum((pix[:, None, :] - pal[None]) ** 2, axis=2)
    nearest = pal[np.argmin(d2, axis=1)].T.reshape(x.shape)
    return x + strength * (nearest - x)


def jpeg_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luma table."""
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((JPEG_LUMA * s + 50.0) / 100.0), 1.0, 255.0)


def _block_dct_quant(x, quality):
    c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x * 255.0 - 128.0, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hb, wb = xp.shape[1] // 8, xp.shape[2] // 8
    blocks = xp.reshape(c, hb, 8, wb, 8)
    coef = dctn(blocks, axes=(2, 4), norm="ortho")
    q = jpeg_table(quality)[None, None, :, None, :]
    rec = idctn(np.round(coef / q) * q, axes=(2, 4), norm="ortho")
    return (rec.reshape(c, hb * 8, wb * 8)[:, :h, :w] + 128.0) / 255.0


def _keystone(x, tilt):
    if tilt == 0.0:
        return x
    c, h, w = x.shape
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    cx = (w - 1) / 2.0
    shrink = 1.0 - tilt * (1.0 - rows / max(h - 1, 1))
    src = (cols[None, :] - cx) / shrink[:, None] + cx
    lo = np.floor(src).astype(int)
    f = src - lo
    valid = (src >= 0) & (src <= w - 1)
    lo_c = np.clip(lo, 0, w - 1)
    hi_c = np.clip(lo + 1, 0, w - 1)
    r = np.arange(h)[:, None]
    out = x[:, r, lo_c] * (1 - f) + x[:, r, hi_c] * f
    return out * valid


def simulate(img: np.ndarray, pipe: CamPipeline, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run ``img`` through the stages of ``pipe`` in order."""
    x = np.array(img, dtype=np.float64)
    for st in pipe.stages:
        kind = st["type"]
        if kind == "scale":
            x = _scale(x, st["factor"])
        elif kind == "brightness":
            x = x + st["delta"]
        elif kind == "gamma":
            x = np.clip(x, 0.0, 1.0) ** st["gamma"]
        elif kind == "gamut_clip":
            x = _gamut_clip(x, st["strength"], st.get("palette"))
        elif kind == "blur":
            for _ in range(int(st["passes"])):
                x = stencil(x, BINOMIAL3)
        elif kind == "noise":
            if rng is None:
                raise ValueError("noise stage needs an rng")
            if st["sigma"] > 0:
                x = x + rng.normal(0.0, st["sigma"], x.shape)
        elif kind == "block_dct_quant":
            x = _block_dct_quant(x, int(st["quality"]))
        elif kind == "keystone":
            x = _keystone(x, st["tilt"])
        x = np.clip(x, 0.0, 1.0)
    return as_image(x, copy=False)


# ---------------------------------------------------------------- wallpaper

def wallpaper_gain(background: np.ndarray, p: Patch, pipe: CamPipeline, metric: Metric,
                   seed: int = 0) -> float:
    """Score gain of a full-frame tiled patch over the bare background, both captured by ``pipe``.

    Both captures share one noise realisation so the gain isolates the patch.
    """
    _, h, w = background.shape
    if p.size > min(h, w):
        raise ValueError(f"background {h}x{w} smaller than the {p.size}px patch")
    tiled = tile_patch(background, p, TileSpec())
    attacked = simulate(tiled, pipe, rng_stream(seed, "camsim"))
    clean = simulate(background, pipe, rng_stream(seed, "camsim"))
    return metric.score(attacked) - metric.score(clean)


def distance_curve(background: np.ndarray, p: Patch, pipe: CamPipeline, metric: Metric,
                   profile: DistanceProfile = DistanceProfile(), seed: int = 0) -> dict:
    """Wallpaper gain per named distance (scale stage prepended to ``pipe``)."""
    return {
        name: wallpaper_gain(background, p, pipe.prepend({"type": "scale", "factor": f}),
                             metric, seed)
        for name, f in profile.factors.items()
    }
