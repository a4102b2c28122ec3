"""Metric-gain protocols, summary statistics, Lp norms, synthetic data and comparison tables.

Report JSON (``EvalReport.to_json``)::

    {"gains": [...], "n": int, "mean": float, "std": float, "ci95": float,
     "footprint": float, "protocol": {...}, "meta": {...}, "timestamp": str}

``std`` is the sample standard deviation (0 when n == 1) and ``ci95`` the
normal-approximation half-width ``1.96 * std / sqrt(n)``.  For video
datasets each entry of ``gains`` is one video's mean per-frame gain.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camsim import CamPipeline, resize_bilinear, simulate, wallpaper_gain
from .imagery import Patch, dequantize, list_images, load_image, quantize, rng_stream, save_image
from .metrics import Metric
from .patch_ops import TileSpec, apply_patch, random_placement, tile_coverage, tile_patch

MODES = ("image-random", "video-fixed", "tiled", "wallpaper")
Z95 = 1.96


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "image-random"
    rotation: bool = False
    seed: int = 0
    pipeline: CamPipeline = field(default_factory=CamPipeline)
    tile: TileSpec = field(default_factory=TileSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown protocol mode {self.mode!r}; choose from {MODES}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "rotation": self.rotation,
            "seed": self.seed,
            "pipeline": self.pipeline.to_json(),
            "tile": {"region": self.tile.region, "gap": self.tile.gap,
                     "crop_partial": self.tile.crop_partial},
        }


@dataclass
class EvalReport:
    gains: list
    n: int
    mean: float
    std: float
    ci95: float
    footprint: float = 0.0
    protocol: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    timestamp: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(**obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def summarize(gains) -> tuple[float, float, float]:
    """(mean, sample std, 95% CI half-width) of a non-empty list."""
    g = np.asarray(gains, dtype=np.float64)
    if g.size == 0:
        raise ValueError("cannot summarise an empty gain list")
    mean = float(np.mean(g))
    std = float(np.std(g, ddof=1)) if g.size > 1 else 0.0
    return mean, std, Z95 * std / math.sqrt(g.size)


def make_report(gains, protocol: dict | None = None, meta: dict | None = None,
                footprint: float = 0.0, timestamp: bool = True) -> EvalReport:
    mean, std, ci = summarize(gains)
    ts = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if timestamp else ""
    return EvalReport([float(v) for v in gains], len(gains), mean, std, ci, footprint,
                      protocol or {}, meta or {}, ts)


def metric_gain(metric: Metric, original: np.ndarray, attacked: np.ndarray) -> float:
    if original.shape != attacked.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {attacked.shape}")
    return metric.score(attacked) - metric.score(original)


def _captured_gain(metric, original, attacked, pipe: CamPipeline, seed: int, i: int) -> float:
    if not pipe.stages:
        return metric_gain(metric, original, attacked)
    label = f"eval-camsim-{i}"
    return metric_gain(metric, simulate(original, pipe, rng_stream(seed, label)),
                       simulate(attacked, pipe, rng_stream(seed, label)))


def evaluate(metric: Metric, dataset, p: Patch, proto: EvalProtocol = EvalProtocol(),
             meta: dict | None = None, timestamp: bool = True) -> EvalReport:
    """Gain of ``p`` over ``dataset`` under ``proto``.

    ``dataset`` is a list of images, or for ``video-fixed`` a list of videos,
    each a list of frames.  Frames of one video share one placement; gains
    are averaged per video first, then across videos.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    d = p.size
    rng = rng_stream(proto.seed, "eval-placement")
    gains, fractions = [], []
    for i, item in enumerate(dataset):
        frames = list(item) if proto.mode == "video-fixed" else [item]
        if not frames:
            raise ValueError(f"video {i} has no frames")
        for f in frames:
            if min(f.shape[1:]) < d:
                raise ValueError(f"item {i} ({f.shape[1]}x{f.shape[2]}) smaller than the {d}px patch")
        if proto.mode in ("image-random", "video-fixed"):
            pl = random_placement(rng, frames[0].shape, d, proto.rotation)
            per = [_captured_gain(metric, f, apply_patch(f, p, pl), proto.pipeline, proto.seed, i)
                   for f in frames]
            fractions.append(d * d / (frames[0].shape[1] * frames[0].shape[2]))
        elif proto.mode == "tiled":
            per = [_captured_gain(metric, f, tile_patch(f, p, proto.tile), proto.pipeline,
                                  proto.seed, i) for f in frames]
            fractions.append(tile_coverage(frames[0].shape, d, proto.tile))
        else:
            per = [wallpaper_gain(f, p, proto.pipeline, metric, proto.seed) for f in frames]
            fractions.append(tile_coverage(frames[0].shape, d, TileSpec()))
        gains.append(float(np.mean(per)))
    meta = {"metric": metric.id, "patch": dict(p.meta), "patch_size": d, **(meta or {})}
    return make_report(gains, proto.to_json(), meta, float(np.mean(fractions)), timestamp)


def lp_norm(a: np.ndarray, b: np.ndarray, order) -> float:
    """L0 (count of differing entries), L1, L2 or L-inf distance between two images."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if order == 0:
        return float(np.count_nonzero(diff))
    if order == 1:
        return float(diff.sum())
    if order == 2:
        return float(np.sqrt(np.sum(diff * diff)))
    if order in (np.inf, "inf", math.inf):
        return float(diff.max())
    raise ValueError(f"unsupported norm order {order!r}")


# -------------------------------------------------------------- synthetic data

def synth_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One procedural test image: gradient + value noise + checkerboard + flat rectangles."""
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    # two octaves of bilinear value noise
    for cells, amp in ((4, 0.25), (12, 0.08)):
        grid = rng.uniform(-1, 1, (3, cells + 1, cells + 1))
        img = img + amp * resize_bilinear(grid, h, w)

    # a low-contrast checkerboard in a random window
    cell = int(rng.integers(max(2, min(h, w) // 16), max(3, min(h, w) // 4) + 1))
    board = (((yy // cell) + (xx // cell)) % 2).astype(np.float64)
    y0, x0 = int(rng.integers(0, h // 2)), int(rng.integers(0, w // 2))
    win = np.zeros((h, w))
    win[y0:y0 + int(rng.integers(h // 4, h // 2 + 1)), x0:x0 + int(rng.integers(w // 4, w // 2 + 1))] = 1
    img = img + rng.uniform(0.05, 0.25) * (board - 0.5) * win

    for _ in range(int(rng.integers(1, 4))):
        rh, rw = int(rng.integers(h // 8, h // 3 + 1)), int(rng.integers(w // 8, w // 3 + 1))
        ry, rx = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        img[:, ry:ry + rh, rx:rx + rw] = rng.uniform(0, 1, 3)[:, None, None]

    return dequantize(quantize(np.clip(img, 0.0, 1.0)))


def synth_dataset(n: int, h: int, w: int, seed: int) -> list[np.ndarray]:
    """``n`` deterministic synthetic images; image ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if h < 32 or w < 32:
        raise ValueError("synthetic images must be at least 32x32")
    return [synth_image(rng_stream(seed, f"synth-{i}"), h, w) for i in range(n)]


def save_dataset(images, directory, comments=()) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{i:05d}.ppm"
        save_image(img, path, comments)
        paths.append(path)
    return paths


def load_video_dir(directory) -> list[list[np.ndarray]]:
    """Each sub-directory of ``directory`` is one video; its images are frames in name order."""
    videos = [d for d in sorted(Path(directory).iterdir()) if d.is_dir()]
    if not videos:
        raise FileNotFoundError(f"no video sub-directories in {directory}")
    return [[load_image(f) for f in list_images(v)] for v in videos]


# -------------------------------------------------------------- comparison

CELL_RE = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*±\s*(\d+(?:\.\d+)?)\s*$")


def format_cell(mean: float, ci95: float) -> str:
    return f"{mean:.2f} ± {ci95:.2f}"


def parse_cell(text: str) -> tuple[float, float]:
    m = CELL_RE.match(text)
    if not m:
        raise ValueError(f"not a 'mean ± ci95' cell: {text!r}")
    return float(m.group(1)), float(m.group(2))


def compare_report(reports, row_order=None) -> dict:
    """Variant x dataset grid of ``mean ± ci95`` cells.

    ``reports`` maps ``(variant, dataset)`` to :class:`EvalReport`, or is a
    list of reports whose ``meta`` carries ``variant`` and ``dataset``.
    Cell ``mean``/``ci95`` are rounded to the two decimals shown in ``text``;
    ``raw`` keeps the per-item gains.
    """
    if isinstance(reports, dict):
        items = list(reports.items())
    else:
        items = [((r.meta.get("variant", "patch"), r.meta.get("dataset", "data")), r)
                 for r in reports]
    if not items:
        raise ValueError("need at least one report")
    rows, cols = [], []
    for (v, d), _ in items:
        if v not in rows:
            rows.append(v)
        if d not in cols:
            cols.append(d)
    if row_order:
        rows = [r for r in row_order if r in rows] + [r for r in rows if r not in row_order]
    cells = {}
    for (v, d), r in items:
        cells.setdefault(v, {})[d] = {
            "text": format_cell(r.mean, r.ci95),
            "mean": round(r.mean, 2),
            "ci95": round(r.ci95, 2),
            "n": r.n,
            "raw": list(r.gains),
        }
    return {"rows": rows, "columns": cols, "cells": cells}


def comparison_csv(table: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["variant", *table["columns"]])
    for v in table["rows"]:
        wr.writerow([v, *(table["cells"].get(v, {}).get(d, {}).get("text", "") for d in table["columns"])])
    return buf.getvalue()
