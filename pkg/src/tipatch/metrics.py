"""Differentiable no-reference quality metrics.

A metric maps an image to a score in ``[range_lo, range_hi]`` and exposes
the exact gradient of that score with respect to every pixel.  Two
reference metrics are built in:

``proxy``
    A hand-crafted sharpness/contrast/colourfulness score squashed through a
    logistic to [0, 100].
``tinycnn``
    A two-layer convolutional network with a hand-written backward pass,
    shipped with one deterministic weight file.

Anything implementing :class:`Metric` can be attacked by the trainer.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .imagery import as_image, read_tipf, rng_stream, write_tipf


@dataclass(frozen=True)
class MetricDescriptor:
    id: str
    range_lo: float = 0.0
    range_hi: float = 100.0
    min_size: int = 1

    def __post_init__(self):
        if not self.range_hi > self.range_lo:
            raise ValueError("metric range must satisfy range_hi > range_lo")

    @property
    def m_range(self) -> float:
        return self.range_hi - self.range_lo


@dataclass(frozen=True)
class MetricEval:
    score: float
    gradient: np.ndarray


class Metric(ABC):
    """Score + gradient interface.

    Subclasses implement :meth:`_evaluate` on a raw float64 ``(3, H, W)``
    array; the public methods add validation.  ``_evaluate`` does not
    require values in [0, 1] so finite-difference probes may step past the
    boundary.
    """

    descriptor: MetricDescriptor

    @property
    def id(self) -> str:
        return self.descriptor.id

    def _check_size(self, x: np.ndarray) -> None:
        n = self.descriptor.min_size
        if x.shape[1] < n or x.shape[2] < n:
            raise ValueError(
                f"metric {self.id!r} needs images of at least {n}x{n}, got {x.shape[1]}x{x.shape[2]}"
            )

    @abstractmethod
    def _evaluate(self, x: np.ndarray, need_grad: bool) -> tuple[float, np.ndarray | None]:
        ...

    def score(self, img: np.ndarray) -> float:
        x = as_image(img, copy=False)
        self._check_size(x)
        s, _ = self._evaluate(x, False)
        return self._checked(s)

    def score_and_grad(self, img: np.ndarray) -> MetricEval:
        x = as_image(img, copy=False)
        self._check_size(x)
        s, g = self._evaluate(x, True)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"metric {self.id!r} produced a non-finite gradient")
        return MetricEval(self._checked(s), g)

    def _checked(self, s: float) -> float:
        d = self.descriptor
        assert d.range_lo <= s <= d.range_hi, f"score {s} outside metric range"
        return s


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


# ------------------------------------------------------- 3x3 stencils (edge pad)

BOX3 = np.full((3, 3), 1.0 / 9.0)
LAPLACE4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def stencil(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """3x3 correlation of each channel with replicate padding."""
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                out += k[a, b] * xp[:, a:a + h, b:b + w]
    return out


def stencil_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Transpose of :func:`stencil`: scatter into the padded frame, then fold the border back."""
    c, h, w = g.shape
    gp = np.zeros((c, h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                gp[:, a:a + h, b:b + w] += k[a, b] * g
    gp[:, 1, :] += gp[:, 0, :]
    gp[:, -2, :] += gp[:, -1, :]
    gp[:, :, 1] += gp[:, :, 0]
    gp[:, :, -2] += gp[:, :, -1]
    return gp[:, 1:-1, 1:-1]


# ---------------------------------------------------------------- proxy metric

def proxy_features(x: np.ndarray) -> tuple[float, float, float]:
    """(contrast, saturation, sharpness) of an image, each a mean over all 3*H*W entries."""
    n = x.size
    d = x - stencil(x, BOX3)
    contrast = float(np.sum(d * d)) / n
    dev = x - x.mean(axis=0, keepdims=True)
    saturation = float(np.sum(dev * dev)) / n
    lap = stencil(x, LAPLACE4)
    sharpness = float(np.sum(lap * lap)) / n
    return contrast, saturation, sharpness


# Median feature values of 64 synthetic 64x64 images (synth_dataset, seed 0),
# frozen so that the metric does not depend on the corpus at run time.
PROXY_REFERENCE = (0.00083975, 0.04384899, 0.00838366)
# Each feature is normalised by 300x its reference value, so the weighted sum is
# 0.01 on a typical image and the offset sits at half of that.  With slope 8 a
# constant image scores 100*sigmoid(-0.04) ~= 49.0, a typical one ~= 51.0 and
# uniform noise ~= 99.9 without saturating to the last digit.
PROXY_SLOPE = 8.0
PROXY_WEIGHTS = tuple(1.0 / (300.0 * f) for f in PROXY_REFERENCE)
PROXY_OFFSET = 0.5 * sum(w * f for w, f in zip(PROXY_WEIGHTS, PROXY_REFERENCE))


class ProxyMetric(Metric):
    """``100 * sigmoid(a * (w_c*contrast + w_s*saturation + w_h*sharpness - b))``.

    contrast
        mean squared difference between the image and its 3x3 box blur
    saturation
        mean over pixels of the (population) variance across channels
    sharpness
        mean squared 4-neighbour Laplacian

    Both stencils use replicate padding, so every feature vanishes on a
    constant image.
    """

    def __init__(self, slope: float = PROXY_SLOPE, weights=PROXY_WEIGHTS,
                 offset: float = PROXY_OFFSET):
        self.descriptor = MetricDescriptor("proxy", 0.0, 100.0, min_size=8)
        self.slope = float(slope)
        self.weights = tuple(float(w) for w in weights)
        self.offset = float(offset)

    def _evaluate(self, x, need_grad):
        n = x.size
        wc, ws, wh = self.weights
        d = x - stencil(x, BOX3)
        dev = x - x.mean(axis=0, keepdims=True)
        lap = stencil(x, LAPLACE4)
        u = (wc * float(np.sum(d * d)) + ws * float(np.sum(dev * dev))
             + wh * float(np.sum(lap * lap))) / n
        sig = _sigmoid(self.slope * (u - self.offset))
        score = 100.0 * sig
        if not need_grad:
            return score, None
        du = (2.0 / n) * (
            wc * (d - stencil_adjoint(d, BOX3))
            + ws * dev
            + wh * stencil_adjoint(lap, LAPLACE4)
        )
        return score, (100.0 * sig * (1.0 - sig) * self.slope) * du


# ---------------------------------------------------------------- TinyCNN

CNN_SHAPES = {
    "conv1": ((8, 3, 3, 3), (8,)),
    "conv2": ((16, 8, 3, 3), (16,)),
    "head": ((16,), (1,)),
}
CANONICAL_SEED = 0xC0FFEE


@dataclass(frozen=True)
class TinyCnnWeights:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        for name, (ws, bs) in CNN_SHAPES.items():
            w = np.asarray(getattr(self, f"{name}_w"), dtype=np.float64)
            b = np.asarray(getattr(self, f"{name}_b"), dtype=np.float64)
            if w.shape != ws or b.shape != bs:
                raise ValueError(f"{name}: expected shapes {ws}/{bs}, got {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"{name}: non-finite weights")
            object.__setattr__(self, f"{name}_w", w)
            object.__setattr__(self, f"{name}_b", b)

    @classmethod
    def zeros(cls) -> "TinyCnnWeights":
        kw = {}
        for name, (ws, bs) in CNN_SHAPES.items():
            kw[f"{name}_w"] = np.zeros(ws)
            kw[f"{name}_b"] = np.zeros(bs)
        return cls(**kw)

    @classmethod
    def generate(cls, seed: int = CANONICAL_SEED) -> "TinyCnnWeights":
        """Fan-in scaled init: every weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = rng_stream(seed, "tinycnn-init")
        kw = {}
        for name, (ws, bs) in CNN_SHAPES.items():
            fan_in = int(np.prod(ws[1:])) if len(ws) > 1 else ws[0]
            bound = 1.0 / math.sqrt(fan_in)
            # round through f32 so generated and stored weights agree exactly
            kw[f"{name}_w"] = rng.uniform(-bound, bound, ws).astype(np.float32).astype(np.float64)
            kw[f"{name}_b"] = rng.uniform(-bound, bound, bs).astype(np.float32).astype(np.float64)
        return cls(**kw)

    def flat(self) -> np.ndarray:
        parts = []
        for name in CNN_SHAPES:
            parts += [getattr(self, f"{name}_w").ravel(), getattr(self, f"{name}_b").ravel()]
        return np.concatenate(parts)

    def save(self, path, **meta) -> None:
        sections = [
            {"name": name, "weight": list(ws), "bias": list(bs)}
            for name, (ws, bs) in CNN_SHAPES.items()
        ]
        flat = self.flat()
        write_tipf(path, flat.reshape(1, 1, -1),
                   {"kind": "tinycnn-weights", "sections": sections, **meta})

    @classmethod
    def load(cls, path) -> "TinyCnnWeights":
        payload, meta = read_tipf(path)
        if meta.get("kind") != "tinycnn-weights":
            raise ValueError(f"{path}: not a tinycnn weight file (kind={meta.get('kind')!r})")
        flat = payload.astype(np.float64).ravel()
        kw = {}
        pos = 0
        for sec, (name, (ws, bs)) in zip(meta.get("sections", []), CNN_SHAPES.items()):
            if sec.get("name") != name or tuple(sec["weight"]) != ws or tuple(sec["bias"]) != bs:
                raise ValueError(f"{path}: section {sec} does not match expected {name} {ws}/{bs}")
            for key, shape in (("w", ws), ("b", bs)):
                size = int(np.prod(shape))
                if pos + size > flat.size:
                    raise ValueError(f"{path}: payload too short for section {name}")
                kw[f"{name}_{key}"] = flat[pos:pos + size].reshape(shape)
                pos += size
        if len(kw) != 2 * len(CNN_SHAPES) or pos != flat.size:
            raise ValueError(f"{path}: weight payload has {flat.size} values, expected {pos}")
        return cls(**kw)


def canonical_weights_path() -> Path:
    return Path(str(resources.files("tipatch") / "data" / "tinycnn_c0ffee.tipf"))


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(C, h+2, w+2) padded input -> (h*w, C*9) patches, channel-major like the kernels."""
    cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return cols.transpose(1, 2, 0, 3, 4).reshape(h * w, -1)


def _col2im(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    d = dcols.reshape(h, w, c, 3, 3)
    out = np.zeros((c, h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            out[:, a:a + h, b:b + w] += d[:, :, :, a, b].transpose(2, 0, 1)
    return out[:, 1:-1, 1:-1]


def _conv(x, weight, bias):
    c, h, w = x.shape
    cols = _im2col(np.pad(x, ((0, 0), (1, 1), (1, 1))), h, w)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.T.reshape(weight.shape[0], h, w)


def _conv_backward_input(dout, weight, in_ch):
    o, h, w = dout.shape
    dcols = dout.reshape(o, h * w).T @ weight.reshape(o, -1)
    return _col2im(dcols, in_ch, h, w)


class TinyCnnMetric(Metric):
    """conv3x3 -> ReLU -> avgpool2 -> conv3x3 -> ReLU -> global mean -> linear -> 100*sigmoid."""

    def __init__(self, weights: TinyCnnWeights | None = None):
        self.descriptor = MetricDescriptor("tinycnn", 0.0, 100.0, min_size=32)
        if weights is None:
            weights = TinyCnnWeights.load(canonical_weights_path())
        self.weights = weights

    def _evaluate(self, x, need_grad):
        wt = self.weights
        _, h, w = x.shape
        a1 = _conv(x, wt.conv1_w, wt.conv1_b)
        r1 = np.maximum(a1, 0.0)
        h2, w2 = h // 2, w // 2
        p1 = r1[:, :2 * h2, :2 * w2].reshape(8, h2, 2, w2, 2).mean(axis=(2, 4))
        a2 = _conv(p1, wt.conv2_w, wt.conv2_b)
        r2 = np.maximum(a2, 0.0)
        feat = r2.mean(axis=(1, 2))
        z = float(feat @ wt.head_w + wt.head_b[0])
        sig = _sigmoid(z)
        score = 100.0 * sig
        if not need_grad:
            return score, None
        dz = 100.0 * sig * (1.0 - sig)
        da2 = np.broadcast_to((dz * wt.head_w / (h2 * w2))[:, None, None], a2.shape) * (a2 > 0)
        dp1 = _conv_backward_input(da2, wt.conv2_w, 8)
        dr1 = np.zeros_like(r1)
        dr1[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(dp1 / 4.0, 2, axis=1), 2, axis=2)
        da1 = dr1 * (a1 > 0)
        return score, _conv_backward_input(da1, wt.conv1_w, 3)


# ---------------------------------------------------------------- registry

def get_metric(name: str, weights_path=None) -> Metric:
    if name == "proxy":
        return ProxyMetric()
    if name == "tinycnn":
        return TinyCnnMetric(TinyCnnWeights.load(weights_path) if weights_path else None)
    raise ValueError(f"unknown metric {name!r}; choose 'proxy' or 'tinycnn'")


# ---------------------------------------------------------------- FD checks

def fd_check(f, x: np.ndarray, grad: np.ndarray, probes: int = 25, step: float = 1e-4,
             seed: int = 0) -> float:
    """Max relative error between ``grad`` and central differences of ``f`` at random entries."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if step <= 0:
        raise ValueError("step must be > 0")
    rng = rng_stream(seed, "fd-probes")
    x = np.array(x, dtype=np.float64)
    idx = rng.choice(x.size, size=min(probes, x.size), replace=False)
    worst = 0.0
    for i in idx:
        flat = x.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(grad.reshape(-1)[i] - fd) / max(1e-12, abs(fd)))
    return worst


def grad_check(metric: Metric, img: np.ndarray, probes: int = 25, step: float = 1e-4,
               seed: int = 0) -> float:
    x = np.asarray(img, dtype=np.float64)
    metric._check_size(x)
    _, g = metric._evaluate(x, True)
    return fd_check(lambda z: metric._evaluate(z, False)[0], x, g, probes, step, seed)
