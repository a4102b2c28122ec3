"""Universal patch training loop and the eight training variants.

Each iteration samples a mini-batch, places the patch at a fresh random
position (and 90-degree rotation when the variant uses rotation),
optionally relights every composited image, and takes one descent step on
:func:`tipatch.objective.total_loss`.  The patch is clamped to [0, 1]
after every step and projected to grayscale for black-white variants.  The
patch with the best validation gain is returned.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .imagery import Patch, Placement, rng_stream
from .metrics import Metric
from .objective import LossWeights, Palette, default_palette, total_loss
from .patch_ops import ROTATIONS, apply_patch, bw_array, draw_delta, random_placement


@dataclass(frozen=True)
class VariantConfig:
    name: str
    use_tv_nps: bool = False
    use_relight: bool = False
    use_rotation: bool = True
    use_bw: bool = False

    @property
    def slug(self) -> str:
        return SLUGS[self.name]


VARIANTS = (
    VariantConfig("Baseline"),
    VariantConfig("Baseline+TV+NPS", use_tv_nps=True),
    VariantConfig("BaselineL", use_relight=True),
    VariantConfig("BaselineL+", use_tv_nps=True, use_relight=True),
    VariantConfig("B-WBaselineL+", use_tv_nps=True, use_relight=True, use_bw=True),
    VariantConfig("B-WBaselineWRL+", use_tv_nps=True, use_relight=True, use_rotation=False,
                  use_bw=True),
    VariantConfig("BaselineWRL+", use_tv_nps=True, use_relight=True, use_rotation=False),
    VariantConfig("BaselineWR", use_rotation=False),
)
VARIANT_NAMES = tuple(v.name for v in VARIANTS)
SLUGS = {
    "Baseline": "baseline",
    "Baseline+TV+NPS": "baseline+tv+nps",
    "BaselineL": "baseline-l",
    "BaselineL+": "baseline-l+",
    "B-WBaselineL+": "bw-baseline-l+",
    "B-WBaselineWRL+": "bw-baseline-wrl+",
    "BaselineWRL+": "baseline-wrl+",
    "BaselineWR": "baseline-wr",
}


def _norm(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "").replace(" ", "")


def get_variant(name: str) -> VariantConfig:
    """Look a variant up by display name or slug, ignoring case and dashes."""
    for v in VARIANTS:
        if _norm(name) in (_norm(v.name), _norm(v.slug)):
            return v
    raise ValueError(f"unknown variant {name!r}; choose from {', '.join(SLUGS.values())}")


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 100
    batch_size: int = 16
    iterations: int = 2000
    step: float = 1.0 / 255.0
    optimizer: str = "sign"
    cosine: bool = True
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    relight_max_delta: float = 0.2
    val_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.optimizer not in ("sign", "adam"):
            raise ValueError(f"optimizer must be 'sign' or 'adam', got {self.optimizer!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


LOG_FIELDS = ("iter", "attack", "tv", "nps", "total", "val_gain")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    initial_val_gain: float | None = None
    best_iteration: int = 0
    best_val_gain: float | None = None

    @property
    def val_gains(self) -> list[tuple[int, float]]:
        out = [] if self.initial_val_gain is None else [(0, self.initial_val_gain)]
        return out + [(r["iter"], r["val_gain"]) for r in self.rows if r["val_gain"] is not None]

    def to_csv(self, comments=()) -> str:
        buf = io.StringIO()
        for c in comments:
            buf.write(f"# {c}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(LOG_FIELDS)
        if self.initial_val_gain is not None:
            wr.writerow([0, "", "", "", "", repr(self.initial_val_gain)])
        for r in self.rows:
            wr.writerow([r["iter"], *(repr(r[k]) for k in ("attack", "tv", "nps", "total")),
                         "" if r["val_gain"] is None else repr(r["val_gain"])])
        return buf.getvalue()


def init_patch(d: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform [0.25, 0.75] pixels, shape (3, d, d)."""
    if d < 2:
        raise ValueError("patch side must be >= 2")
    return rng.uniform(0.25, 0.75, (3, d, d))


def draw_placement(pos_rng, rot_rng, shape, d: int, with_rotation: bool) -> Placement:
    """Position and rotation come from separate streams, so toggling rotation keeps positions."""
    pl = random_placement(pos_rng, shape, d, with_rotation=False)
    if with_rotation:
        pl = pl._replace(rot=int(ROTATIONS[rot_rng.integers(0, 4)]))
    return pl


class _Validator:
    def __init__(self, images, metric: Metric, d: int, with_rotation: bool, seed: int):
        pos = rng_stream(seed, "val-position")
        rot = rng_stream(seed, "val-rotation")
        self.images = images
        self.metric = metric
        self.placements = [draw_placement(pos, rot, x.shape, d, with_rotation) for x in images]
        self.base = [metric.score(x) for x in images]

    def __call__(self, px: np.ndarray) -> float:
        gains = [self.metric.score(apply_patch(x, px, pl)) - b
                 for x, pl, b in zip(self.images, self.placements, self.base)]
        return float(np.mean(gains))


def _check_data(dataset, d: int, metric: Metric, what: str) -> None:
    if len(dataset) == 0:
        raise ValueError(f"{what} dataset is empty")
    for i, x in enumerate(dataset):
        if min(x.shape[1:]) < d:
            raise ValueError(f"{what} image {i} ({x.shape[1]}x{x.shape[2]}) smaller than patch {d}")
        metric._check_size(x)


def train(dataset, val_dataset, metric: Metric, vc: VariantConfig, tc: TrainConfig,
          palette: Palette | None = None, progress=None) -> tuple[Patch, TrainLog]:
    """Optimise a universal patch for ``vc`` and return the best-validation checkpoint."""
    d = tc.patch_size
    _check_data(dataset, d, metric, "training")
    _check_data(val_dataset, d, metric, "validation")
    if len(dataset) < tc.batch_size:
        raise ValueError(f"training set ({len(dataset)}) smaller than batch size {tc.batch_size}")
    palette = palette or default_palette()
    weights = tc.weights if vc.use_tv_nps else LossWeights(0.0, 0.0)

    px = init_patch(d, rng_stream(tc.seed, "init"))
    if vc.use_bw:
        px = bw_array(px)
    meta = {
        "variant": vc.name,
        "seed": tc.seed,
        "iterations": tc.iterations,
        "metric": metric.id,
        "tool_version": __version__,
    }
    log = TrainLog()
    if tc.iterations == 0:
        return Patch(px, {**meta, "best_iteration": 0}), log

    batch_rng = rng_stream(tc.seed, "batch")
    pos_rng = rng_stream(tc.seed, "position")
    rot_rng = rng_stream(tc.seed, "rotation")
    light_rng = rng_stream(tc.seed, "relight")
    validate = _Validator(val_dataset, metric, d, vc.use_rotation, tc.seed)

    best_px = px.copy()
    log.initial_val_gain = log.best_val_gain = validate(px)
    m = np.zeros_like(px)
    v = np.zeros_like(px)
    for t in range(1, tc.iterations + 1):
        idx = batch_rng.choice(len(dataset), size=tc.batch_size, replace=False)
        batch = [dataset[i] for i in idx]
        placements = [draw_placement(pos_rng, rot_rng, x.shape, d, vc.use_rotation) for x in batch]
        deltas = ([draw_delta(light_rng, tc.relight_max_delta) for _ in batch]
                  if vc.use_relight else None)
        lb = total_loss(batch, px, placements, metric, weights, palette=palette,
                        deltas=deltas, threads=tc.threads)

        lr = tc.step
        if tc.cosine:
            lr *= 0.5 * (1.0 + math.cos(math.pi * (t - 1) / tc.iterations))
        if tc.optimizer == "sign":
            px = px - lr * np.sign(lb.grad_patch)
        else:
            m = 0.9 * m + 0.1 * lb.grad_patch
            v = 0.999 * v + 0.001 * lb.grad_patch ** 2
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            px = px - lr * mh / (np.sqrt(vh) + 1e-8)
        px = np.clip(px, 0.0, 1.0)
        if vc.use_bw:
            px = bw_array(px)

        row = {"iter": t, "attack": lb.attack, "tv": lb.tv, "nps": lb.nps,
               "total": lb.total, "val_gain": None}
        if t % tc.val_every == 0 or t == tc.iterations:
            g = validate(px)
            row["val_gain"] = g
            if g > log.best_val_gain:
                log.best_val_gain, log.best_iteration = g, t
                best_px = px.copy()
        log.rows.append(row)
        if progress is not None:
            progress(row)

    meta.update(best_iteration=log.best_iteration, best_val_gain=log.best_val_gain)
    return Patch(best_px, meta), log


def train_all_variants(dataset, val_dataset, metric: Metric, tc: TrainConfig,
                       eval_sets: dict | None = None, palette: Palette | None = None,
                       eval_seed: int | None = None, progress=None):
    """Train all eight variants with one shared seed and evaluate each on ``eval_sets``.

    Returns ``(patches, logs, reports, table)`` where ``reports`` maps
    ``(variant, dataset)`` to an :class:`~tipatch.evalkit.EvalReport` and
    ``table`` is the :func:`~tipatch.evalkit.compare_report` grid.  Variants
    trained with rotation are evaluated with rotation.
    """
    from .evalkit import EvalProtocol, compare_report, evaluate

    eval_sets = eval_sets or {"val": val_dataset}
    seed = tc.seed if eval_seed is None else eval_seed
    patches, logs, reports = {}, {}, {}
    for vc in VARIANTS:
        p, log = train(dataset, val_dataset, metric, vc, tc, palette, progress)
        patches[vc.name], logs[vc.name] = p, log
        proto = EvalProtocol("image-random", rotation=vc.use_rotation, seed=seed)
        for ds_name, ds in eval_sets.items():
            reports[(vc.name, ds_name)] = evaluate(
                metric, ds, p, proto, meta={"variant": vc.name, "dataset": ds_name},
                timestamp=False)
    return patches, logs, reports, compare_report(reports, VARIANT_NAMES)


def config_dict(tc: TrainConfig) -> dict:
    return asdict(tc)


def with_overrides(tc: TrainConfig, **kw) -> TrainConfig:
    return replace(tc, **{k: v for k, v in kw.items() if v is not None})
