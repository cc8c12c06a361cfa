"""Circle-array stimuli for the numerical bisection task.

Six categories control different perceptual confounds:

* VarySize: radii drawn uniformly (with replacement) from a small set.
* ConstSize: every circle has the same radius.
* ConstArea / ConstAreaContour: total disc area is the same for every n.
* ConstCirc / ConstCircContour: total circumference is the same for every n.

Geometry is given at a 224 px reference frame and scaled linearly to the
requested resolution. Images are binary (white circles on black).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REFERENCE_RESOLUTION = 224
NUMEROSITIES = tuple(range(1, 8))
ANCHORS = (1, 2, 6, 7)
FEW, MANY, UNLABELED = "few", "many", "unlabeled"


class PlacementInfeasible(RuntimeError):
    def __init__(self, category, n, radii, attempts):
        self.category = category
        self.n = n
        self.radii = list(radii)
        self.attempts = attempts
        radii_txt = ", ".join(f"{r:.2f}" for r in self.radii)
        super().__init__(f"cannot place {n} circles for {category} after {attempts} "
                         f"rejections (radii: {radii_txt})")


class StimulusCategory(str, Enum):
    VARY_SIZE = "VarySize"
    CONST_SIZE = "ConstSize"
    CONST_AREA = "ConstArea"
    CONST_AREA_CONTOUR = "ConstAreaContour"
    CONST_CIRC = "ConstCirc"
    CONST_CIRC_CONTOUR = "ConstCircContour"

    @property
    def contour(self) -> bool:
        return self.value.endswith("Contour")

    @property
    def geometry(self) -> "StimulusCategory":
        """The filled category sharing this category's geometry."""
        return StimulusCategory(self.value.removesuffix("Contour"))

    def __str__(self) -> str:
        return self.value


CATEGORIES = tuple(StimulusCategory)


@dataclass(frozen=True)
class StimulusSpec:
    category: StimulusCategory
    resolution: int = REFERENCE_RESOLUTION
    vary_radii: tuple[float, ...] = (10.0, 35.0, 55.0)
    const_radius: float = 20.0
    reference_count: int = 4
    stroke_width: float = 2.0
    min_gap: float = 2.0
    margin: float = 2.0
    seed: int = 0
    max_attempts: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "category", StimulusCategory(self.category))
        object.__setattr__(self, "vary_radii", tuple(float(r) for r in self.vary_radii))
        if self.resolution < 1:
            raise ValueError("resolution must be positive")
        lengths = (*self.vary_radii, self.const_radius, self.stroke_width, self.min_gap, self.margin)
        if not self.vary_radii or min(lengths) <= 0 or self.reference_count < 1:
            raise ValueError("radii, widths, gaps and margins must be strictly positive")
        if self.margin + self.max_radius_reference >= REFERENCE_RESOLUTION / 2:
            raise ValueError("margin + largest radius must stay below half the frame")

    @property
    def scale(self) -> float:
        return self.resolution / REFERENCE_RESOLUTION

    @property
    def max_radius_reference(self) -> float:
        """Largest radius any numerosity in 1..7 can produce, at 224 px."""
        cat = self.category.geometry
        if cat is StimulusCategory.VARY_SIZE:
            return max(self.vary_radii)
        if cat is StimulusCategory.CONST_SIZE:
            return self.const_radius
        if cat is StimulusCategory.CONST_AREA:
            return self.const_radius * math.sqrt(self.reference_count)
        return self.const_radius * self.reference_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value
        d["vary_radii"] = list(self.vary_radii)
        return d


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class CircleLayout:
    circles: tuple[Circle, ...]
    category: StimulusCategory
    n: int

    def __post_init__(self):
        if len(self.circles) != self.n:
            raise ValueError(f"layout has {len(self.circles)} circles, expected {self.n}")

    def as_array(self) -> np.ndarray:
        return np.array([(c.cx, c.cy, c.r) for c in self.circles], dtype=float).reshape(-1, 3)


def label_for(n: int) -> str:
    if n in (1, 2):
        return FEW
    if n in (6, 7):
        return MANY
    return UNLABELED


# ---------------------------------------------------------------------------
# geometry


def radii_for(spec: StimulusSpec, n: int, rng: np.random.Generator) -> list[float]:
    """Radii (px at spec.resolution) for n circles under the spec's confound control."""
    if not 1 <= n <= 7:
        raise ValueError(f"numerosity {n} outside 1..7")
    cat = spec.category.geometry
    if cat is StimulusCategory.VARY_SIZE:
        base = [spec.vary_radii[i] for i in rng.integers(0, len(spec.vary_radii), size=n)]
    elif cat is StimulusCategory.CONST_SIZE:
        base = [spec.const_radius] * n
    elif cat is StimulusCategory.CONST_AREA:
        base = [spec.const_radius * math.sqrt(spec.reference_count / n)] * n
    else:
        base = [spec.const_radius * spec.reference_count / n] * n
    return [r * spec.scale for r in base]


def analytic_totals(spec: StimulusSpec, n: int) -> tuple[Fraction, Fraction | None]:
    """Exact (sum r^2, sum r) at reference scale for the constant-geometry categories.

    Total area is pi times the first value and total perimeter 2 pi times
    the second. Squared radii are kept rational, so the control relations
    hold exactly rather than to rounding error. The ConstArea perimeter is
    irrational and comes back as None; VarySize has no fixed totals.
    """
    if not 1 <= n <= 7:
        raise ValueError(f"numerosity {n} outside 1..7")
    cat = spec.category.geometry
    c = Fraction(spec.const_radius)
    k = spec.reference_count
    if cat is StimulusCategory.CONST_SIZE:
        return n * c * c, n * c
    if cat is StimulusCategory.CONST_AREA:
        r2 = c * c * Fraction(k, n)
        return n * r2, None
    if cat is StimulusCategory.CONST_CIRC:
        r = c * Fraction(k, n)
        return n * r * r, n * r
    raise ValueError("VarySize has no analytic total")


def _lattice_range(r: float, spec: StimulusSpec) -> tuple[int, int]:
    margin = spec.margin * spec.scale
    lo = r + margin - 0.25
    hi = spec.resolution - r - margin - 0.25
    return math.ceil(lo), math.floor(hi)


def place_circles(radii: Sequence[float], spec: StimulusSpec, rng: np.random.Generator,
                  n: int | None = None) -> CircleLayout:
    """Non-overlapping random placement by rejection sampling.

    Centres live on the lattice (k + 1/4, l + 1/4), which keeps the
    pixel-centre raster of every disc close to its analytic area. Circles
    are placed largest first; a circle that keeps failing restarts the
    whole layout. ``spec.max_attempts`` bounds the total rejections.
    """
    n = len(radii) if n is None else n
    gap = spec.min_gap * spec.scale
    res = spec.resolution
    total_area = sum(math.pi * r * r for r in radii)
    if total_area > res * res:
        raise PlacementInfeasible(spec.category, n, radii, 0)
    ranges = [_lattice_range(r, spec) for r in radii]
    if any(lo > hi for lo, hi in ranges):
        raise PlacementInfeasible(spec.category, n, radii, 0)
    order = sorted(range(len(radii)), key=lambda i: -radii[i])
    per_circle_limit = max(64, spec.max_attempts // 20)
    batch = 64
    rejections = 0
    while True:
        placed = np.empty((0, 3))
        centres: dict[int, tuple[float, float]] = {}
        stuck = False
        for i in order:
            r = radii[i]
            lo, hi = ranges[i]
            tries = 0
            while True:
                cand = rng.integers(lo, hi + 1, size=(batch, 2)) + 0.25
                if placed.size == 0:
                    first = 0
                else:
                    d2 = ((cand[:, None, :] - placed[None, :, :2]) ** 2).sum(axis=2)
                    ok = np.all(d2 >= (placed[None, :, 2] + r + gap) ** 2, axis=1)
                    first = int(np.argmax(ok)) if ok.any() else batch
                rejections += first
                tries += first
                if first < batch:
                    break
                if rejections >= spec.max_attempts:
                    raise PlacementInfeasible(spec.category, n, radii, rejections)
                if tries >= per_circle_limit:
                    stuck = True
                    break
            if stuck:
                break
            cx, cy = cand[first]
            centres[i] = (float(cx), float(cy))
            placed = np.vstack([placed, [cx, cy, r]])
        if not stuck:
            circles = tuple(Circle(*centres[i], float(radii[i])) for i in range(len(radii)))
            return CircleLayout(circles, spec.category, n)


def layout_violations(layout: CircleLayout, spec: StimulusSpec) -> list[str]:
    """Overlap and bounds violations (empty for a valid layout)."""
    out = []
    gap = spec.min_gap * spec.scale
    margin = spec.margin * spec.scale
    res = spec.resolution
    cs = layout.circles
    for i, c in enumerate(cs):
        for coord in (c.cx, c.cy):
            if not (c.r + margin <= coord <= res - c.r - margin):
                out.append(f"circle {i} out of bounds")
                break
        for j in range(i + 1, len(cs)):
            d = math.hypot(c.cx - cs[j].cx, c.cy - cs[j].cy)
            if d < c.r + cs[j].r + gap:
                out.append(f"circles {i} and {j} overlap")
    if len(cs) != layout.n:
        out.append("circle count mismatch")
    return out


def rasterize(layout: CircleLayout, spec: StimulusSpec, contour: bool | None = None) -> np.ndarray:
    """Binary uint8 image: pixel (x, y) is 1 iff its centre is inside a disc
    (filled) or within stroke_width/2 of a circle's boundary (contour)."""
    res = spec.resolution
    contour = spec.category.contour if contour is None else contour
    half_stroke = spec.stroke_width * spec.scale / 2
    img = np.zeros((res, res), dtype=np.uint8)
    for c in layout.circles:
        reach = c.r + (half_stroke if contour else 0.0) + 1
        x0, x1 = max(0, int(c.cx - reach)), min(res, int(c.cx + reach) + 1)
        y0, y1 = max(0, int(c.cy - reach)), min(res, int(c.cy + reach) + 1)
        ys = np.arange(y0, y1)[:, None] + 0.5
        xs = np.arange(x0, x1)[None, :] + 0.5
        d2 = (xs - c.cx) ** 2 + (ys - c.cy) ** 2
        if contour:
            hit = np.abs(np.sqrt(d2) - c.r) < half_stroke
        else:
            hit = d2 <= c.r * c.r
        img[y0:y1, x0:x1] |= hit.astype(np.uint8)
    return img


@dataclass(frozen=True)
class Features:
    analytic_area: float
    analytic_perimeter: float
    white_pixel_count: int


def measure_features(layout: CircleLayout, image: np.ndarray) -> Features:
    area = math.fsum(math.pi * c.r * c.r for c in layout.circles)
    perimeter = math.fsum(2 * math.pi * c.r for c in layout.circles)
    return Features(area, perimeter, int(np.count_nonzero(image)))


# ---------------------------------------------------------------------------
# datasets


def image_seed(dataset_seed: int, n: int, index: int) -> int:
    """64-bit per-image seed, a pure function of (dataset seed, n, index)."""
    ss = np.random.SeedSequence(dataset_seed, spawn_key=(n, index))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def generate_image(spec: StimulusSpec, n: int, seed: int,
                   max_redraws: int = 100) -> tuple[CircleLayout, np.ndarray]:
    """One stimulus. VarySize redraws its radii when a draw cannot be placed."""
    rng = np.random.default_rng(seed)
    redraws = max_redraws if spec.category.geometry is StimulusCategory.VARY_SIZE else 1
    for attempt in range(redraws):
        radii = radii_for(spec, n, rng)
        try:
            layout = place_circles(radii, spec, rng, n)
            break
        except PlacementInfeasible:
            if attempt == redraws - 1:
                raise
    return layout, rasterize(layout, spec)


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W] uint8 in {0, 1}
    numerosities: np.ndarray
    labels: list[str]
    categories: list[str]
    seeds: list[int]
    layouts: list[CircleLayout] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def counts(self) -> dict[int, int]:
        vals, cnt = np.unique(self.numerosities, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, cnt)}

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset(self.images[idx], self.numerosities[idx],
                       [self.labels[i] for i in idx], [self.categories[i] for i in idx],
                       [self.seeds[i] for i in idx],
                       [self.layouts[i] for i in idx] if self.layouts else [])

    def content_bytes(self) -> bytes:
        """Canonical serialization used for content hashing."""
        meta = json.dumps({"n": self.numerosities.tolist(), "labels": self.labels,
                           "categories": self.categories, "seeds": self.seeds,
                           "shape": list(self.images.shape)}, sort_keys=True)
        return meta.encode() + b"\0" + np.ascontiguousarray(self.images, dtype=np.uint8).tobytes()

    @staticmethod
    def concat(parts: Iterable["Dataset"]) -> "Dataset":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.images for p in parts]),
                       np.concatenate([p.numerosities for p in parts]),
                       [x for p in parts for x in p.labels],
                       [x for p in parts for x in p.categories],
                       [x for p in parts for x in p.seeds],
                       [x for p in parts for x in p.layouts])


def generate_dataset(spec: StimulusSpec, numerosities: Iterable[int],
                     count_per_numerosity: int) -> Dataset:
    """count_per_numerosity images for each n; anchors get few/many labels."""
    if count_per_numerosity < 0:
        raise ValueError("count must be non-negative")
    images, ns, labels, seeds, layouts = [], [], [], [], []
    for n in sorted(set(numerosities)):
        for index in range(count_per_numerosity):
            seed = image_seed(spec.seed, n, index)
            layout, img = generate_image(spec, n, seed)
            images.append(img)
            ns.append(n)
            labels.append(label_for(n))
            seeds.append(seed)
            layouts.append(layout)
    res = spec.resolution
    stack = np.stack(images) if images else np.zeros((0, res, res), dtype=np.uint8)
    return Dataset(stack, np.array(ns, dtype=int), labels,
                   [spec.category.value] * len(labels), seeds, layouts)


def feature_rows(dataset: Dataset) -> list[dict]:
    """Per-image audit rows; area comparisons use the filled raster."""
    rows = []
    counters: dict[int, int] = {}
    for layout, img, n, cat in zip(dataset.layouts, dataset.images, dataset.numerosities, dataset.categories):
        n = int(n)
        index = counters.get(n, 0)
        counters[n] = index + 1
        f = measure_features(layout, img)
        rows.append({"category": cat, "n": n, "index": index,
                     "analytic_area": repr(f.analytic_area),
                     "analytic_perimeter": repr(f.analytic_perimeter),
                     "white_pixel_count": f.white_pixel_count})
    return rows


def write_feature_audit(dataset: Dataset, path) -> None:
    cols = ["category", "n", "index", "analytic_area", "analytic_perimeter", "white_pixel_count"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(feature_rows(dataset))


def export_dataset(dataset: Dataset, out_dir, prefix: str = "img") -> Path:
    """One 8-bit grayscale PNG per image plus manifest.json; returns the manifest path."""
    from PIL import Image as PILImage

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[int, int] = {}
    for i, (img, n) in enumerate(zip(dataset.images, dataset.numerosities)):
        n = int(n)
        index = counters.get(n, 0)
        counters[n] = index + 1
        name = f"{prefix}_n{n}_{index:04d}.png"
        PILImage.fromarray((img * 255).astype(np.uint8), mode="L").save(out / name)
        layout = dataset.layouts[i] if dataset.layouts else None
        feats = measure_features(layout, img) if layout is not None else None
        entries.append({
            "path": name, "category": dataset.categories[i], "numerosity": n,
            "label": dataset.labels[i], "seed": dataset.seeds[i],
            "analytic_area": feats.analytic_area if feats else None,
            "analytic_perimeter": feats.analytic_perimeter if feats else None,
            "white_pixel_count": feats.white_pixel_count if feats else None,
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"images": entries}, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


def with_resolution(spec: StimulusSpec, resolution: int) -> StimulusSpec:
    return replace(spec, resolution=resolution)
