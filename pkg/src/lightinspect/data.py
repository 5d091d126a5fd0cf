"""Synthetic light-guide-plate images, split protocol, and PNG directory I/O.

The generator renders clean plates as a bright dot lattice over a smooth
brightness gradient plus sensor noise; defective plates add 1-3 injected
defects (scratches, bright/dark spots, impurities) onto an otherwise
identical twin.  Every image's random stream is derived from (seed, index),
so generation is order-independent and reproducible bit for bit.

Real data drops in through ``load_directory``: 8-bit grayscale PNGs named
``<id>_<OK|NG>*.png`` at exactly 224x224.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

IMAGE_SIDE = 224
LABEL_CLEAN = 0
LABEL_DEFECTIVE = 1
DEFECT_KINDS = ("scratch", "bright_spot", "dark_spot", "impurity")

# every injected defect must move at least this many pixels by at least
# this much intensity, or it gets re-rolled
MIN_DEFECT_PIXELS = 20
MIN_DEFECT_DELTA = 0.05

NOISE_SIGMA = 0.01


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    x: int
    y: int
    size: int            # length in px for scratches, radius for spots/blobs
    delta: float         # signed intensity change

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}")


@dataclass
class SampleSet:
    """Labeled grayscale plates with optional train/test split tags."""

    images: np.ndarray                 # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray                 # (N,) int, 0 clean / 1 defective
    split: np.ndarray | None = None    # (N,) '<U5' of 'train' / 'test'
    generator_seed: int | str = "external"
    defects: list[list[DefectSpec]] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N,1,H,W), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels length does not match images")

    def __len__(self):
        return len(self.images)

    def _arrays(self, tag: str):
        if self.split is None:
            raise ValueError("sample set has no split; call split() first")
        mask = self.split == tag
        return self.images[mask], self.labels[mask]

    def train_arrays(self):
        return self._arrays("train")

    def test_arrays(self):
        return self._arrays("test")


def _image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image stream: hash of (seed, index), stable across orderings."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _disk_mask(h: int, w: int, cy: int, cx: int, radius: float) -> tuple:
    y0, y1 = max(0, cy - int(radius) - 1), min(h, cy + int(radius) + 2)
    x0, x1 = max(0, cx - int(radius) - 1), min(w, cx + int(radius) + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    return (slice(y0, y1), slice(x0, x1)), mask


def render_clean_plate(rng: np.random.Generator, side: int = IMAGE_SIDE) -> np.ndarray:
    """Dot lattice over a smooth gradient; no noise (added by the caller)."""
    base = rng.uniform(0.33, 0.42)
    angle = rng.uniform(0, 2 * np.pi)
    amplitude = rng.uniform(0.04, 0.09)
    yy, xx = np.mgrid[0:side, 0:side] / side
    img = base + amplitude * ((xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle))

    pitch = rng.uniform(6.0, 14.0)
    radius = rng.uniform(1.0, 3.0)
    brightness = rng.uniform(0.30, 0.40)
    phase_y = rng.uniform(0, pitch)
    phase_x = rng.uniform(0, pitch)
    jitter = rng.uniform(0.0, 0.15 * pitch)
    ys = np.arange(phase_y, side, pitch)
    xs = np.arange(phase_x, side, pitch)
    for cy in ys:
        for cx in xs:
            jy = cy + rng.uniform(-jitter, jitter)
            jx = cx + rng.uniform(-jitter, jitter)
            idx, mask = _disk_mask(side, side, int(round(jy)), int(round(jx)), radius)
            img[idx][mask] += brightness
    return img


def _draw_defect(img: np.ndarray, spec: DefectSpec, rng: np.random.Generator):
    h, w = img.shape
    if spec.kind == "scratch":
        angle = rng.uniform(0, np.pi)
        width = rng.uniform(0.8, 1.8)
        steps = max(spec.size, MIN_DEFECT_PIXELS)
        for t in range(steps):
            cy = spec.y + t * np.sin(angle)
            cx = spec.x + t * np.cos(angle)
            if not (0 <= cy < h and 0 <= cx < w):
                break
            idx, mask = _disk_mask(h, w, int(round(cy)), int(round(cx)), width)
            img[idx][mask] = np.clip(img[idx][mask] + spec.delta, 0.0, 1.0)
    elif spec.kind in ("bright_spot", "dark_spot"):
        idx, mask = _disk_mask(h, w, spec.y, spec.x, spec.size)
        img[idx][mask] = np.clip(img[idx][mask] + spec.delta, 0.0, 1.0)
    elif spec.kind == "impurity":
        cy, cx = float(spec.y), float(spec.x)
        for _ in range(6):
            idx, mask = _disk_mask(h, w, int(round(cy)), int(round(cx)), spec.size * 0.6)
            img[idx][mask] = np.clip(img[idx][mask] + spec.delta, 0.0, 1.0)
            cy += rng.uniform(-spec.size, spec.size)
            cx += rng.uniform(-spec.size, spec.size)
            cy = min(max(cy, 0), h - 1)
            cx = min(max(cx, 0), w - 1)


def _random_defect(rng: np.random.Generator, side: int) -> DefectSpec:
    kind = DEFECT_KINDS[int(rng.integers(len(DEFECT_KINDS)))]
    margin = 24
    x = int(rng.integers(margin, side - margin))
    y = int(rng.integers(margin, side - margin))
    if kind == "scratch":
        size = int(rng.integers(80, 170))
        delta = float(rng.choice([-1, 1]) * rng.uniform(0.3, 0.5))
    elif kind == "bright_spot":
        size = int(rng.integers(10, 19))
        delta = float(rng.uniform(0.3, 0.5))
    elif kind == "dark_spot":
        size = int(rng.integers(10, 19))
        delta = float(-rng.uniform(0.3, 0.5))
    else:
        size = int(rng.integers(7, 13))
        delta = float(rng.choice([-1, 1]) * rng.uniform(0.3, 0.5))
    return DefectSpec(kind=kind, x=x, y=y, size=size, delta=delta)


def render_defect_pair(seed: int, index: int, side: int = IMAGE_SIDE):
    """(clean twin, defective image, specs) sharing lattice and noise."""
    rng = _image_rng(seed, index)
    plate = render_clean_plate(rng, side)
    noise = rng.normal(0.0, NOISE_SIGMA, size=plate.shape)
    clean = np.clip(plate + noise, 0.0, 1.0)
    for _ in range(8):  # re-roll until the visibility floor holds
        defective_plate = plate.copy()
        specs = [_random_defect(rng, side) for _ in range(int(rng.integers(1, 4)))]
        ok = True
        for spec in specs:
            before = defective_plate.copy()
            _draw_defect(defective_plate, spec, rng)
            moved = np.abs(defective_plate - before) >= MIN_DEFECT_DELTA
            if moved.sum() < MIN_DEFECT_PIXELS:
                ok = False
                break
        if not ok:
            continue
        defective = np.clip(defective_plate + noise, 0.0, 1.0)
        if (np.abs(defective - clean) >= MIN_DEFECT_DELTA).sum() >= MIN_DEFECT_PIXELS:
            return clean, defective, specs
    raise RuntimeError(f"could not render a visible defect for (seed={seed}, index={index})")


def threshold_classifier_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Best accuracy of a mean-brightness threshold rule (either polarity)."""
    means = images.reshape(len(images), -1).mean(axis=1)
    order = np.argsort(means)
    sorted_labels = labels[order]
    n = len(labels)
    best = max((sorted_labels == LABEL_DEFECTIVE).mean(), (sorted_labels == LABEL_CLEAN).mean())
    cum_def = np.cumsum(sorted_labels == LABEL_DEFECTIVE)
    total_def = cum_def[-1]
    for i in range(1, n):  # first i samples fall below the threshold
        low_def = cum_def[i - 1]
        acc_defective_above = ((total_def - low_def) + (i - low_def)) / n
        acc_defective_below = (low_def + ((n - i) - (total_def - low_def))) / n
        best = max(best, acc_defective_above, acc_defective_below)
    return float(best)


def generate(seed: int, n_defective: int = 422, n_clean: int = 400,
             side: int = IMAGE_SIDE, check_difficulty: bool = True) -> SampleSet:
    """Seed-deterministic synthetic benchmark set; defective samples first.

    Refuses (by raising) to produce a set separable by global brightness
    statistics alone, so the classification task is never degenerate.
    """
    if n_defective < 0 or n_clean < 0:
        raise ValueError("sample counts must be >= 0")
    total = n_defective + n_clean
    images = np.zeros((total, 1, side, side), dtype=np.float32)
    labels = np.zeros(total, dtype=np.int64)
    defects: list[list[DefectSpec]] = []
    for i in range(n_defective):
        _, defective, specs = render_defect_pair(seed, i, side)
        images[i, 0] = defective
        labels[i] = LABEL_DEFECTIVE
        defects.append(specs)
    for i in range(n_defective, total):
        rng = _image_rng(seed, i)
        plate = render_clean_plate(rng, side)
        noise = rng.normal(0.0, NOISE_SIGMA, size=plate.shape)
        images[i, 0] = np.clip(plate + noise, 0.0, 1.0)
        labels[i] = LABEL_CLEAN
        defects.append([])
    # the separability floor is a statistical property; tiny sets clear any
    # threshold by chance, so only real-sized sets are checked
    if check_difficulty and n_defective >= 20 and n_clean >= 20:
        acc = threshold_classifier_accuracy(images, labels)
        if acc >= 0.8:
            raise RuntimeError(
                f"generated set is too easy: brightness threshold reaches {acc:.3f}"
            )
    return SampleSet(images=images, labels=labels, generator_seed=seed, defects=defects)


def _content_key(image: np.ndarray, label: int) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(image).tobytes())
    digest.update(bytes([label]))
    return digest.hexdigest()


def split(sample_set: SampleSet, seed: int, train_fraction: float = 0.25) -> SampleSet:
    """Stratified seeded split; invariant to the input ordering.

    Train size is round(train_fraction * total); per-class counts stay
    within one sample of the global ratio.
    """
    labels = sample_set.labels
    total = len(labels)
    classes = np.unique(labels)
    for c in classes:
        if (labels == c).sum() < 2:
            raise ValueError(f"class {c} has fewer than 2 samples; cannot split")
    target_total = round(train_fraction * total)
    per_class = {c: round(train_fraction * (labels == c).sum()) for c in classes}
    # nudge the largest class so per-class rounding meets the global target
    drift = target_total - sum(per_class.values())
    if drift:
        largest = max(classes, key=lambda c: (labels == c).sum())
        per_class[largest] += drift

    rng = np.random.default_rng(seed)
    tags = np.full(total, "test", dtype="<U5")
    for c in sorted(per_class):
        idx = np.flatnonzero(labels == c)
        keys = [_content_key(sample_set.images[i], int(labels[i])) for i in idx]
        canonical = idx[np.argsort(keys)]
        picks = rng.permutation(len(canonical))[: per_class[c]]
        tags[canonical[picks]] = "train"
    return SampleSet(
        images=sample_set.images,
        labels=sample_set.labels,
        split=tags,
        generator_seed=sample_set.generator_seed,
        defects=sample_set.defects,
    )


def downscale(images: np.ndarray, factor: int) -> np.ndarray:
    """Exact block-mean downscale; spatial dims must divide by factor."""
    n, c, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


# ---------------------------------------------------------------------------
# PNG directory interchange
# ---------------------------------------------------------------------------

def _label_from_filename(name: str) -> int:
    stem = os.path.splitext(name)[0]
    parts = stem.split("_")
    if len(parts) >= 2 and parts[1] in ("OK", "NG"):
        return LABEL_DEFECTIVE if parts[1] == "NG" else LABEL_CLEAN
    raise ValueError(f"cannot read label from filename {name!r}; expected <id>_<OK|NG>*.png")


def load_directory(path: str) -> SampleSet:
    """Load 8-bit grayscale 224x224 PNGs named ``<id>_<OK|NG>*.png``."""
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    images = np.zeros((len(names), 1, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    labels = np.zeros(len(names), dtype=np.int64)
    for i, name in enumerate(names):
        labels[i] = _label_from_filename(name)
        try:
            with Image.open(os.path.join(path, name)) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32)
        except OSError as exc:
            raise ValueError(f"unreadable image file {name!r}: {exc}") from exc
        if arr.shape != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(
                f"image {name!r} is {arr.shape[1]}x{arr.shape[0]}, "
                f"expected {IMAGE_SIDE}x{IMAGE_SIDE}"
            )
        images[i, 0] = arr / 255.0
    return SampleSet(images=images, labels=labels, generator_seed="external")


def save_directory(sample_set: SampleSet, path: str, manifest: str = "manifest.csv") -> list[str]:
    """Write PNGs (filename-encoded labels) plus a split manifest CSV."""
    os.makedirs(path, exist_ok=True)
    names = []
    for i in range(len(sample_set)):
        tag = "NG" if sample_set.labels[i] == LABEL_DEFECTIVE else "OK"
        name = f"{i:05d}_{tag}.png"
        arr = np.clip(np.round(sample_set.images[i, 0] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(os.path.join(path, name))
        names.append(name)
    with open(os.path.join(path, manifest), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "split"])
        for i, name in enumerate(names):
            label = "defective" if sample_set.labels[i] == LABEL_DEFECTIVE else "non_defective"
            tag = sample_set.split[i] if sample_set.split is not None else ""
            writer.writerow([name, label, tag])
    return names
