"""Synthetic fundus dataset, manifests, patient-level splits and batching."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .preprocess import preprocess_pipeline, read_ppm, write_ppm
from .serialization import load_tensor
from .severity import TASKS, CharacteristicGrades, enumerate_preimage, severity_from_grades

MANIFEST_HEADER = ["patient_id", "eye", "visit", "image_path", "ga", "pigment", "depig", "drusen", "severity", "split"]

PRESETS: dict[str, tuple[float, ...]] = {
    "areds": (41.8, 13.3, 5.7, 10.3, 6.5, 8.0, 6.8, 5.8, 1.8),
    "areds2": (0.7, 0.7, 1.5, 4.2, 6.6, 22.6, 41.6, 14.4, 7.7),
    "uniform": (100 / 9,) * 9,
}

# Rendering constants. Sizes are fractions of the raw image height.
DISC_RADIUS = 0.45
DISC_JITTER = 0.03
DISC_COLOR = (190.0, 82.0, 36.0)
BACKGROUND_LEVEL = 3.0
PIXEL_NOISE = 3.0
GAIN_JITTER = 0.08

# Drusen class -> (blob count, blob radius). Total blob area grows strictly
# with the class: 0, 1.2e-3, 2.5e-3, 6.1e-3, 9.6e-3, 2.2e-2 (x pi, height^2).
DRUSEN_BLOBS = {0: (0, 0.0), 1: (1, 0.035), 2: (2, 0.035), 3: (3, 0.045), 4: (4, 0.049), 5: (6, 0.06)}
# Bright yellow with no blue: after background subtraction drusen are the only
# feature that lifts green while pushing blue down, so they stay separable from
# the grey ringing at the disc edge and from the depigmentation mottle.
DRUSEN_COLOR = (235.0, 225.0, 0.0)

GA_RADIUS = 0.13
GA_COLOR = (228.0, 190.0, 155.0)

PIGMENT_SPOTS = 5
PIGMENT_RADIUS = 0.03
PIGMENT_COLOR = (60.0, 28.0, 12.0)

# Depigmentation grade -> angular extent of the washed-out sector, degrees.
DEPIG_SECTOR_DEGREES = {0: 0.0, 1: 60.0, 2: 130.0, 3: 220.0}
DEPIG_COLOR = (215.0, 165.0, 140.0)
DEPIG_MOTTLE = 28.0


@dataclass(frozen=True)
class DistributionPreset:
    name: str
    probabilities: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (9,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"preset {self.name!r} needs 9 non-negative probabilities summing to 1")

    @classmethod
    def named(cls, name: str) -> DistributionPreset:
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        pct = np.asarray(PRESETS[name], dtype=np.float64)
        return cls(name, tuple((pct / pct.sum()).tolist()))


@dataclass(frozen=True)
class ImageRecord:
    patient_id: str
    eye: str
    visit: int
    image_path: str
    grades: CharacteristicGrades
    severity: int

    def labels(self) -> tuple[int, int, int, int]:
        return self.grades.as_tuple()


@dataclass
class PatientRecord:
    patient_id: str
    images: list[ImageRecord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    records: list[PatientRecord]
    split_assignment: dict[str, str] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [p.patient_id for p in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient_id in manifest")
        paths = [img.image_path for p in self.records for img in p.images]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate image_path in manifest")

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.records]

    def images(self, split: Optional[str] = None) -> list[ImageRecord]:
        out = []
        for p in self.records:
            if split is None or self.split_assignment.get(p.patient_id) == split:
                out.extend(p.images)
        return out

    def with_splits(self, assignment: dict[str, str]) -> DatasetManifest:
        return DatasetManifest(self.records, dict(assignment), self.root)

    def resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        return p if p.is_absolute() else self.root / p

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for p in self.records:
                for img in p.images:
                    writer.writerow(
                        [img.patient_id, img.eye, img.visit, img.image_path, *img.labels(), img.severity,
                         self.split_assignment.get(p.patient_id, "")]
                    )

    @classmethod
    def read_csv(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        patients: dict[str, PatientRecord] = {}
        splits: dict[str, str] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(MANIFEST_HEADER):
                    raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
                pid, eye, visit, image_path, ga, ip, dep, dru, sev, split = row
                grades = CharacteristicGrades(int(ga), int(ip), int(dep), int(dru))
                if severity_from_grades(grades) != int(sev):
                    raise ValueError(f"{path}:{lineno}: severity {sev} inconsistent with grades")
                rec = ImageRecord(pid, eye, int(visit), image_path, grades, int(sev))
                patients.setdefault(pid, PatientRecord(pid)).images.append(rec)
                if split:
                    if splits.setdefault(pid, split) != split:
                        raise ValueError(f"{path}:{lineno}: patient {pid} assigned to two splits")
        return cls(list(patients.values()), splits, path.parent)


# ---------------------------------------------------------------- rendering


def _disc_geometry(rng: np.random.Generator, height: int, width: int):
    cy = height / 2.0 + rng.uniform(-DISC_JITTER, DISC_JITTER) * height
    cx = width / 2.0 + rng.uniform(-DISC_JITTER, DISC_JITTER) * height
    radius = DISC_RADIUS * height * (1.0 + rng.uniform(-0.03, 0.03))
    return cy, cx, radius


def _place(rng, cy, cx, max_r, radius, taken, tries=200):
    """Random non-overlapping centre inside the disc, or None."""
    for _ in range(tries):
        r = max_r * math.sqrt(rng.random())
        a = rng.uniform(0, 2 * math.pi)
        y, x = cy + r * math.sin(a), cx + r * math.cos(a)
        if all(math.hypot(y - ty, x - tx) > radius + tr + 1.0 for ty, tx, tr in taken):
            return y, x
    return None


def render_fundus(grades: CharacteristicGrades, height: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a synthetic fundus photograph encoding ``grades``; returns uint8 ``(H, W, 3)``."""
    width = height + height // 4
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx, radius = _disc_geometry(rng, height, width)
    dist = np.hypot(yy - cy, xx - cx)
    disc = dist <= radius
    ang = np.degrees(np.arctan2(yy - cy, xx - cx)) % 360.0

    shade = 1.0 - 0.25 * np.clip(dist / radius, 0, 1) ** 2
    img = np.empty((height, width, 3))
    for ch in range(3):
        img[..., ch] = DISC_COLOR[ch] * shade

    dep_extent = DEPIG_SECTOR_DEGREES[grades.depigmentation]
    if dep_extent > 0:
        start = rng.uniform(0, 360)
        rel = (ang - start) % 360.0
        sector = disc & (rel <= dep_extent) & (dist <= 0.9 * radius) & (dist >= 0.15 * radius)
        mottle = rng.normal(0.0, DEPIG_MOTTLE, size=(height, width))
        for ch in range(3):
            img[..., ch] = np.where(sector, 0.5 * img[..., ch] + 0.5 * DEPIG_COLOR[ch] + mottle, img[..., ch])

    taken: list[tuple[float, float, float]] = []
    if grades.geographic_atrophy:
        ga_r = GA_RADIUS * height * rng.uniform(0.9, 1.1)
        gy, gx = _place(rng, cy, cx, 0.5 * radius, ga_r, taken)
        taken.append((gy, gx, ga_r))
        patch = np.hypot(yy - gy, xx - gx) <= ga_r
        for ch in range(3):
            img[..., ch] = np.where(patch, GA_COLOR[ch], img[..., ch])

    if grades.increased_pigment:
        spot_r = PIGMENT_RADIUS * height
        for _ in range(PIGMENT_SPOTS):
            pos = _place(rng, cy, cx, 0.8 * radius, spot_r, taken)
            if pos is None:
                continue
            taken.append((*pos, spot_r))
            w = np.exp(-0.5 * (np.hypot(yy - pos[0], xx - pos[1]) / spot_r) ** 2)
            for ch in range(3):
                img[..., ch] = (1 - w) * img[..., ch] + w * PIGMENT_COLOR[ch]

    count, frac = DRUSEN_BLOBS[grades.drusen_area]
    for _ in range(count):
        blob_r = frac * height * rng.uniform(0.8, 1.2)
        pos = _place(rng, cy, cx, 0.8 * radius, blob_r, taken)
        if pos is None:
            continue
        taken.append((*pos, blob_r))
        w = np.clip(1.2 - np.hypot(yy - pos[0], xx - pos[1]) / blob_r, 0.0, 1.0)
        for ch in range(3):
            img[..., ch] = (1 - w) * img[..., ch] + w * DRUSEN_COLOR[ch]

    img *= 1.0 + rng.uniform(-GAIN_JITTER, GAIN_JITTER)
    img += rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    img = np.where(disc[..., None], img, BACKGROUND_LEVEL + rng.uniform(-2, 2, size=img.shape))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sample_grades(preset: DistributionPreset, rng: np.random.Generator) -> CharacteristicGrades:
    severity = int(rng.choice(9, p=np.asarray(preset.probabilities))) + 1
    options = enumerate_preimage(severity)
    return options[int(rng.integers(len(options)))]


def generate_dataset(
    out_dir: str | Path,
    n_patients: int,
    images_per_patient: int = 2,
    preset: DistributionPreset | str = "uniform",
    side: int = 64,
    seed: int = 0,
    split_seed: Optional[int] = None,
) -> DatasetManifest:
    """Render a synthetic dataset into ``out_dir`` and write ``manifest.csv`` there.

    Patients get a 64/16/20 holdout split drawn from ``split_seed``
    (defaults to ``seed``).
    """
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    if images_per_patient < 1:
        raise ValueError("images_per_patient must be at least 1")
    if isinstance(preset, str):
        preset = DistributionPreset.named(preset)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_patients * images_per_patient)

    records = []
    idx = 0
    for p in range(n_patients):
        pid = f"P{p:05d}"
        patient = PatientRecord(pid)
        for j in range(images_per_patient):
            rng = np.random.default_rng(children[idx])
            idx += 1
            grades = sample_grades(preset, rng)
            eye = "LR"[j % 2]
            visit = j // 2
            rel = f"images/{pid}_{eye}{visit}.ppm"
            write_ppm(out_dir / rel, render_fundus(grades, side, rng))
            patient.images.append(ImageRecord(pid, eye, visit, rel, grades, severity_from_grades(grades)))
        records.append(patient)

    manifest = DatasetManifest(records, {}, out_dir)
    if n_patients >= 3:
        manifest = manifest.with_splits(holdout_split(manifest, seed=seed if split_seed is None else split_seed))
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------- splits


def holdout_split(
    manifest: DatasetManifest, ratios: Sequence[float] = (0.64, 0.16, 0.20), seed: int = 0
) -> dict[str, str]:
    """Patient-level train/val/test split; train and val sizes are floored, test takes the rest."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    ids = manifest.patient_ids
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 patients for a holdout split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def kfold_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[dict[str, str]]:
    """One train/val/test assignment per round.

    Round ``i`` tests on fold ``i`` and validates on fold ``(i + 1) % k``.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    ids = manifest.patient_ids
    if len(ids) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[ids[i] for i in chunk] for chunk in np.array_split(order, k)]
    rounds = []
    for i in range(k):
        val = (i + 1) % k
        assign = {}
        for f, members in enumerate(folds):
            role = "test" if f == i else "val" if f == val else "train"
            for pid in members:
                assign[pid] = role
        rounds.append(assign)
    return rounds


def fold_index(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> dict[str, int]:
    order = np.random.default_rng(seed).permutation(len(manifest.patient_ids))
    ids = manifest.patient_ids
    return {ids[i]: f for f, chunk in enumerate(np.array_split(order, k)) for i in chunk}


# ---------------------------------------------------------------- loading


class ImageStore:
    """Loads model-ready ``(3, side, side)`` images, caching them in memory.

    ``.mtt`` paths are read as tensors; ``.ppm`` paths are run through the
    preprocessing pipeline on first access.
    """

    def __init__(self, manifest: DatasetManifest, side: int):
        self.manifest = manifest
        self.side = side
        self._cache: dict[str, np.ndarray] = {}

    def get(self, image_path: str) -> np.ndarray:
        hit = self._cache.get(image_path)
        if hit is not None:
            return hit
        path = self.manifest.resolve(image_path)
        if not path.exists():
            raise FileNotFoundError(f"missing image file: {path}")
        if path.suffix == ".mtt":
            arr = load_tensor(path)
            if arr.shape != (3, self.side, self.side):
                raise ValueError(f"{path}: tensor shape {arr.shape}, expected (3, {self.side}, {self.side})")
        else:
            arr = preprocess_pipeline(read_ppm(path), self.side)
        self._cache[image_path] = arr
        return arr

    def stack(self, records: Sequence[ImageRecord]) -> np.ndarray:
        return np.stack([self.get(r.image_path) for r in records])


def labels_of(records: Sequence[ImageRecord]) -> dict[str, np.ndarray]:
    arr = np.asarray([r.labels() for r in records], dtype=np.int64).reshape(-1, 4)
    return {task: arr[:, i] for i, task in enumerate(TASKS)}


def batch_iterator(
    manifest: DatasetManifest,
    split: Optional[str],
    batch_size: int = 16,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    store: Optional[ImageStore] = None,
    side: int = 64,
) -> Iterator[tuple[np.ndarray, dict[str, np.ndarray], list[ImageRecord]]]:
    """Yield ``(images, labels, records)`` batches; the last batch may be short."""
    records = manifest.images(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    store = store or ImageStore(manifest, side)
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        yield store.stack(chunk), labels_of(chunk), chunk
