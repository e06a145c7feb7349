"""Synthetic longitudinal brain phantoms with exact ground-truth deformation fields.

Each subject is a 2D head slice whose ventricle widens with age. Later
timepoints are produced by pull-warping the previous image with a radial field,
so every consecutive pair is supervised exactly. Fields are quantised to
multiples of ``u_max * 2**-16`` pixels, which keeps normalisation and
denormalisation exact in float32.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.special import expit

from .errors import DatasetError
from .serialization import read_metadata, read_tensor, sidecar_path, write_metadata, write_tensor
from .tensor import Tensor
from .warp import (
    DeformationField,
    compose_fields,
    denormalize_field,
    normalize_field,
    warp_image,
    warp_segmentation,
)

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
AGE_MIN = 40.0
AGE_MAX = 90.0
U_MAX = 10.0
KAPPA = 0.08  # ventricle boundary displacement, px per year
FALLOFF_SIGMA = 10.0
QUANT_STEPS = 2**16
MIN_GAP, MAX_GAP = 3.0, 8.0

BACKGROUND, BRAIN, VENTRICLE = 0, 1, 2
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class AnatomyParams:
    head_center: tuple[float, float]
    head_axes: tuple[float, float]
    ventricle_center: tuple[float, float]
    ventricle_radius: float
    head_intensity: float
    ventricle_intensity: float
    texture_seed: int

    def radius_at(self, age: float, age_min: float = AGE_MIN) -> float:
        return self.ventricle_radius + KAPPA * (age - age_min)

    def as_metadata(self) -> dict:
        return {
            "head_center_y": self.head_center[0],
            "head_center_x": self.head_center[1],
            "head_axis_y": self.head_axes[0],
            "head_axis_x": self.head_axes[1],
            "ventricle_center_y": self.ventricle_center[0],
            "ventricle_center_x": self.ventricle_center[1],
            "ventricle_radius": self.ventricle_radius,
            "head_intensity": self.head_intensity,
            "ventricle_intensity": self.ventricle_intensity,
            "texture_seed": self.texture_seed,
        }

    @classmethod
    def from_metadata(cls, values: dict[str, str]) -> "AnatomyParams":
        def f(key: str) -> float:
            return float(values[key])

        return cls(
            head_center=(f("head_center_y"), f("head_center_x")),
            head_axes=(f("head_axis_y"), f("head_axis_x")),
            ventricle_center=(f("ventricle_center_y"), f("ventricle_center_x")),
            ventricle_radius=f("ventricle_radius"),
            head_intensity=f("head_intensity"),
            ventricle_intensity=f("ventricle_intensity"),
            texture_seed=int(values["texture_seed"]),
        )


@dataclass
class Timepoint:
    age: float
    image: Tensor
    segmentation: Tensor


@dataclass
class SubjectRecord:
    """Fields are keyed by (source index, target index) and stored in pixel units."""

    subject_id: str
    anatomy: AnatomyParams
    timepoints: list[Timepoint]
    fields: dict[tuple[int, int], DeformationField] = field(default_factory=dict)

    @property
    def num_timepoints(self) -> int:
        return len(self.timepoints)

    @property
    def ages(self) -> list[float]:
        return [tp.age for tp in self.timepoints]

    def field_between(self, source_idx: int, target_idx: int) -> DeformationField:
        key = (source_idx, target_idx)
        if key not in self.fields:
            raise KeyError(f"{self.subject_id} has no field {source_idx}->{target_idx}")
        return self.fields[key]


@dataclass
class Task:
    """One completion example: warp ``c1`` to ``t_age`` guided by ``aux_images``."""

    subject_id: str
    source_idx: int
    target_idx: int
    c1: Tensor
    source_age: float
    t_age: float
    t_age_norm: float
    aux_images: list[Tensor]
    aux_ages: list[float]
    phi0_gt: DeformationField
    target_image: Tensor
    source_seg: Tensor
    target_seg: Tensor

    @property
    def age_gap(self) -> float:
        return self.t_age - self.source_age


def radial_field(
    center: tuple[float, float],
    radius: float,
    gap: float,
    size: int = IMAGE_SIZE,
    kappa: float = KAPPA,
    sigma: float = FALLOFF_SIGMA,
) -> np.ndarray:
    """Pull field that widens a disc of (target) radius ``radius`` by ``kappa * gap`` px.

    Inside the disc the displacement grows linearly with r; outside it decays
    with a Gaussian of width ``sigma``. Returns a float64 2×H×W array.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy, dx = ys - center[0], xs - center[1]
    r = np.hypot(dx, dy)
    m = kappa * gap
    profile = np.where(r <= radius, m * r / radius, m * (r / radius) * np.exp(-((r - radius) ** 2) / (2 * sigma**2)))
    scale = np.divide(profile, r, out=np.zeros_like(r), where=r > 0)
    return np.stack([-scale * dx, -scale * dy])


def quantize_field(u: np.ndarray, u_max: float = U_MAX) -> DeformationField:
    q = np.clip(np.round(np.asarray(u, dtype=np.float64) / u_max * QUANT_STEPS) / QUANT_STEPS, -1.0, 1.0)
    return DeformationField(Tensor((q * u_max).astype(np.float32)), normalized=False, u_max=u_max)


def _random_anatomy(rng: np.random.Generator, size: int) -> AnatomyParams:
    mid = size / 2 - 0.5
    head_center = (mid + rng.uniform(-1.0, 1.0), mid + rng.uniform(-1.0, 1.0))
    scale = size / IMAGE_SIZE
    return AnatomyParams(
        head_center=head_center,
        head_axes=(rng.uniform(22.0, 30.0) * scale, rng.uniform(22.0, 30.0) * scale),
        ventricle_center=(head_center[0] + rng.uniform(-2.0, 2.0), head_center[1] + rng.uniform(-2.0, 2.0)),
        ventricle_radius=rng.uniform(7.5, 8.5) * scale,
        head_intensity=rng.uniform(0.7, 0.8),
        ventricle_intensity=0.1,
        texture_seed=int(rng.integers(2**31)),
    )


def render_baseline(
    anatomy: AnatomyParams, age: float, size: int = IMAGE_SIZE, age_min: float = AGE_MIN
) -> tuple[np.ndarray, np.ndarray]:
    """Image and label map of the subject at ``age``, rendered analytically.

    The age-``age_min`` template is evaluated at p + u(p) for the radial field
    of the full gap, so the baseline already carries the matching ventricle size.
    """
    gap = age - age_min
    u = radial_field(anatomy.ventricle_center, anatomy.radius_at(age, age_min), gap, size)
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    qy, qx = ys + u[1], xs + u[0]

    hy, hx = anatomy.head_center
    ay, ax = anatomy.head_axes
    d_head = np.sqrt(((qy - hy) / ay) ** 2 + ((qx - hx) / ax) ** 2)
    d_vent = np.hypot(qy - anatomy.ventricle_center[0], qx - anatomy.ventricle_center[1])

    noise = np.random.default_rng(anatomy.texture_seed).standard_normal((size, size))
    texture = gaussian_filter(noise, sigma=2.0)
    texture /= texture.std() + 1e-12
    tissue = anatomy.head_intensity + 0.05 * map_coordinates(texture, [qy, qx], order=1, mode="nearest")

    head = expit((1.0 - d_head) * 20.0)
    vent = expit((anatomy.ventricle_radius - d_vent) / 0.5)
    image = np.clip(head * (tissue * (1.0 - vent) + anatomy.ventricle_intensity * vent), 0.0, 1.0)

    labels = np.full((size, size), BACKGROUND, dtype=np.float32)
    labels[d_head < 1.0] = BRAIN
    labels[(d_head < 1.0) & (d_vent < anatomy.ventricle_radius)] = VENTRICLE
    return image[None].astype(np.float32), labels[None]


def _draw_ages(rng: np.random.Generator, num_timepoints: int, age_min: float, age_max: float) -> list[float]:
    # leaves room for rounding every age to 0.1 yr
    latest_start = age_max - MAX_GAP * (num_timepoints - 1) - 0.5
    if latest_start < age_min:
        raise ValueError(f"{num_timepoints} timepoints do not fit between ages {age_min} and {age_max}")
    ages = [round(float(rng.uniform(age_min, latest_start)), 1)]
    for _ in range(num_timepoints - 1):
        ages.append(round(ages[-1] + float(rng.uniform(MIN_GAP, MAX_GAP)), 1))
    return ages


def make_subject(
    seed,
    num_timepoints: int = 3,
    subject_id: str | None = None,
    size: int = IMAGE_SIZE,
    u_max: float = U_MAX,
    age_min: float = AGE_MIN,
    age_max: float = AGE_MAX,
) -> SubjectRecord:
    """Generate one subject. ``seed`` may be an int, a SeedSequence or a Generator."""
    if not 2 <= num_timepoints <= 4:
        raise ValueError(f"num_timepoints must be in 2..4, got {num_timepoints}")
    rng = np.random.default_rng(seed)
    anatomy = _random_anatomy(rng, size)
    ages = _draw_ages(rng, num_timepoints, age_min, age_max)
    subject_id = subject_id or f"sub-{int(rng.integers(10**6)):06d}"

    image0, seg0 = render_baseline(anatomy, ages[0], size, age_min)
    images = [Tensor(image0)]
    seg_base = Tensor(seg0)

    fields: dict[tuple[int, int], DeformationField] = {}
    for k in range(1, num_timepoints):
        raw = radial_field(anatomy.ventricle_center, anatomy.radius_at(ages[k], age_min), ages[k] - ages[k - 1], size)
        fields[(k - 1, k)] = quantize_field(raw, u_max)
        images.append(warp_image(images[-1], fields[(k - 1, k)]))
    for span in range(2, num_timepoints):
        for i in range(num_timepoints - span):
            j = i + span
            composed = compose_fields(fields[(i, j - 1)], fields[(j - 1, j)])
            fields[(i, j)] = quantize_field(composed.u.data, u_max)

    timepoints = [Timepoint(age=ages[0], image=images[0], segmentation=seg_base)]
    for k in range(1, num_timepoints):
        timepoints.append(Timepoint(age=ages[k], image=images[k], segmentation=warp_segmentation(seg_base, fields[(0, k)])))
    return SubjectRecord(subject_id=subject_id, anatomy=anatomy, timepoints=timepoints, fields=fields)


def make_task(
    subject: SubjectRecord,
    source_idx: int,
    target_idx: int,
    num_aux: int = 0,
    u_max: float = U_MAX,
    age_min: float = AGE_MIN,
    age_max: float = AGE_MAX,
) -> Task:
    """Build one example. Pairs run forward in time; asking for more auxiliary
    scans than exist returns all that do."""
    n = subject.num_timepoints
    if not (0 <= source_idx < n and 0 <= target_idx < n):
        raise ValueError(f"indices ({source_idx}, {target_idx}) outside 0..{n - 1} for {subject.subject_id}")
    if source_idx == target_idx:
        raise ValueError("source and target must be different timepoints")
    if source_idx > target_idx:
        raise ValueError(f"pairs must run forward in time, got {source_idx}->{target_idx}")
    if num_aux < 0:
        raise ValueError(f"num_aux must be >= 0, got {num_aux}")

    source, target = subject.timepoints[source_idx], subject.timepoints[target_idx]
    others = [tp for k, tp in enumerate(subject.timepoints) if k not in (source_idx, target_idx)]
    aux = sorted(others, key=lambda tp: tp.age)[:num_aux]

    gt = subject.field_between(source_idx, target_idx)
    phi0_gt = normalize_field(gt, u_max)
    return Task(
        subject_id=subject.subject_id,
        source_idx=source_idx,
        target_idx=target_idx,
        c1=source.image,
        source_age=source.age,
        t_age=target.age,
        t_age_norm=min(max((target.age - age_min) / (age_max - age_min), 0.0), 1.0),
        aux_images=[tp.image for tp in aux],
        aux_ages=[tp.age for tp in aux],
        phi0_gt=phi0_gt,
        target_image=warp_image(source.image, denormalize_field(phi0_gt, u_max)),
        source_seg=source.segmentation,
        target_seg=warp_segmentation(source.segmentation, gt),
    )


def forward_pairs(subject: SubjectRecord) -> list[tuple[int, int]]:
    n = subject.num_timepoints
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def ventricle_area(segmentation: Tensor | np.ndarray) -> int:
    labels = segmentation.data if isinstance(segmentation, Tensor) else np.asarray(segmentation)
    return int(np.count_nonzero(np.rint(labels) == VENTRICLE))


def split_counts(num_subjects: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must sum to 1, got {sum(fractions)}")
    n_train = round(fractions[0] * num_subjects)
    n_val = round(fractions[1] * num_subjects)
    n_test = num_subjects - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(
            f"too few subjects for split: {num_subjects} subjects give {n_train}/{n_val}/{n_test} "
            f"train/val/test; every split needs at least one"
        )
    return n_train, n_val, n_test


@dataclass
class DatasetManifest:
    seed: int
    splits: dict[str, list[str]]
    subjects: dict[str, SubjectRecord]

    def counts(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.splits.items()}


def _subject_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, index])


def _generate(args: tuple[int, int, str, int]) -> SubjectRecord:
    master_seed, index, subject_id, size = args
    rng = np.random.default_rng(_subject_seed(master_seed, index))
    num_timepoints = int(rng.integers(2, 5))
    return make_subject(rng, num_timepoints, subject_id=subject_id, size=size)


def make_dataset(
    num_subjects: int,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    out_dir: str | Path | None = None,
    bae_subjects: int | None = None,
    workers: int = 4,
    size: int = IMAGE_SIZE,
) -> DatasetManifest:
    """Generate subjects, split them by subject, and optionally write everything to ``out_dir``.

    The age-critic split is a disjoint set of extra subjects (``num_subjects // 2``
    by default) so the critic never sees a diffusion train/val/test subject.
    """
    n_train, n_val, _ = split_counts(num_subjects, split_fractions)
    if bae_subjects is None:
        bae_subjects = max(1, num_subjects // 2)

    ids = [f"sub-{i:04d}" for i in range(num_subjects + bae_subjects)]
    order = np.random.default_rng(seed).permutation(num_subjects)
    main_ids = [ids[i] for i in order]
    splits = {
        "train": sorted(main_ids[:n_train]),
        "val": sorted(main_ids[n_train : n_train + n_val]),
        "test": sorted(main_ids[n_train + n_val :]),
        "bae": ids[num_subjects:],
    }

    jobs = [(seed, i, subject_id, size) for i, subject_id in enumerate(ids)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(_generate, jobs))
    subjects = {r.subject_id: r for r in records}
    logger.info(f"Generated {len(subjects)} subjects: " + ", ".join(f"{k} {len(v)}" for k, v in splits.items()))

    manifest = DatasetManifest(seed=seed, splits=splits, subjects=subjects)
    if out_dir is not None:
        write_dataset(manifest, out_dir, size=size)
    return manifest


def write_dataset(manifest: DatasetManifest, out_dir: str | Path, size: int = IMAGE_SIZE) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for record in manifest.subjects.values():
        save_subject(record, root)
    for name, ids in manifest.splits.items():
        (root / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))
    write_metadata(
        root / "dataset.meta",
        {
            "seed": manifest.seed,
            "num_subjects": sum(len(manifest.splits[s]) for s in SPLITS),
            "bae_subjects": len(manifest.splits["bae"]),
            "image_size": size,
            "u_max": U_MAX,
            "age_min": AGE_MIN,
            "age_max": AGE_MAX,
        },
    )
    logger.info(f"Wrote dataset to {root}")
    return root


def _write_with_meta(path: Path, array: np.ndarray, meta: dict) -> None:
    write_tensor(path, array)
    write_metadata(sidecar_path(path), meta)


def save_subject(record: SubjectRecord, root: str | Path) -> Path:
    folder = Path(root) / "subjects" / record.subject_id
    folder.mkdir(parents=True, exist_ok=True)
    write_metadata(
        folder / "subject.meta",
        {"subject_id": record.subject_id, "num_timepoints": record.num_timepoints, **record.anatomy.as_metadata()},
    )
    for k, tp in enumerate(record.timepoints):
        _write_with_meta(folder / f"t{k}_img.dftn", tp.image.data, {"age": tp.age, "kind": "image"})
        _write_with_meta(folder / f"t{k}_seg.dftn", tp.segmentation.data, {"age": tp.age, "kind": "segmentation"})
    for (i, j), fld in sorted(record.fields.items()):
        _write_with_meta(
            folder / f"field_{i}_{j}.dftn",
            fld.u.data,
            {
                "source_age": record.timepoints[i].age,
                "target_age": record.timepoints[j].age,
                "u_max": fld.u_max,
                "normalized": str(fld.normalized).lower(),
            },
        )
    return folder


def load_subject(root: str | Path, subject_id: str) -> SubjectRecord:
    folder = Path(root) / "subjects" / subject_id
    meta_path = folder / "subject.meta"
    if not meta_path.is_file():
        raise DatasetError(f"subject {subject_id} not found under {root}")
    meta = read_metadata(meta_path)
    try:
        n = int(meta["num_timepoints"])
        timepoints = []
        for k in range(n):
            img_path, seg_path = folder / f"t{k}_img.dftn", folder / f"t{k}_seg.dftn"
            age = float(read_metadata(sidecar_path(img_path))["age"])
            timepoints.append(Timepoint(age=age, image=Tensor(read_tensor(img_path)), segmentation=Tensor(read_tensor(seg_path))))
        fields = {}
        for i in range(n):
            for j in range(i + 1, n):
                path = folder / f"field_{i}_{j}.dftn"
                fmeta = read_metadata(sidecar_path(path))
                fields[(i, j)] = DeformationField(
                    Tensor(read_tensor(path)), normalized=fmeta["normalized"] == "true", u_max=float(fmeta["u_max"])
                )
    except (KeyError, ValueError) as e:
        raise DatasetError(f"malformed subject {subject_id}: {e}") from e
    return SubjectRecord(
        subject_id=subject_id, anatomy=AnatomyParams.from_metadata(meta), timepoints=timepoints, fields=fields
    )


class LongitudinalDataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: str | Path, u_max: float = U_MAX, age_min: float = AGE_MIN, age_max: float = AGE_MAX):
        self.root = Path(root)
        if not (self.root / "subjects").is_dir():
            raise DatasetError(f"{self.root} is not a generated dataset (no subjects/ directory)")
        self.u_max, self.age_min, self.age_max = u_max, age_min, age_max
        self._cache: dict[str, SubjectRecord] = {}

    def split(self, name: str) -> list[str]:
        path = self.root / f"{name}.txt"
        if not path.is_file():
            raise DatasetError(f"no manifest for split '{name}' in {self.root}")
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]

    def subject(self, subject_id: str) -> SubjectRecord:
        if subject_id not in self._cache:
            self._cache[subject_id] = load_subject(self.root, subject_id)
        return self._cache[subject_id]

    def tasks(self, split: str, num_aux: int = 3) -> list[Task]:
        """Every forward within-subject pair of the split."""
        tasks = []
        for subject_id in self.split(split):
            record = self.subject(subject_id)
            for i, j in forward_pairs(record):
                tasks.append(make_task(record, i, j, num_aux, self.u_max, self.age_min, self.age_max))
        return tasks

    def samples_for(self, subject_ids: list[str]) -> list[tuple[np.ndarray, float]]:
        """(image, age) pairs for every timepoint of the given subjects, for critic training."""
        samples = []
        for subject_id in subject_ids:
            for tp in self.subject(subject_id).timepoints:
                samples.append((tp.image.data, tp.age))
        return samples

    def age_samples(self, split: str) -> list[tuple[np.ndarray, float]]:
        return self.samples_for(self.split(split))
