"""
Synthetic multi-institution pelvic phantoms.

Each subject is a canonical layout of labelled structures (ellipsoids, tubes, shells in fixed
relative positions) with per-subject jitter and a smooth deformation, placed by a systematic
per-institution affine offset and imaged through a per-institution intensity transform
(contrast gamma, smooth bias field, noise level).

On disk::

    <out>/manifest.json
    <out>/subjects/<id>/meta.json     JSON header (magic, shape, spacing, classes, ...)
    <out>/subjects/<id>/image.raw     little-endian float32, C order
    <out>/subjects/<id>/labels.raw    uint8 label map, 0 = background, i + 1 = classes[i]
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, NamedTuple

import numpy as np
from loguru import logger
from scipy import ndimage

from protoalign.config import GenerationConfig, to_dict
from protoalign.errors import DatasetIOError, FormatError, GenerationError
from protoalign.geometry import AffineTransform, MaskVolume, Volume

SUBJECT_MAGIC = "PROTOALIGN-SUBJECT-1"
MANIFEST_MAGIC = "PROTOALIGN-DATASET-1"
IMAGE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")


class Structure(NamedTuple):
    """One labelled blob in normalized canonical coordinates (x, y, z)"""

    kind: str  # ellipsoid | tube | shell
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    thickness: float = 0.0


# fmt: off
CANONICAL_LAYOUT: dict[str, list[Structure]] = {
    "bladder": [Structure("ellipsoid", (0.0, -0.45, 0.3), (0.28, 0.22, 0.5))],
    "transition_zone": [Structure("ellipsoid", (0.0, 0.05, 0.0), (0.14, 0.12, 0.45))],
    "bone": [Structure("shell", (0.0, 0.0, 0.0), (0.85, 0.8, 1.0), thickness=0.07)],
    "rectum": [Structure("tube", (0.0, 0.42, 0.0), (0.12, 0.12, 1.0))],
    "obturator_internus": [
        Structure("ellipsoid", (-0.6, 0.05, 0.0), (0.1, 0.25, 0.7)),
        Structure("ellipsoid", (0.6, 0.05, 0.0), (0.1, 0.25, 0.7)),
    ],
    "seminal_vesicle": [
        Structure("ellipsoid", (-0.15, 0.25, 0.55), (0.12, 0.08, 0.35)),
        Structure("ellipsoid", (0.15, 0.25, 0.55), (0.12, 0.08, 0.35)),
    ],
    "peripheral_zone": [Structure("ellipsoid", (0.0, 0.1, 0.0), (0.22, 0.2, 0.55))],
    "neurovascular_bundle": [
        Structure("tube", (-0.22, 0.15, -0.1), (0.06, 0.06, 0.6)),
        Structure("tube", (0.22, 0.15, -0.1), (0.06, 0.06, 0.6)),
    ],
}
# first listed class wins voxels claimed by several structures
PRIORITY = (
    "neurovascular_bundle", "seminal_vesicle", "transition_zone", "peripheral_zone",
    "rectum", "bladder", "obturator_internus", "bone",
)
# tissue intensities overlap on purpose, intensity alone does not separate classes
INTENSITY = {
    "bladder": 0.9, "transition_zone": 0.55, "bone": 0.25, "rectum": 0.3,
    "obturator_internus": 0.38, "seminal_vesicle": 0.75, "peripheral_zone": 0.7,
    "neurovascular_bundle": 0.5,
}
# fmt: on
BACKGROUND_INTENSITY = 0.42


@dataclass(frozen=True, eq=False)
class LabeledSubject:
    """Image + label map + institution"""

    id: str
    image: Volume
    labels: np.ndarray
    classes: tuple[str, ...]
    institution: str

    def __post_init__(self) -> None:
        assert self.labels.shape == self.image.shape, "label map and image shapes differ"
        assert self.labels.dtype == LABEL_DTYPE, "label map must be uint8"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.image.shape

    def class_index(self, name: str) -> int:
        return self.classes.index(name) + 1

    def mask(self, name: str) -> np.ndarray:
        """Hard float32 mask of one class"""
        return (self.labels == self.class_index(name)).astype(np.float32)

    @property
    def masks(self) -> dict[str, MaskVolume]:
        return {name: MaskVolume(self.mask(name), hard=True) for name in self.classes}

    def relabel(self, classes: tuple[str, ...]) -> np.ndarray:
        """Label map restricted to `classes` (in that order); every other class -> 0"""
        lookup = np.zeros(len(self.classes) + 1, dtype=LABEL_DTYPE)
        for i, name in enumerate(classes):
            lookup[self.class_index(name)] = i + 1
        return lookup[self.labels]


class SubjectRecord(NamedTuple):
    id: str
    institution: str
    meta: str
    image: str
    labels: str


@dataclass
class DatasetManifest:
    subjects: list[SubjectRecord]
    classes: tuple[str, ...]
    institutions: tuple[str, ...]
    seed: int
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    generation: dict[str, Any] = field(default_factory=dict)
    institution_profiles: dict[str, dict[str, Any]] = field(default_factory=dict)
    root: Path = Path(".")

    def to_json(self) -> str:
        payload = {
            "magic": MANIFEST_MAGIC,
            "subjects": [r._asdict() for r in self.subjects],
            "classes": list(self.classes),
            "institutions": list(self.institutions),
            "seed": self.seed,
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "generation": self.generation,
            "institution_profiles": self.institution_profiles,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: Path | None = None) -> Path:
        path = path or self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            payload = json.loads(path.read_text())
        except OSError as e:
            raise DatasetIOError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: {e}") from e
        if payload.get("magic") != MANIFEST_MAGIC:
            raise FormatError(f"{path}: not a protoalign manifest")
        manifest = cls(
            subjects=[SubjectRecord(**r) for r in payload["subjects"]],
            classes=tuple(payload["classes"]),
            institutions=tuple(payload["institutions"]),
            seed=payload["seed"],
            shape=tuple(payload["shape"]),  # type: ignore[arg-type]
            spacing=tuple(payload["spacing"]),  # type: ignore[arg-type]
            generation=payload.get("generation", {}),
            institution_profiles=payload.get("institution_profiles", {}),
            root=path.parent,
        )
        for record in manifest.subjects:
            for p in (record.meta, record.image, record.labels):
                if not (manifest.root / p).exists():
                    raise DatasetIOError(f"manifest entry {record.id}: missing {p}")
        return manifest

    def record(self, subject_id: str) -> SubjectRecord:
        for r in self.subjects:
            if r.id == subject_id:
                return r
        raise KeyError(subject_id)

    def subject_ids(self, institution: str | None = None) -> list[str]:
        return [r.id for r in self.subjects if institution is None or r.institution == institution]

    def institution_of(self, subject_id: str) -> str:
        return self.record(subject_id).institution

    def load_subject(self, subject_id: str) -> LabeledSubject:
        r = self.record(subject_id)
        return load_subject(self.root / r.meta)


class SubjectPaths(NamedTuple):
    meta: Path
    image: Path
    labels: Path


def save_subject(s: LabeledSubject, directory: str | Path, seed: int | None = None) -> SubjectPaths:
    """Write meta.json, image.raw and labels.raw into `directory`"""
    directory = Path(directory)
    paths = SubjectPaths(directory / "meta.json", directory / "image.raw", directory / "labels.raw")
    meta = {
        "magic": SUBJECT_MAGIC,
        "id": s.id,
        "institution": s.institution,
        "shape": list(s.shape),
        "spacing": list(s.image.spacing),
        "classes": list(s.classes),
        "image_dtype": IMAGE_DTYPE.str,
        "labels_dtype": LABEL_DTYPE.str,
        "seed": seed,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths.image.write_bytes(np.ascontiguousarray(s.image.data, dtype=IMAGE_DTYPE).tobytes())
        paths.labels.write_bytes(np.ascontiguousarray(s.labels, dtype=LABEL_DTYPE).tobytes())
        paths.meta.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"cannot write subject {s.id} to {directory}: {e}") from e
    return paths


def _read_payload(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read {path}: {e}") from e
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_subject(paths: SubjectPaths | str | Path) -> LabeledSubject:
    """Read a subject written by save_subject. Accepts the paths, meta.json or its directory."""
    if not isinstance(paths, SubjectPaths):
        p = Path(paths)
        directory = p if p.is_dir() else p.parent
        paths = SubjectPaths(directory / "meta.json", directory / "image.raw", directory / "labels.raw")
    try:
        meta = json.loads(paths.meta.read_text())
    except OSError as e:
        raise DatasetIOError(f"cannot read {paths.meta}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{paths.meta}: {e}") from e
    if not isinstance(meta, dict) or meta.get("magic") != SUBJECT_MAGIC:
        raise FormatError(f"{paths.meta}: bad magic")
    shape = tuple(meta["shape"])
    if len(shape) != 3 or any(not isinstance(n, int) or n < 1 for n in shape):
        raise FormatError(f"{paths.meta}: invalid shape {shape}")
    image = _read_payload(paths.image, np.dtype(meta["image_dtype"]), shape).astype(np.float32)
    labels = _read_payload(paths.labels, np.dtype(meta["labels_dtype"]), shape).astype(LABEL_DTYPE)
    classes = tuple(meta["classes"])
    if labels.max(initial=0) > len(classes):
        raise FormatError(f"{paths.labels}: label value beyond {len(classes)} classes")
    if not np.isfinite(image).all():
        raise FormatError(f"{paths.image}: non-finite intensities")
    return LabeledSubject(
        id=meta["id"],
        image=Volume(image, tuple(meta["spacing"])),  # type: ignore[arg-type]
        labels=labels,
        classes=classes,
        institution=meta["institution"],
    )


########################
# Generation


def institution_ids(config: GenerationConfig) -> list[str]:
    return [f"inst{u}" for u in range(config.institutions)]


def _signed_unit(rng: np.random.Generator, size: int | None = None) -> Any:
    """Random sign times a magnitude in [0.5, 1], so offsets never vanish by chance"""
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(0.5, 1.0, size=size)


def institution_profile(config: GenerationConfig, index: int) -> dict[str, Any]:
    """Systematic spatial offset and imaging characteristics of one institution"""
    rng = np.random.default_rng([config.seed, 0, index])
    rotation, tilt, log_scale = _signed_unit(rng), _signed_unit(rng), _signed_unit(rng)
    translation = _signed_unit(rng, 3) * np.array([1.0, 1.0, 0.5])
    gamma, bias, noise = rng.uniform(-1, 1), rng.uniform(-1, 1, 4), rng.uniform(0, 1)

    m = config.institution_shift
    k = config.intensity_shift
    return {
        "rotation_deg": [
            m * 0.3 * config.institution_rotation_deg * tilt,
            0.0,
            m * config.institution_rotation_deg * rotation,
        ],
        "translation": (m * config.institution_translation * translation).tolist(),
        "scale": math.exp(m * config.institution_log_scale * log_scale),
        "gamma": math.exp(k * 0.25 * gamma),
        "bias": (k * 0.15 * bias).tolist(),
        "noise": config.noise * (1.0 + k * noise),
    }


def institution_transform(profile: dict[str, Any]) -> AffineTransform:
    return AffineTransform.from_parameters(
        rotation_deg=profile["rotation_deg"], translation=profile["translation"], scale=profile["scale"]
    )


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], amplitude: float) -> np.ndarray:
    """Low-frequency random field with max |value| == amplitude"""
    if amplitude == 0:
        return np.zeros(shape)
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=[n / 6 for n in shape], mode="wrap")
    peak = np.abs(noise).max()
    return amplitude * noise / peak if peak > 0 else noise


def _structure_mask(s: Structure, coords: np.ndarray) -> np.ndarray:
    x, y, z = (coords[..., i] - s.center[i] for i in range(3))
    rx, ry, rz = s.radii
    if s.kind == "ellipsoid":
        return (x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2 <= 1.0
    in_plane = (x / rx) ** 2 + (y / ry) ** 2
    within = np.abs(z) <= rz
    if s.kind == "tube":
        return (in_plane <= 1.0) & within
    if s.kind == "shell":
        inner = (x / (rx - s.thickness)) ** 2 + (y / (ry - s.thickness)) ** 2
        return (in_plane <= 1.0) & (inner > 1.0) & within
    raise ValueError(f"unknown structure kind {s.kind!r}")


def _jitter(s: Structure, rng: np.random.Generator, config: GenerationConfig) -> Structure:
    offset = config.center_jitter * rng.uniform(-1, 1, 3) * np.array([1.0, 1.0, 0.5])
    stretch = 1.0 + config.radius_jitter * rng.uniform(-1, 1)
    return s._replace(
        center=tuple(np.add(s.center, offset)),
        radii=tuple(np.multiply(s.radii, stretch)),
    )


def generate_subject(config: GenerationConfig, institution: int, index: int) -> LabeledSubject:
    """Deterministic given (config.seed, institution, index)"""
    profile = institution_profile(config, institution)
    rng = np.random.default_rng([config.seed, 1, institution, index])
    shape = config.shape

    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    # pull output voxels back into canonical anatomy space
    place = institution_transform(profile)
    inverse = np.linalg.inv(place.matrix.numpy())
    coords = (grid - place.translation.numpy()) @ inverse.T
    coords = coords + np.stack([_smooth_field(rng, shape, config.deformation) for _ in range(3)], -1)

    labels = np.zeros(shape, dtype=LABEL_DTYPE)
    for name in PRIORITY:
        if name not in config.classes:
            continue
        claimed = np.zeros(shape, dtype=bool)
        for s in CANONICAL_LAYOUT[name]:
            claimed |= _structure_mask(_jitter(s, rng, config), coords)
        labels[claimed & (labels == 0)] = config.classes.index(name) + 1

    missing = [c for i, c in enumerate(config.classes) if not (labels == i + 1).any()]
    if missing:
        raise GenerationError(f"subject inst{institution}/{index}: classes {missing} vanished")

    tissue = np.full(len(config.classes) + 1, BACKGROUND_INTENSITY)
    for i, name in enumerate(config.classes):
        tissue[i + 1] = INTENSITY[name] + rng.uniform(-0.04, 0.04)
    image = tissue[labels] + _smooth_field(rng, shape, 0.08)
    image = ndimage.gaussian_filter(image, sigma=0.7)

    # institution imaging: gamma, smooth multiplicative bias, noise
    image = np.clip(image, 1e-3, None) ** profile["gamma"]
    bx, by, bz, bxy = profile["bias"]
    x, y, z = grid[..., 0], grid[..., 1], grid[..., 2]
    image = image * (1.0 + bx * x + by * y + bz * z + bxy * x * y)
    image = image + rng.normal(0.0, profile["noise"], shape)

    lo, hi = image.min(), image.max()
    image = ((image - lo) / (hi - lo)).astype(np.float32)
    return LabeledSubject(
        id=f"inst{institution}_s{index:02d}",
        image=Volume(image, config.spacing),
        labels=labels,
        classes=tuple(config.classes),
        institution=f"inst{institution}",
    )


def generate_subjects(config: GenerationConfig) -> Iterator[LabeledSubject]:
    """All subjects, institution by institution"""
    for u in range(config.institutions):
        for k in range(config.subjects_per_institution):
            yield generate_subject(config, u, k)


def _generate_and_save(config: GenerationConfig, u: int, k: int, out: Path) -> SubjectRecord:
    s = generate_subject(config, u, k)
    paths = save_subject(s, out / "subjects" / s.id, seed=config.seed)
    return SubjectRecord(
        id=s.id,
        institution=s.institution,
        meta=str(paths.meta.relative_to(out)),
        image=str(paths.image.relative_to(out)),
        labels=str(paths.labels.relative_to(out)),
    )


def generate_dataset(config: GenerationConfig, out: str | Path, workers: int = 0) -> DatasetManifest:
    """Generate every subject into `out` and write manifest.json"""
    out = Path(out)
    jobs = [(u, k) for u in range(config.institutions) for k in range(config.subjects_per_institution)]
    logger.info(
        f"Generating {len(jobs)} subjects ({config.institutions} institutions, "
        f"{len(config.classes)} classes, shape {config.shape}) into {out}"
    )
    if workers > 0:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_generate_and_save, *zip(*[(config, u, k, out) for u, k in jobs])))
    else:
        records = [_generate_and_save(config, u, k, out) for u, k in jobs]

    manifest = DatasetManifest(
        subjects=records,
        classes=tuple(config.classes),
        institutions=tuple(institution_ids(config)),
        seed=config.seed,
        shape=config.shape,
        spacing=config.spacing,
        generation=to_dict(config),
        institution_profiles={
            f"inst{u}": institution_profile(config, u) for u in range(config.institutions)
        },
        root=out,
    )
    manifest.save()
    return manifest


def class_centroids(subject: LabeledSubject) -> dict[str, np.ndarray]:
    """Centroid of every class in voxel coordinates"""
    return {
        name: np.array(ndimage.center_of_mass(subject.labels == subject.class_index(name)))
        for name in subject.classes
    }


def volume_fractions(subject: LabeledSubject) -> dict[str, float]:
    size = subject.labels.size
    return {name: float((subject.labels == subject.class_index(name)).sum()) / size for name in subject.classes}
