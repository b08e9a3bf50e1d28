"""Synthetic slide-structured data, two-view augmentation, patient-level
splits and the binary embedding format.

Each slide belongs to one class and contributes ``patches_per_slide`` patch
vectors. A patch is either *lesion* tissue (drawn around its class centre) or
*background* tissue (drawn around one of a pool of centres shared by all
classes). Every patch inherits its slide's label as pseudo-label, so
background patches carry conflicting labels across slides. Each slide also
adds a random offset to all of its patches, mimicking a per-slide staining
shift.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidConfigError, TruncatedFileError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 3
    dim: int = 32
    slides_per_class: int = 12
    patches_per_slide: int = 50
    lesion_fraction: float = 0.6
    separation: float = 1.0
    noise: float = 0.35
    n_background: int = 4
    lesion_modes: int = 2
    background_scale: float = 1.0
    slide_shift: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidConfigError("need at least two classes")
        if not 0.0 < self.lesion_fraction <= 1.0:
            raise InvalidConfigError("lesion_fraction must lie in (0, 1]")
        for name in ("dim", "slides_per_class", "patches_per_slide", "n_background", "lesion_modes"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        for name in ("separation", "noise", "background_scale", "slide_shift"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be non-negative")


@dataclass
class SyntheticWsiDataset:
    patches: np.ndarray          # (N, D)
    slide_of_patch: np.ndarray   # (N,)
    slide_labels: np.ndarray     # (S,)
    lesion: np.ndarray           # (N,) hidden ground truth, evaluation only
    config: DataConfig
    class_centers: np.ndarray | None = None
    background_centers: np.ndarray | None = None

    @property
    def pseudo_labels(self) -> np.ndarray:
        return self.slide_labels[self.slide_of_patch]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def num_slides(self) -> int:
        return len(self.slide_labels)

    def patch_indices(self, slides) -> np.ndarray:
        return np.flatnonzero(np.isin(self.slide_of_patch, np.asarray(list(slides))))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.patches, self.slide_of_patch, self.slide_labels, self.lesion):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def generate(config: DataConfig) -> SyntheticWsiDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    K, D = config.num_classes, config.dim
    centers = rng.standard_normal((K, config.lesion_modes, D))
    centers /= np.linalg.norm(centers, axis=-1, keepdims=True)
    bg = rng.standard_normal((config.n_background, D))
    bg *= config.background_scale / np.linalg.norm(bg, axis=1, keepdims=True)

    S = K * config.slides_per_class
    P = config.patches_per_slide
    slide_labels = np.repeat(np.arange(K), config.slides_per_class)
    slide_of_patch = np.repeat(np.arange(S), P)
    n_lesion = max(1, int(round(config.lesion_fraction * P)))

    patches = np.empty((S * P, D))
    lesion = np.zeros(S * P, dtype=bool)
    for s in range(S):
        rows = slice(s * P, (s + 1) * P)
        is_lesion = np.zeros(P, dtype=bool)
        is_lesion[rng.permutation(P)[:n_lesion]] = True
        modes = rng.integers(0, config.lesion_modes, size=P)
        means = np.where(
            is_lesion[:, None],
            config.separation * centers[slide_labels[s], modes],
            bg[rng.integers(0, config.n_background, size=P)],
        )
        shift = config.slide_shift * rng.standard_normal(D)
        patches[rows] = means + shift + config.noise * rng.standard_normal((P, D))
        lesion[rows] = is_lesion
    return SyntheticWsiDataset(patches, slide_of_patch, slide_labels, lesion, config, centers, bg)


@dataclass(frozen=True)
class AugmentationPolicy:
    gaussian_sigma: float = 0.1
    mask_probability: float = 0.1

    def __post_init__(self):
        if self.gaussian_sigma < 0 or not 0.0 <= self.mask_probability < 1.0:
            raise InvalidConfigError("invalid augmentation policy")


def augment(x, policy: AugmentationPolicy, view_seed) -> np.ndarray:
    """Additive Gaussian noise, then independent coordinate dropout.

    ``view_seed`` is anything accepted by ``np.random.default_rng`` (ints or
    sequences of ints); the output is a pure function of (x, policy, seed).
    """
    x = np.asarray(x, dtype=np.float64)
    if policy.gaussian_sigma == 0 and policy.mask_probability == 0:
        return x.copy()
    rng = np.random.default_rng(view_seed)
    out = x + policy.gaussian_sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= policy.mask_probability
    return out * keep


def augment_batch(xs, ids, policy: AugmentationPolicy, seed: int, step: int, view: int) -> np.ndarray:
    """Augment rows independently with per-(patch, view) seeds."""
    return np.stack(
        [augment(x, policy, (seed, step, int(i), view)) for x, i in zip(xs, ids)]
    )


def _largest_remainder(n: int, ratios) -> list[int]:
    ratios = np.asarray(ratios, dtype=np.float64)
    raw = n * ratios / ratios.sum()
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_patient_level(
    dataset: SyntheticWsiDataset, ratios=(6, 1, 3), seed: int = 0
) -> dict[str, np.ndarray]:
    """Stratified slide-level split. Returns sorted slide indices per split."""
    out = {name: [] for name in SPLITS}
    for y in range(dataset.num_classes):
        slides = np.flatnonzero(dataset.slide_labels == y)
        if len(slides) < len(ratios):
            raise InvalidConfigError(
                f"class {y} has {len(slides)} slides, fewer than the {len(ratios)} splits"
            )
        counts = _largest_remainder(len(slides), ratios)
        exact = len(slides) * np.asarray(ratios) / sum(ratios)
        if not np.allclose(exact, counts):
            log.info("class %d: %d slides split as %s (ratios %s rounded)", y, len(slides), counts, ratios)
        perm = np.random.default_rng((seed, y)).permutation(slides)
        start = 0
        for name, c in zip(SPLITS, counts):
            out[name].extend(perm[start:start + c].tolist())
            start += c
    return {name: np.array(sorted(v), dtype=np.int64) for name, v in out.items()}


# --- embedding file format ------------------------------------------------
# "LEMB" | u32 version | u64 count | u32 dim | count*dim float64 (row-major)
# | count int64 ids. All little-endian.

EMB_MAGIC = b"LEMB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIQI")


def write_embeddings(path, ids, vectors) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f8")
    ids = np.ascontiguousarray(ids, dtype="<i8")
    if vectors.ndim != 2 or len(ids) != len(vectors):
        raise FileFormatError("need a 2-D vector array with one id per row")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, len(vectors), vectors.shape[1]))
        fh.write(vectors.tobytes())
        fh.write(ids.tobytes())


def read_embeddings(path, expected_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, vectors)``."""
    blob = Path(path).read_bytes()
    if len(blob) < _EMB_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the header")
    magic, version, count, dim = _EMB_HEADER.unpack_from(blob)
    if magic != EMB_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FileFormatError(f"{path}: dim {dim} != expected {expected_dim}")
    need = _EMB_HEADER.size + count * dim * 8 + count * 8
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, header implies {need}")
    if len(blob) > need:
        raise FileFormatError(f"{path}: {len(blob) - need} trailing bytes; header inconsistent")
    off = _EMB_HEADER.size
    vectors = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=off).reshape(count, dim)
    ids = np.frombuffer(blob, dtype="<i8", count=count, offset=off + count * dim * 8)
    return ids.astype(np.int64), vectors.astype(np.float64)


def read_embeddings_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV import: one row per vector, ``id,v0,v1,...``; optional header row."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                vals = [float(v) for v in row[1:]]
                ident = int(row[0])
            except ValueError:
                if i == 0:
                    continue
                raise FileFormatError(f"{path}: unparsable row {i}")
            if rows and len(vals) != len(rows[0]):
                raise FileFormatError(f"{path}: row {i} has {len(vals)} values, expected {len(rows[0])}")
            ids.append(ident)
            rows.append(vals)
    return np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def write_embeddings_csv(path, ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"v{j}" for j in range(vectors.shape[1])])
        for i, v in zip(ids, vectors):
            w.writerow([int(i)] + [repr(float(x)) for x in v])


# --- dataset directory ----------------------------------------------------

def save_dataset(dataset: SyntheticWsiDataset, splits: dict[str, np.ndarray], out_dir) -> dict[str, str]:
    """Write patches.lemb, patches.csv, slides.csv and dataset.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "patches.lemb", np.arange(len(dataset.patches)), dataset.patches)
    split_of = {int(s): name for name, idx in splits.items() for s in idx}
    with open(out / "slides.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "label", "split"])
        for s, y in enumerate(dataset.slide_labels):
            w.writerow([s, int(y), split_of[s]])
    with open(out / "patches.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_id", "slide_id", "pseudo_label", "lesion"])
        for i, (s, lab, les) in enumerate(zip(dataset.slide_of_patch, dataset.pseudo_labels, dataset.lesion)):
            w.writerow([i, int(s), int(lab), int(les)])
    meta = {"config": asdict(dataset.config), "fingerprint": dataset.fingerprint(),
            "split_fingerprint": split_fingerprint(splits)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {k: str(out / k) for k in ("patches.lemb", "patches.csv", "slides.csv", "dataset.json")}


def load_dataset(data_dir) -> tuple[SyntheticWsiDataset, dict[str, np.ndarray]]:
    d = Path(data_dir)
    meta = json.loads((d / "dataset.json").read_text())
    config = DataConfig(**meta["config"])
    ids, patches = read_embeddings(d / "patches.lemb")
    slide_labels, split_rows = [], {name: [] for name in SPLITS}
    with open(d / "slides.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            slide_labels.append(int(row["label"]))
            split_rows[row["split"]].append(int(row["slide_id"]))
    slide_of, lesion = np.empty(len(ids), dtype=np.int64), np.empty(len(ids), dtype=bool)
    with open(d / "patches.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["patch_id"])
            slide_of[i] = int(row["slide_id"])
            lesion[i] = row["lesion"] == "1"
    ds = SyntheticWsiDataset(patches[np.argsort(ids)], slide_of, np.array(slide_labels, dtype=np.int64), lesion, config)
    return ds, {k: np.array(sorted(v), dtype=np.int64) for k, v in split_rows.items()}


def split_fingerprint(splits: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in SPLITS:
        h.update(name.encode())
        h.update(np.asarray(splits[name], dtype="<i8").tobytes())
    return h.hexdigest()[:16]
