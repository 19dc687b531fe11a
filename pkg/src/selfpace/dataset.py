"""Patch containers, deterministic class-stratified splits, a bit-exact
binary patch file format, and the synthetic three-class texture generator
used in place of real CT data.

The three classes mimic the structure of the original task:

* class 0 -- one dark circular structure with a faint bright rim on a
  tissue-like background (airway-like),
* class 1 -- a darker field speckled with many small dark blobs
  (emphysema-like),
* class 2 -- smooth, brighter tissue texture with no structures.

Class base intensities are disjoint, so with ``noise_sigma=0`` a per-patch
mean threshold separates the classes perfectly. The per-pixel noise AND a
per-patch brightness jitter both scale with ``noise_sigma``; with realistic
noise the patch means overlap heavily and a classifier has to rely on the
spatial structure instead.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError

PATCH_SIZE = 36
N_CLASSES = 3

ORIGIN_MANUAL = "manual"
ORIGIN_VIRTUAL = "virtual"


@dataclass
class LabeledPatch:
    pixels: np.ndarray  # [1, 36, 36] float64 in [0,1]
    label: int
    origin: str = ORIGIN_MANUAL


@dataclass
class UnlabeledPatch:
    pixels: np.ndarray
    patch_id: int


@dataclass(frozen=True)
class SplitSpec:
    train_per_class: int = 400
    verify_per_class: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.train_per_class < 1 or self.verify_per_class < 1:
            raise ParameterError("split counts must be >= 1")


@dataclass(frozen=True)
class ClassTexture:
    """Texture parameters for one synthetic class."""

    base_intensity: float
    blob_density: float = 0.0            # expected blob count per patch
    blob_radius: tuple[float, float] = (1.0, 2.5)
    blob_contrast: float = 0.25          # how far blobs dip below the base
    ring: bool = False                   # draw one large dark disk with a rim


DEFAULT_TEXTURES = (
    ClassTexture(base_intensity=0.52, ring=True, blob_contrast=0.35),
    ClassTexture(base_intensity=0.30, blob_density=10.0, blob_radius=(1.0, 2.5)),
    ClassTexture(base_intensity=0.68),
)


@dataclass(frozen=True)
class SyntheticSpec:
    counts_per_class: tuple[int, int, int] = (600, 600, 600)
    noise_sigma: float = 0.12
    mixture_fraction: float = 0.2        # fraction of patches blended with another class
    pool_size: int = 0
    seed: int = 0
    textures: tuple[ClassTexture, ClassTexture, ClassTexture] = DEFAULT_TEXTURES

    def __post_init__(self):
        if any(c < 0 for c in self.counts_per_class):
            raise ParameterError("counts_per_class must be >= 0")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not 0.0 <= self.mixture_fraction <= 1.0:
            raise ParameterError("mixture_fraction must be in [0,1]")


# ---------------------------------------------------------------------------
# texture synthesis
# ---------------------------------------------------------------------------

_GRID = np.arange(PATCH_SIZE, dtype=np.float64)
_YY, _XX = np.meshgrid(_GRID, _GRID, indexing="ij")


def _smooth_field(rng: np.random.Generator, amplitude: float, coarse: int = 5) -> np.ndarray:
    """Low-frequency field: coarse Gaussian grid, bilinearly upsampled."""
    grid = rng.normal(0.0, 1.0, (coarse, coarse))
    xs = np.linspace(0.0, coarse - 1.0, PATCH_SIZE)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, coarse - 1)
    frac = xs - i0
    rows = grid[i0] * (1.0 - frac)[:, None] + grid[i1] * frac[:, None]
    out = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i1] * frac[None, :]
    return amplitude * out


def _add_disk(img: np.ndarray, cy: float, cx: float, radius: float, delta: float) -> None:
    """Add a soft-edged disk of intensity offset `delta`."""
    dist = np.sqrt((_YY - cy) ** 2 + (_XX - cx) ** 2)
    img += delta * np.clip(radius - dist, 0.0, 1.0)


def _class_structure(rng: np.random.Generator, tex: ClassTexture) -> np.ndarray:
    """Noise-free structure for one patch of one class."""
    img = np.full((PATCH_SIZE, PATCH_SIZE), tex.base_intensity)
    img += _smooth_field(rng, amplitude=0.03)
    if tex.ring:
        radius = rng.uniform(3.5, 7.5)
        margin = radius + 2.0
        cy = rng.uniform(margin, PATCH_SIZE - 1 - margin)
        cx = rng.uniform(margin, PATCH_SIZE - 1 - margin)
        # bright rim first, dark lumen on top
        _add_disk(img, cy, cx, radius + 1.5, 0.10)
        _add_disk(img, cy, cx, radius, -(tex.blob_contrast + 0.10))
    if tex.blob_density > 0:
        n_blobs = max(3, rng.poisson(tex.blob_density))
        for _ in range(n_blobs):
            r = rng.uniform(*tex.blob_radius)
            cy = rng.uniform(r, PATCH_SIZE - 1 - r)
            cx = rng.uniform(r, PATCH_SIZE - 1 - r)
            _add_disk(img, cy, cx, r, -tex.blob_contrast)
    return img


def _make_patch(rng: np.random.Generator, label: int, spec: SyntheticSpec) -> np.ndarray:
    img = _class_structure(rng, spec.textures[label])
    if spec.mixture_fraction > 0 and rng.random() < spec.mixture_fraction:
        # boundary-like patch: blend in a minority share of another class's
        # structure, then restore the dominant class's mean so the label
        # stays unambiguous
        other = int((label + rng.integers(1, N_CLASSES)) % N_CLASSES)
        alpha = rng.uniform(0.2, 0.4)
        own_mean = img.mean()
        img = (1.0 - alpha) * img + alpha * _class_structure(rng, spec.textures[other])
        img += own_mean - img.mean()
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma)  # per-patch brightness jitter
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 1/1024 steps so the f32 storage round-trip is bit-exact
    img = np.round(img * 1024.0) / 1024.0
    return img[None, :, :]


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[LabeledPatch], list[UnlabeledPatch], np.ndarray]:
    """Deterministically generate (labeled set, unlabeled pool, pool truth).

    The truth array holds the hidden true label of pool patch ``i`` at index
    ``i``; it is returned separately so nothing downstream of the pool can
    read it by accident.
    """
    rng = np.random.default_rng(spec.seed)
    labeled: list[LabeledPatch] = []
    for label, count in enumerate(spec.counts_per_class):
        for _ in range(count):
            labeled.append(LabeledPatch(_make_patch(rng, label, spec), label))
    pool: list[UnlabeledPatch] = []
    truth = np.empty(spec.pool_size, dtype=np.int64)
    for i in range(spec.pool_size):
        label = int(rng.integers(0, N_CLASSES))
        truth[i] = label
        pool.append(UnlabeledPatch(_make_patch(rng, label, spec), patch_id=i))
    return labeled, pool, truth


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split(
    dataset: list[LabeledPatch], spec: SplitSpec
) -> tuple[list[LabeledPatch], list[LabeledPatch]]:
    """Per-class split into exactly (train_per_class, verify_per_class);
    disjoint and deterministic in the seed."""
    by_class: dict[int, list[int]] = {c: [] for c in range(N_CLASSES)}
    for i, p in enumerate(dataset):
        if p.label not in by_class:
            raise DataError(f"patch label {p.label} outside 0..{N_CLASSES - 1}")
        by_class[p.label].append(i)
    need = spec.train_per_class + spec.verify_per_class
    rng = np.random.default_rng(spec.seed)
    train_idx: list[int] = []
    verify_idx: list[int] = []
    for c in range(N_CLASSES):
        idx = by_class[c]
        if len(idx) < need:
            raise DataError(
                f"class {c} has {len(idx)} patches, split needs {need}"
            )
        perm = rng.permutation(len(idx))
        train_idx.extend(idx[k] for k in perm[: spec.train_per_class])
        verify_idx.extend(idx[k] for k in perm[spec.train_per_class:need])
    return [dataset[i] for i in train_idx], [dataset[i] for i in verify_idx]


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

PATCH_MAGIC = b"SPCN"
PATCH_VERSION = 1


def save_patches(path, patches: list) -> None:
    """Write patches in the binary patch format.

    Header: magic "SPCN", version u32 LE, height u32, width u32, channels
    u32, count u32, labels_present u8. Then `count` records, each a label
    byte (labeled files only) followed by H*W*C float32 LE pixels. Pixels are
    stored as f32; the generator quantizes values so the f64->f32->f64 round
    trip is exact.
    """
    if len(patches) == 0:
        raise DataError("refusing to save an empty patch collection")
    labels_present = isinstance(patches[0], LabeledPatch)
    c, h, w = patches[0].pixels.shape
    out = bytearray()
    out += PATCH_MAGIC
    out += struct.pack("<IIIIIB", PATCH_VERSION, h, w, c, len(patches), int(labels_present))
    for p in patches:
        if p.pixels.shape != (c, h, w):
            raise DataError(f"inconsistent patch shape {p.pixels.shape} vs {(c, h, w)}")
        if labels_present != isinstance(p, LabeledPatch):
            raise DataError("cannot mix labeled and unlabeled patches in one file")
        if labels_present:
            out += struct.pack("<B", p.label)
        out += np.ascontiguousarray(p.pixels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_patches(path) -> list:
    """Read a patch file back; labeled files yield LabeledPatch (origin
    "manual"), unlabeled files yield UnlabeledPatch with ids in file order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 25:
        raise FormatError("file shorter than patch header", offset=len(data))
    if data[:4] != PATCH_MAGIC:
        raise FormatError("bad patch-file magic", offset=0)
    version, h, w, c, count, labels_present = struct.unpack("<IIIIIB", data[4:25])
    if version != PATCH_VERSION:
        raise FormatError(f"unsupported patch-file version {version}", offset=4)
    if labels_present not in (0, 1):
        raise FormatError(f"labels_present byte must be 0/1, got {labels_present}", offset=24)
    pixel_bytes = 4 * h * w * c
    record = pixel_bytes + (1 if labels_present else 0)
    expected = 25 + count * record
    if len(data) != expected:
        raise FormatError(
            f"payload is {len(data) - 25} bytes, header declares {count} records "
            f"({count * record} bytes)",
            offset=min(len(data), expected),
        )
    patches: list = []
    pos = 25
    for i in range(count):
        if labels_present:
            label = data[pos]
            if label >= N_CLASSES:
                raise FormatError(f"label {label} out of range", offset=pos)
            pos += 1
        pixels = (
            np.frombuffer(data, dtype="<f4", count=h * w * c, offset=pos)
            .astype(np.float64)
            .reshape(c, h, w)
        )
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise FormatError(f"pixels outside [0,1] in record {i}", offset=pos)
        pos += pixel_bytes
        if labels_present:
            patches.append(LabeledPatch(pixels, int(label)))
        else:
            patches.append(UnlabeledPatch(pixels, patch_id=i))
    return patches


def mean_threshold_accuracy(patches: list[LabeledPatch]) -> float:
    """Accuracy of the best mean-intensity threshold classifier, used as the
    separability oracle for noise-free synthetic data."""
    means = np.array([p.pixels.mean() for p in patches])
    labels = np.array([p.label for p in patches])
    class_means = [means[labels == c] for c in range(N_CLASSES)]
    order = np.argsort([m.mean() for m in class_means])
    cuts = [
        0.5 * (class_means[order[i]].max() + class_means[order[i + 1]].min())
        for i in range(N_CLASSES - 1)
    ]
    predicted_rank = np.searchsorted(cuts, means)
    predicted = np.asarray(order)[predicted_rank]
    return float((predicted == labels).mean())
