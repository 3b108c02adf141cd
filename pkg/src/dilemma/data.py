"""Datasets, two-view augmentation, patchification and batch assembly."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import ConfigError, CorruptionPlan, RngStream, derive_stream

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

DLMA_MAGIC = b"DLMA"
DLMA_VERSION = 1
_DLMA_HEADER = struct.Struct("<4sIIIII")
_UNLABELED_U32 = 0xFFFFFFFF

VARIANTS = ("dilemma", "pos_correction", "partial_jigsaw", "flip")
MODES = ("teacher-student", "simclr")


class IngestionError(IOError):
    """Malformed or missing dataset file."""


class AssemblyError(ValueError):
    """Inconsistent inputs to batch assembly."""


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    label: int = -1


@dataclass
class ImageDataset:
    """A stack of equally sized images with integer labels (-1 when unlabeled)."""

    images: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(self.images[i], int(self.labels[i]))

    def subset(self, index) -> "ImageDataset":
        index = np.asarray(index)
        return ImageDataset(self.images[index], self.labels[index], dict(self.meta))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# -- CIFAR-10 binary ------------------------------------------------------------

def read_cifar_batch(path) -> ImageDataset:
    """Parse one CIFAR-10 binary batch: per record a label byte then 3072
    channel-planar pixel bytes (R plane, G plane, B plane, each 32x32 row-major)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: file not found") from exc
    if len(raw) % CIFAR_RECORD_BYTES:
        offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise IngestionError(f"{path}: truncated record at byte offset {offset}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(
            f"{path}: label {labels[bad[0]]} out of range 0-9 at byte offset {bad[0] * CIFAR_RECORD_BYTES}"
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageDataset(pixels, labels, {"source": str(path)})


def _concat(datasets: Sequence[ImageDataset], meta: dict) -> ImageDataset:
    return ImageDataset(
        np.concatenate([d.images for d in datasets]), np.concatenate([d.labels for d in datasets]), meta
    )


def load_cifar10(dir_path) -> tuple[ImageDataset, ImageDataset]:
    """Load the five training batches and the test batch from a CIFAR-10 binary directory."""
    root = Path(dir_path)
    if not (root / CIFAR_TEST_FILES[0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train = _concat([read_cifar_batch(root / f) for f in CIFAR_TRAIN_FILES], {"source": "cifar10/train"})
    test = _concat([read_cifar_batch(root / f) for f in CIFAR_TEST_FILES], {"source": "cifar10/test"})
    return train, test


# -- synthetic shape-arrangement data -----------------------------------------------

SHAPES = ("disc", "ring", "square", "diamond", "cross")


def render_shape(kind: str, fg: np.ndarray, bg: np.ndarray, size: int) -> np.ndarray:
    """A centred ``kind`` in colour ``fg`` on a ``bg`` square of ``size`` pixels."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5 - size / 2
    r, ay, ax = np.hypot(yy, xx), np.abs(yy), np.abs(xx)
    masks = {
        "disc": r < 0.4 * size,
        "ring": np.abs(r - 0.3 * size) < 0.12 * size,
        "square": np.maximum(ay, ax) < 0.3 * size,
        "diamond": ay + ax < 0.45 * size,
        "cross": (np.minimum(ay, ax) < 0.12 * size) & (np.maximum(ay, ax) < 0.45 * size),
    }
    if kind not in masks:
        raise ConfigError(f"unknown shape '{kind}'")
    return (bg + (fg - bg) * masks[kind][..., None]).astype(np.float32)


def make_tile_bank(seed: int, n_motifs: int, motif: int, tile_size: int) -> np.ndarray:
    """Tiles of ``n_motifs`` rendered shapes, each cut into ``motif x motif`` tiles.

    Bank index ``(k * motif + r) * motif + c`` is row ``r``, column ``c`` of motif ``k``.
    """
    gen = derive_stream(seed, "synth-tiles").gen
    px = motif * tile_size
    shapes = [
        render_shape(SHAPES[k % len(SHAPES)], gen.uniform(0.1, 0.9, 3), gen.uniform(0.1, 0.9, 3), px)
        for k in range(n_motifs)
    ]
    tiles = np.stack(shapes).reshape(n_motifs, motif, tile_size, motif, tile_size, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(n_motifs * motif * motif, tile_size, tile_size, 3))


def motif_arrangement(perm: np.ndarray, grid: int, motif: int) -> np.ndarray:
    """Tile-level bank indices for a grid whose motif slots hold motifs ``perm`` (row-major)."""
    slots = grid // motif
    i, j = np.divmod(np.arange(grid * grid), grid)
    k = perm[(i // motif) * slots + j // motif]
    return (k * motif + i % motif) * motif + j % motif


def compose_arrangement(bank: np.ndarray, arrangement: np.ndarray, grid: int) -> np.ndarray:
    p = bank.shape[1]
    tiles = bank[arrangement].reshape(grid, grid, p, p, bank.shape[-1])
    return tiles.transpose(0, 2, 1, 3, 4).reshape(grid * p, grid * p, bank.shape[-1])


def gen_shape_arrangement(
    seed: int,
    n_per_class: int,
    grid: int = 8,
    n_classes: int = 10,
    *,
    tile_size: int = 4,
    motif: int = 2,
    noise: float = 0.03,
    brightness_jitter: float = 0.05,
    sample_offset: int = 0,
) -> ImageDataset:
    """Images whose class is only the spatial arrangement of a shared tile multiset.

    The grid is split into ``motif x motif`` slots, each holding one shape
    motif; every class is a distinct fixed permutation of the same motifs, so
    each class uses every bank tile exactly once and tile histograms are
    identical across classes. Per-sample variation is pixel noise plus a global
    brightness offset, neither of which depends on class. ``sample_offset``
    shifts the per-sample streams so disjoint splits can be drawn with the same
    seed (same bank and arrangements).
    """
    if motif < 1 or grid % motif:
        raise ConfigError(f"motif size {motif} must divide the grid {grid}")
    n_motifs = (grid // motif) ** 2
    if n_classes > math.factorial(n_motifs):
        raise ConfigError(f"{n_classes} classes exceed the {math.factorial(n_motifs)} motif arrangements")

    bank = make_tile_bank(seed, n_motifs, motif, tile_size)
    gen = derive_stream(seed, "synth-arrangements").gen
    arrangements: list[np.ndarray] = []
    seen: set[tuple] = set()
    while len(arrangements) < n_classes:
        perm = gen.permutation(n_motifs)
        key = tuple(perm.tolist())
        if key not in seen:
            seen.add(key)
            arrangements.append(motif_arrangement(perm, grid, motif))
    arrangements_arr = np.stack(arrangements)
    clean = np.stack([compose_arrangement(bank, a, grid) for a in arrangements_arr])

    images = np.empty((n_classes * n_per_class, *clean.shape[1:]), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for k, c in enumerate(labels):
        g = derive_stream(seed, "synth-sample", 0, sample_offset + k).gen
        img = clean[c] + g.normal(0.0, noise, size=clean.shape[1:]) + g.uniform(-brightness_jitter, brightness_jitter)
        images[k] = np.clip(img, 0.0, 1.0)
    order = derive_stream(seed, "synth-order", 0, sample_offset).gen.permutation(len(labels))
    meta = {
        "source": "shape-arrangement",
        "seed": seed,
        "grid": grid,
        "tile_size": tile_size,
        "motif": motif,
        "arrangements": arrangements_arr,
        "tile_bank": bank,
    }
    return ImageDataset(images[order], labels[order], meta)


# -- flat binary container --------------------------------------------------------

def write_dlma(path, data: np.ndarray, labels: np.ndarray) -> None:
    """Write rows as ``label u32`` + float32 payload after a DLMA header.

    ``data`` is (n, H, W, C); feature matrices are written as (n, 1, D, 1).
    Label -1 is stored as 0xFFFFFFFF.
    """
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[:, None, :, None]
    n, h, w, c = data.shape
    rec = np.dtype([("label", "<u4"), ("pixels", "<f4", (h * w * c,))])
    out = np.empty(n, dtype=rec)
    out["label"] = np.where(np.asarray(labels) < 0, _UNLABELED_U32, labels).astype(np.uint32)
    out["pixels"] = data.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_DLMA_HEADER.pack(DLMA_MAGIC, DLMA_VERSION, n, h, w, c))
        fh.write(out.tobytes())


def read_dlma(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _DLMA_HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    magic, version, n, h, w, c = _DLMA_HEADER.unpack_from(raw)
    if magic != DLMA_MAGIC:
        raise IngestionError(f"{path}: bad magic {magic!r}")
    if version != DLMA_VERSION:
        raise IngestionError(f"{path}: unsupported version {version}")
    rec = np.dtype([("label", "<u4"), ("pixels", "<f4", (h * w * c,))])
    expected = _DLMA_HEADER.size + n * rec.itemsize
    if len(raw) != expected:
        raise IngestionError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated at offset {len(raw)})")
    rows = np.frombuffer(raw, dtype=rec, offset=_DLMA_HEADER.size)
    labels = rows["label"].astype(np.int64)
    labels[labels == _UNLABELED_U32] = -1
    return rows["pixels"].reshape(n, h, w, c).astype(np.float32), labels


def save_dataset(path, dataset: ImageDataset) -> None:
    write_dlma(path, dataset.images, dataset.labels)


def load_dataset(path) -> ImageDataset:
    images, labels = read_dlma(path)
    return ImageDataset(images, labels, {"source": str(path)})


# -- augmentation ---------------------------------------------------------------

@dataclass
class AugmentConfig:
    input_size: int = 32
    mode: str = "full"  # "full" or "weak" (random resized crop only)
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    crop_ratio_min: float = 3.0 / 4.0
    crop_ratio_max: float = 4.0 / 3.0
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    gray_p: float = 0.2

    def __post_init__(self):
        if self.mode not in ("full", "weak"):
            raise ConfigError(f"unknown augmentation mode '{self.mode}'")


@dataclass
class AugmentedPair:
    view1: np.ndarray
    view2: np.ndarray


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(img.dtype)[:, None, None]
    wx = (xs - x0).astype(img.dtype)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def random_resized_crop_box(h: int, w: int, gen: np.random.Generator, cfg: AugmentConfig) -> tuple[int, int, int, int]:
    if cfg.crop_scale_min >= 1.0:
        return 0, 0, h, w
    area = h * w
    log_lo, log_hi = math.log(cfg.crop_ratio_min), math.log(cfg.crop_ratio_max)
    for _ in range(10):
        target = area * gen.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        ratio = math.exp(gen.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop at the clamped aspect ratio
    in_ratio = w / h
    if in_ratio < cfg.crop_ratio_min:
        cw, ch = w, int(round(w / cfg.crop_ratio_min))
    elif in_ratio > cfg.crop_ratio_max:
        ch, cw = h, int(round(h * cfg.crop_ratio_max))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _blend(img: np.ndarray, other, factor: float) -> np.ndarray:
    return np.clip(other + (img - other) * factor, 0.0, 1.0)


def augment_view(img: np.ndarray, gen: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w = img.shape[:2]
    top, left, ch, cw = random_resized_crop_box(h, w, gen, cfg)
    view = resize_bilinear(img[top:top + ch, left:left + cw], cfg.input_size, cfg.input_size)
    if cfg.mode == "weak":
        return view.astype(np.float32)
    if gen.random() < cfg.flip_p:
        view = view[:, ::-1]
    if gen.random() < cfg.jitter_p:
        b = gen.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        c = gen.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        s = gen.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        view = np.clip(view * b, 0.0, 1.0)
        view = _blend(view, float((view @ _LUMA).mean()), c)
        view = _blend(view, (view @ _LUMA)[..., None], s)
    if gen.random() < cfg.gray_p:
        view = np.repeat((view @ _LUMA)[..., None], 3, axis=-1)
    return np.ascontiguousarray(view, dtype=np.float32)


def augment_pair(img, rng: RngStream, cfg: AugmentConfig) -> AugmentedPair:
    """Two independent augmentations of the same image, drawn in order from ``rng``."""
    pixels = img.pixels if isinstance(img, ImageRecord) else np.asarray(img, dtype=np.float32)
    return AugmentedPair(augment_view(pixels, rng.gen, cfg), augment_view(pixels, rng.gen, cfg))


# -- tokens -----------------------------------------------------------------------

def patchify(view: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (..., H, W, C) into (..., N, P*P*C) row-major tiles."""
    *lead, h, w, c = view.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = view.reshape(*lead, gh, p, gw, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, p * p * c))


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    *lead, n, _ = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    p = patch_size
    x = tokens.reshape(*lead, g, g, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return np.ascontiguousarray(x.reshape(*lead, g * p, g * p, channels))


def flip_tile(tile: np.ndarray, patch_size: int, channels: int = 3) -> np.ndarray:
    return tile.reshape(patch_size, patch_size, channels)[:, ::-1].reshape(-1)


@dataclass
class TokenBatch:
    """Tokens for one encoder pass. The CLS token is added by the model at index 0.

    ``positions`` index the positional table: 0 means no location encoding,
    ``g + 1`` is grid position ``g``. ``aux_labels`` hold binary labels
    (mismatch / flip) or true grid indices (position targets) depending on the
    loss variant; ``aux_mask`` marks tokens that enter the auxiliary loss.
    """

    tiles: np.ndarray
    positions: np.ndarray
    grid_index: np.ndarray
    aux_labels: np.ndarray
    aux_mask: np.ndarray
    sparsity: float
    plans: list = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.tiles.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tiles.shape[1]

    @property
    def is_dense(self) -> bool:
        return self.sparsity == 0.0


@dataclass
class AssembledBatch:
    """Encoder inputs for one iteration plus the contrastive pairing.

    ``pairs`` lists (student_idx, target_kind, target_idx) where target_kind is
    "teacher" or "student".
    """

    students: list[TokenBatch]
    teachers: list[TokenBatch]
    pairs: list[tuple[int, str, int]]
    sparsity: float

    @property
    def batch_size(self) -> int:
        return self.students[0].batch_size

    @property
    def is_dense(self) -> bool:
        return self.sparsity == 0.0


def dense_tokens(tiles: np.ndarray, strip_positions: bool = False) -> TokenBatch:
    """Uncorrupted, full-grid tokens (teacher input / evaluation input)."""
    b, n = tiles.shape[:2]
    grid = np.broadcast_to(np.arange(n), (b, n)).copy()
    positions = np.zeros_like(grid) if strip_positions else grid + 1
    zeros = np.zeros((b, n), dtype=np.int64)
    return TokenBatch(tiles, positions, grid, zeros, zeros.copy(), 0.0)


def corrupt_tokens(
    tiles: np.ndarray,
    plan: CorruptionPlan,
    variant: str,
    patch_size: int,
    flip_rng: Optional[RngStream] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Apply one plan to one sample's (N, F) tiles.

    Returns (tiles, positions, aux_labels, aux_mask) for the kept tokens.
    """
    kept = plan.kept
    out = tiles[kept].copy()
    n = len(kept)
    if variant == "dilemma":
        return out, plan.pos_assignment + 1, plan.labels.copy(), np.ones(n, np.int64)
    if variant == "pos_correction":
        return out, plan.pos_assignment + 1, kept.copy(), np.ones(n, np.int64)
    if variant == "partial_jigsaw":
        mask = plan.labels.copy()
        positions = np.where(mask == 1, 0, kept + 1)
        return out, positions, kept.copy(), mask
    if variant == "flip":
        if plan.is_dense or plan.theta == 0.0:
            flips = np.zeros(n, np.int64)
        else:
            if flip_rng is None:
                raise AssemblyError("flip variant needs a flip stream per sample")
            flips = (flip_rng.gen.random(n) < plan.theta).astype(np.int64)
        channels = tiles.shape[1] // (patch_size * patch_size)
        for t in np.flatnonzero(flips):
            out[t] = flip_tile(out[t], patch_size, channels)
        return out, kept + 1, flips, np.ones(n, np.int64)
    raise AssemblyError(f"unknown loss variant '{variant}'")


def sparse_tokens(
    views_tiles: np.ndarray,
    plans: Sequence[CorruptionPlan],
    variant: str,
    patch_size: int,
    flip_rngs: Optional[Sequence[RngStream]] = None,
) -> TokenBatch:
    if len(plans) != len(views_tiles):
        raise AssemblyError(f"{len(plans)} plans for {len(views_tiles)} samples")
    sparsities = {p.sparsity for p in plans}
    if len(sparsities) != 1:
        raise AssemblyError(f"plans in one batch must share a sparsity, got {sorted(sparsities)}")
    counts = {len(p.kept) for p in plans}
    if len(counts) != 1:
        raise AssemblyError("plans in one batch must keep the same number of tokens")
    parts = [
        corrupt_tokens(t, p, variant, patch_size, None if flip_rngs is None else flip_rngs[i])
        for i, (t, p) in enumerate(zip(views_tiles, plans))
    ]
    tiles, positions, labels, mask = (np.stack(x) for x in zip(*parts))
    grid = np.stack([p.kept for p in plans])
    return TokenBatch(tiles, positions, grid, labels, mask, sparsities.pop(), list(plans))


def assemble_batch(
    pairs: Sequence[AugmentedPair],
    plans: Sequence[CorruptionPlan],
    *,
    patch_size: int,
    variant: str = "dilemma",
    mode: str = "teacher-student",
    symmetric: bool = False,
    second_plans: Optional[Sequence[CorruptionPlan]] = None,
    flip_rngs: Optional[Sequence[RngStream]] = None,
) -> AssembledBatch:
    """Build the student (sparse, corrupted) and teacher (dense) token batches.

    Teacher-student: the student sees view2 corrupted by ``plans`` and the
    teacher sees all of view1; ``symmetric`` adds the swapped pass, corrupting
    view1 with ``second_plans``. SimCLR mode corrupts both views (``plans`` for
    view1, ``second_plans`` for view2) and builds no teacher batch.
    """
    if mode not in MODES:
        raise AssemblyError(f"unknown mode '{mode}'")
    if variant not in VARIANTS:
        raise AssemblyError(f"unknown loss variant '{variant}'")
    if len(pairs) != len(plans):
        raise AssemblyError(f"{len(plans)} plans for a batch of {len(pairs)} samples")
    need_second = mode == "simclr" or symmetric
    if need_second and (second_plans is None or len(second_plans) != len(pairs)):
        raise AssemblyError("this mode needs a second plan per sample")

    tiles1 = patchify(np.stack([p.view1 for p in pairs]), patch_size)
    tiles2 = patchify(np.stack([p.view2 for p in pairs]), patch_size)
    sparsity = plans[0].sparsity

    if mode == "simclr":
        students = [
            sparse_tokens(tiles1, plans, variant, patch_size, flip_rngs),
            sparse_tokens(tiles2, second_plans, variant, patch_size, flip_rngs),
        ]
        links = [(0, "student", 1)] + ([(1, "student", 0)] if symmetric else [])
        return AssembledBatch(students, [], links, sparsity)

    students = [sparse_tokens(tiles2, plans, variant, patch_size, flip_rngs)]
    teachers = [dense_tokens(tiles1)]
    links = [(0, "teacher", 0)]
    if symmetric:
        students.append(sparse_tokens(tiles1, second_plans, variant, patch_size, flip_rngs))
        teachers.append(dense_tokens(tiles2))
        links.append((1, "teacher", 1))
    return AssembledBatch(students, teachers, links, sparsity)
