"""Dataset trees: LOCO-style directory reader and the synthetic pinboard generator.

The pinboard category is a grid of cells, one bright disc per cell.
Logical anomalies break the layout (an emptied block of cells, or a
stray extra disc on a grid crossing) while every local patch stays
plausible; structural anomalies keep the layout but scar one disc with
a dark streak. Ground truth masks mark the emptied cells, the stray
disc, or the dilated streak.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Optional

import numpy as np

KIND_NONE = "none"
KIND_LOGICAL = "logical"
KIND_STRUCTURAL = "structural"

TEST_DIRS = {
    "good": KIND_NONE,
    "logical_anomalies": KIND_LOGICAL,
    "structural_anomalies": KIND_STRUCTURAL,
}


class DatasetError(OSError):
    """Raised when a dataset tree is missing pieces or holds bad rasters."""


@dataclasses.dataclass(frozen=True)
class Sample:
    """One image with its label, anomaly kind, and optional pixel mask."""

    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    label: int  # 0 normal, 1 anomalous
    anomaly_kind: str  # none | logical | structural
    mask: Optional[np.ndarray]  # (H, W) uint8 {0, 1}, present iff label == 1
    name: str = ""

    def __post_init__(self):
        if (self.label == 1) != (self.anomaly_kind != KIND_NONE):
            raise ValueError(f"{self.name}: label {self.label} conflicts with kind {self.anomaly_kind}")
        has_mask = self.mask is not None and self.mask.any()
        if (self.label == 1) != has_mask:
            raise ValueError(f"{self.name}: label {self.label} requires a non-empty mask iff anomalous")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.name}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    """Train/validation normals plus a mixed test set."""

    train: list
    validation: list
    test: list


# ---------------------------------------------------------------------------
# PGM / PPM rasters

def write_raster(path, image: np.ndarray) -> None:
    """Write a float [0,1] image as binary PGM (1 channel) or PPM (3 channels)."""
    path = Path(path)
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"raster must be HxW or HxWx{{1,3}}, got shape {arr.shape}")
    data = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if data.shape[2] == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (data.shape[1], data.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as PGM, 255 = anomalous."""
    write_raster(path, mask.astype(np.float64))


def read_raster(path) -> np.ndarray:
    """Read a binary PGM/PPM into an (H, W, C) float32 array scaled to [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, rest = raw.split(None, 1)
    except ValueError:
        raise DatasetError(f"{path}: not a PGM/PPM raster") from None
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported raster magic {magic!r}")
    channels = 1 if magic == b"P5" else 3
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated raster header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DatasetError(f"{path}: bad raster header fields {fields}") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported, got {maxval}")
    expected = width * height * channels
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DatasetError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return data.astype(np.float32) / 255.0


def _read_mask(path) -> np.ndarray:
    data = read_raster(path)
    if data.shape[2] != 1:
        raise DatasetError(f"{path}: masks must be single-channel PGM")
    return (data[:, :, 0] > 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Reader

def read_dataset(root_path) -> DatasetSplit:
    """Load a LOCO-style tree: train/good, validation/good, test/{good,*_anomalies}."""
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")

    def load_normals(sub: str) -> list:
        directory = root / sub / "good"
        if not directory.is_dir():
            raise DatasetError(f"missing required subdirectory {directory}")
        samples = []
        for p in sorted(directory.glob("*.p*m")):
            samples.append(Sample(read_raster(p), 0, KIND_NONE, None, name=f"{sub}/good/{p.name}"))
        return samples

    train = load_normals("train")
    validation = load_normals("validation")

    test_root = root / "test"
    if not test_root.is_dir():
        raise DatasetError(f"missing required subdirectory {test_root}")
    test = []
    for sub, kind in TEST_DIRS.items():
        directory = test_root / sub
        if not directory.is_dir():
            continue
        for p in sorted(directory.glob("*.p*m")):
            image = read_raster(p)
            name = f"test/{sub}/{p.name}"
            if kind == KIND_NONE:
                test.append(Sample(image, 0, kind, None, name=name))
                continue
            mask_path = root / "ground_truth" / sub / (p.stem + ".pgm")
            if not mask_path.is_file():
                raise DatasetError(f"{name}: missing ground truth mask {mask_path}")
            mask = _read_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise DatasetError(
                    f"{name}: mask shape {mask.shape} does not match image {image.shape[:2]}"
                )
            test.append(Sample(image, 1, kind, mask, name=name))
    if not any(s.label == 0 for s in test) or not any(s.label == 1 for s in test):
        raise DatasetError("test split must contain both normal and anomalous samples")
    return DatasetSplit(train=train, validation=validation, test=test)


# ---------------------------------------------------------------------------
# Pinboard generator

@dataclasses.dataclass(frozen=True)
class PinboardConfig:
    grid: int = 4
    image_size: int = 128
    n_train: int = 64
    n_val: int = 16
    n_test_normal: int = 16
    n_test_logical: int = 16
    n_test_structural: int = 16

    def validate(self):
        if self.grid < 2:
            raise ValueError(f"grid must be >= 2, got {self.grid}")
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        if self.image_size % self.grid != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by grid {self.grid}"
            )
        for field in dataclasses.fields(self):
            if field.name.startswith("n_") and getattr(self, field.name) < 0:
                raise ValueError(f"{field.name} must be >= 0")


BACKGROUND = 0.12
NOISE_AMPLITUDE = 0.01
DISC_VALUE = 0.92
DISC_VALUE_MIN = 0.78
RADIUS_MIN = 0.26
RADIUS_MAX = 0.32
STREAK_VALUE = 0.04


def _max_radius(cfg: PinboardConfig) -> float:
    return (cfg.image_size // cfg.grid) * RADIUS_MAX


def _disc_centers(rng: np.random.Generator, cfg: PinboardConfig) -> np.ndarray:
    """One jittered center per cell, kept strictly inside the cell."""
    cell = cfg.image_size // cfg.grid
    margin = _max_radius(cfg) + 2.0
    centers = np.zeros((cfg.grid, cfg.grid, 2), dtype=np.float64)
    for gy in range(cfg.grid):
        for gx in range(cfg.grid):
            cy = gy * cell + cell / 2.0 + rng.uniform(-1, 1) * (cell / 2.0 - margin)
            cx = gx * cell + cell / 2.0 + rng.uniform(-1, 1) * (cell / 2.0 - margin)
            centers[gy, gx] = (cy, cx)
    return centers


def _disc_geometry(rng: np.random.Generator, cfg: PinboardConfig):
    """Centers plus per-disc radius and tone.

    The size and brightness spread keeps a continuum of plausible disc
    masses in the training stream, so reconstruction learns to track mass
    instead of memorising a single disc template.
    """
    centers = _disc_centers(rng, cfg)
    cell = cfg.image_size // cfg.grid
    radii = (RADIUS_MIN + (RADIUS_MAX - RADIUS_MIN) * rng.random((cfg.grid, cfg.grid))) * cell
    tones = DISC_VALUE_MIN + (DISC_VALUE - DISC_VALUE_MIN) * rng.random((cfg.grid, cfg.grid))
    return centers, radii, tones


EDGE_RAMP = 3.0


def _paint_disc(img: np.ndarray, cy: float, cx: float, radius: float, value: float) -> None:
    h, w = img.shape
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    dist = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
    # gentle edge ramp; hard steps alias into high-frequency phases that
    # dominate reconstruction error and drown cell-scale signals
    coverage = np.clip((radius + EDGE_RAMP / 2 - dist) / EDGE_RAMP, 0.0, 1.0)
    img[:] = img * (1 - coverage) + value * coverage


def _base_image(rng: np.random.Generator, cfg: PinboardConfig):
    size = cfg.image_size
    img = BACKGROUND + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(size, size))
    return img, _disc_geometry(rng, cfg)


def _render_normal(rng: np.random.Generator, cfg: PinboardConfig) -> np.ndarray:
    img, (centers, radii, tones) = _base_image(rng, cfg)
    for gy in range(cfg.grid):
        for gx in range(cfg.grid):
            _paint_disc(img, centers[gy, gx, 0], centers[gy, gx, 1],
                        radii[gy, gx], tones[gy, gx])
    return img


def _render_logical(rng: np.random.Generator, cfg: PinboardConfig) -> tuple[np.ndarray, np.ndarray]:
    """Emptied cell block, or a stray extra disc on an interior grid crossing.

    Both defects keep every local patch indistinguishable from training
    content; the fault only exists at scales spanning the cell layout.
    The hole spans 2x2 cells (one cell on 2-grids): a single emptied cell
    reads as an ordinary background pocket to coarse features, while a
    block is wider than any disc-free stretch a normal image can produce.
    """
    img, (centers, radii, tones) = _base_image(rng, cfg)
    cell = cfg.image_size // cfg.grid
    stray = bool(rng.integers(2))
    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
    if stray:
        ry = int(rng.integers(1, cfg.grid))
        rx = int(rng.integers(1, cfg.grid))
        ky, kx = float(ry * cell), float(rx * cell)
        r_extra = (RADIUS_MIN + (RADIUS_MAX - RADIUS_MIN) * rng.random()) * cell
        tone_extra = DISC_VALUE_MIN + (DISC_VALUE - DISC_VALUE_MIN) * rng.random()
        jit_hi = cell - _max_radius(cfg) - 2.0
        for gy, gx in ((ry - 1, rx - 1), (ry - 1, rx), (ry, rx - 1), (ry, rx)):
            # push the four adjacent discs diagonally away so the stray
            # disc's ramp never touches theirs (per-axis offset a gives
            # center distance a*sqrt(2) >= both radii plus ramp width)
            a_min = (r_extra + radii[gy, gx] + EDGE_RAMP + 1.0) / math.sqrt(2.0)
            oy = rng.uniform(a_min, jit_hi)
            ox = rng.uniform(a_min, jit_hi)
            centers[gy, gx, 0] = ky + math.copysign(oy, gy * cell + cell / 2.0 - ky)
            centers[gy, gx, 1] = kx + math.copysign(ox, gx * cell + cell / 2.0 - kx)
        ys = np.arange(cfg.image_size)[:, None]
        xs = np.arange(cfg.image_size)[None, :]
        footprint = (ys - ky) ** 2 + (xs - kx) ** 2 <= (r_extra + EDGE_RAMP / 2.0) ** 2
        mask[footprint] = 1
    else:
        side = 2 if cfg.grid >= 3 else 1
        ty = int(rng.integers(0, cfg.grid - side + 1))
        tx = int(rng.integers(0, cfg.grid - side + 1))
        mask[ty * cell : (ty + side) * cell, tx * cell : (tx + side) * cell] = 1
    for gy in range(cfg.grid):
        for gx in range(cfg.grid):
            if not stray and ty <= gy < ty + side and tx <= gx < tx + side:
                continue
            _paint_disc(img, centers[gy, gx, 0], centers[gy, gx, 1],
                        radii[gy, gx], tones[gy, gx])
    if stray:
        _paint_disc(img, ky, kx, r_extra, tone_extra)
    return img, mask


def _render_structural(rng: np.random.Generator, cfg: PinboardConfig) -> tuple[np.ndarray, np.ndarray]:
    img, (centers, radii, tones) = _base_image(rng, cfg)
    for gy in range(cfg.grid):
        for gx in range(cfg.grid):
            _paint_disc(img, centers[gy, gx, 0], centers[gy, gx, 1],
                        radii[gy, gx], tones[gy, gx])
    target = int(rng.integers(cfg.grid * cfg.grid))
    ty, tx = divmod(target, cfg.grid)
    cy, cx = centers[ty, tx]
    angle = rng.uniform(0, math.pi)
    dy, dx = math.sin(angle), math.cos(angle)
    half = radii[ty, tx] * 1.3
    ys = np.arange(cfg.image_size)[:, None]
    xs = np.arange(cfg.image_size)[None, :]
    # distance from the streak's center line, clipped to its extent
    along = (ys - cy) * dy + (xs - cx) * dx
    across = np.abs((ys - cy) * dx - (xs - cx) * dy)
    streak = (np.abs(along) <= half) & (across <= 1.0)
    img[streak] = STREAK_VALUE
    mask = _dilate(streak.astype(np.uint8))
    return img, mask


def _dilate(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy in range(3):
        for dx in range(3):
            out |= padded[dy : dy + h, dx : dx + w]
    return out


def generate_pinboard(out_root, config: PinboardConfig, seed: int) -> Path:
    """Write a pinboard dataset tree under ``out_root``; returns the category dir.

    Deterministic: identical (config, seed) produce byte-identical trees.
    The manifest lists one line per written raster: relpath, kind, seed offset.
    """
    config.validate()
    root = Path(out_root) / "pinboard"
    for sub in ("train/good", "validation/good", "test/good",
                "test/logical_anomalies", "test/structural_anomalies",
                "ground_truth/logical_anomalies", "ground_truth/structural_anomalies"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    manifest = []
    offset = 0

    def rng_for(off: int) -> np.random.Generator:
        return np.random.default_rng((seed, off))

    def emit(relpath: str, image: np.ndarray, kind: str, off: int, mask=None, mask_rel=None):
        write_raster(root / relpath, image)
        manifest.append(f"{relpath} {kind} {off}")
        if mask is not None:
            write_mask(root / mask_rel, mask)
            manifest.append(f"{mask_rel} {kind}-mask {off}")

    for i in range(config.n_train):
        emit(f"train/good/{i:03d}.pgm", _render_normal(rng_for(offset), config), KIND_NONE, offset)
        offset += 1
    for i in range(config.n_val):
        emit(f"validation/good/{i:03d}.pgm", _render_normal(rng_for(offset), config), KIND_NONE, offset)
        offset += 1
    for i in range(config.n_test_normal):
        emit(f"test/good/{i:03d}.pgm", _render_normal(rng_for(offset), config), KIND_NONE, offset)
        offset += 1
    for i in range(config.n_test_logical):
        img, mask = _render_logical(rng_for(offset), config)
        emit(f"test/logical_anomalies/{i:03d}.pgm", img, KIND_LOGICAL, offset,
             mask=mask, mask_rel=f"ground_truth/logical_anomalies/{i:03d}.pgm")
        offset += 1
    for i in range(config.n_test_structural):
        img, mask = _render_structural(rng_for(offset), config)
        emit(f"test/structural_anomalies/{i:03d}.pgm", img, KIND_STRUCTURAL, offset,
             mask=mask, mask_rel=f"ground_truth/structural_anomalies/{i:03d}.pgm")
        offset += 1

    (root / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return root
