"""Image datasets on disk, preprocessing/augmentation, and synthetic data.

On-disk layout::

    root/<split>/<class_name>/<image>.ppm      binary PPM (P6, maxval 255)
    root/<split>/manifest.txt                  written by the synthetic generator

Images are held in memory as ``uint8`` arrays shaped ``[C, H, W]``.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .sampler import substream

IMAGE_SUFFIX = ".ppm"


class ImageDecodeError(ValueError):
    pass


# -- PPM codec --------------------------------------------------------------


def _ppm_tokens(raw: bytes, count: int, path) -> tuple[list, int]:
    tokens, pos, n = [], 0, len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageDecodeError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Decode a binary P6 file into ``uint8 [3, H, W]``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc.strerror or exc}") from None
    if not raw.startswith(b"P6"):
        raise ImageDecodeError(f"{path}: not a binary PPM (P6) file")
    tokens, offset = _ppm_tokens(raw, 4, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageDecodeError(f"{path}: malformed PPM header") from None
    if maxval != 255 or width < 1 or height < 1:
        raise ImageDecodeError(f"{path}: unsupported PPM ({width}x{height}, maxval {maxval})")
    body = raw[offset:offset + width * height * 3]
    if len(body) != width * height * 3:
        raise ImageDecodeError(f"{path}: truncated PPM raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects uint8 [3,H,W], got {image.dtype} {image.shape}")
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    images: list
    labels: list
    name: str = "dataset"
    split: str = "train"
    class_names: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        channels = {np.asarray(img).shape[0] for img in self.images}
        if len(channels) > 1:
            raise ValueError(f"images disagree on channel count: {sorted(channels)}")

    def __len__(self) -> int:
        return len(self.labels)

    def manifest_lines(self) -> list[str]:
        paths = self.paths or [f"{i}" for i in range(len(self))]
        return [f"{p} {lbl}" for p, lbl in zip(paths, self.labels)]

    def manifest_hash(self) -> str:
        """Git blob hash of the manifest text."""
        body = "".join(line + "\n" for line in self.manifest_lines()).encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    @classmethod
    def from_arrays(cls, images, labels, name: str = "arrays", split: str = "train") -> "Dataset":
        imgs = [np.asarray(img, dtype=np.uint8) for img in images]
        return cls(imgs, list(labels), name=name, split=split)


def load_dataset(root, split: str) -> Dataset:
    """Read ``root/<split>/<class>/*.ppm``; labels follow lexicographic class-name order."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"split directory not found: {split_dir}")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    images, labels, paths = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() == IMAGE_SUFFIX)
        if not files:
            raise ValueError(f"class directory has no {IMAGE_SUFFIX} images: {cdir}")
        for f in files:
            images.append(read_ppm(f))
            labels.append(label)
            paths.append(f.relative_to(root).as_posix())
    return Dataset(images, labels, name=Path(root).name, split=split,
                   class_names=[d.name for d in class_dirs], paths=paths)


def generate_synthetic(root, num_classes: int, per_class: int, image_size: int, seed: int,
                       split: str = "train", noise: float = 0.05) -> Dataset:
    """Write a procedural texture dataset and return it.

    Class ``c`` gets its own base hue plus an oriented sinusoidal grating with a
    class-specific frequency and phase; every image adds Gaussian pixel noise.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1 or image_size < 1:
        raise ValueError("per_class and image_size must be positive")
    root = Path(root)
    split_dir = root / split
    width = max(2, len(str(num_classes - 1)))
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    images, labels, paths = [], [], []
    for c in range(num_classes):
        base = np.array(colorsys.hsv_to_rgb(c / num_classes, 0.65, 0.75))
        theta = math.pi * c / num_classes
        freq = 2.0 + (c % 4)
        phase = 2.0 * math.pi * ((0.37 * c) % 1.0)
        grating = 0.15 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        clean = base[:, None, None] + grating[None]
        rng = substream(seed, "synthetic", c)
        cname = f"class_{c:0{width}d}"
        cdir = split_dir / cname
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            noisy = clean + rng.normal(0.0, noise, size=clean.shape)
            img = np.clip(np.rint(noisy * 255.0), 0, 255).astype(np.uint8)
            rel = f"{split}/{cname}/img_{i:04d}{IMAGE_SUFFIX}"
            write_ppm(root / rel, img)
            images.append(img)
            labels.append(c)
            paths.append(rel)
    ds = Dataset(images, labels, name=root.name, split=split,
                 class_names=[f"class_{c:0{width}d}" for c in range(num_classes)], paths=paths)
    (split_dir / "manifest.txt").write_text("".join(line + "\n" for line in ds.manifest_lines()))
    return ds


# -- preprocessing ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 224
    hflip_prob: float = 0.5
    max_rotation_degrees: float = 10.0
    normalize_mean: tuple = (0.5, 0.5, 0.5)
    normalize_std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.max_rotation_degrees < 0:
            raise ValueError("max_rotation_degrees must be >= 0")


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``[C,H,W]`` to ``[C,size,size]`` (float64)."""
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()

    def axis_weights(n_in):
        src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h)
    x0, x1, fx = axis_weights(w)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre; uncovered pixels become 0."""
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, cy - yy
    sx = cx + (cos * dx + sin * dy)
    sy = cy - (-sin * dx + cos * dy)
    x0, y0 = np.floor(sx).astype(np.intp), np.floor(sy).astype(np.intp)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(img)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wgt > 0)
        vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(ok, wgt, 0.0)[None] * vals
    return out


def preprocess(image: np.ndarray, cfg: AugmentConfig, training: bool = False,
               rng: Optional[np.random.Generator] = None, dtype=np.float32) -> np.ndarray:
    """Resize, (training only) flip and rotate, then scale to [0,1] and normalise."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ImageDecodeError(f"expected a [C,H,W] image, got shape {img.shape}")
    x = resize_bilinear(img, cfg.target_size)
    if training:
        if rng is None:
            raise ValueError("training-mode preprocessing needs an rng")
        if rng.random() < cfg.hflip_prob:
            x = x[:, :, ::-1]
        angle = rng.uniform(-cfg.max_rotation_degrees, cfg.max_rotation_degrees)
        x = rotate_bilinear(x, angle)
    mean = np.asarray(cfg.normalize_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(cfg.normalize_std, dtype=np.float64)[:, None, None]
    if mean.shape[0] != x.shape[0] or std.shape[0] != x.shape[0]:
        raise ValueError(f"normalisation has {mean.shape[0]} channels, image has {x.shape[0]}")
    return ((x / 255.0 - mean) / std).astype(dtype)


def preprocess_batch(images: Sequence[np.ndarray], cfg: AugmentConfig, training: bool = False,
                     rng: Optional[np.random.Generator] = None, dtype=np.float32) -> np.ndarray:
    return np.stack([preprocess(img, cfg, training, rng, dtype) for img in images])
