"""Frame preprocessing (grayscale, resize, CLAHE) and training augmentation.

Images are ``uint8`` numpy arrays, ``[H, W]`` or ``[H, W, 3]``. Point
coordinates (the needle tip) use pixel-center units: pixel ``(row i, col j)``
sits at ``(x, y) = (j, i)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError


def select_frames(frame_count: int, stride: int = 3) -> list[int]:
    if stride < 1:
        raise ConfigError(f"frame stride must be >= 1, got {stride}")
    return list(range(0, max(frame_count, 0), stride))


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma, rounded; single-channel input passes through."""
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim != 3 or img.shape[2] not in (3, 4):
        raise InputError(f"expected a 1- or 3-channel image, got shape {img.shape}")
    rgb = img[:, :, :3].astype(np.float64)
    y = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` bilinear weights, half-pixel centers, edge clamp."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_float(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a 2-D float array."""
    h, w = arr.shape
    if (h, w) == (height, width):
        return arr.astype(np.float64)
    return _interp_matrix(h, height) @ arr.astype(np.float64) @ _interp_matrix(w, width).T


def resize_bilinear(img: np.ndarray, width: int, height: int) -> np.ndarray:
    if width < 1 or height < 1:
        raise ConfigError(f"resize target must be at least 1x1, got {width}x{height}")
    if img.shape[:2] == (height, width):
        return img.copy()
    if img.ndim == 3:
        return np.stack([resize_bilinear(img[:, :, c], width, height) for c in range(img.shape[2])], axis=2)
    out = resize_float(img, width, height)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0, bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a grayscale image.

    Each of ``tiles x tiles`` regions gets a histogram whose counts above
    ``clip_limit * tile_pixels / bins`` are clipped and redistributed evenly
    (once). A value maps to ``255 * (count below its bin + half its bin) /
    tile_pixels``. Output pixels blend the mappings of the four nearest tile
    centers bilinearly. ``clip_limit=inf`` disables clipping.
    """
    if img.ndim != 2:
        raise InputError(f"clahe expects a single-channel image, got shape {img.shape}")
    if not clip_limit > 0:
        raise ConfigError(f"clahe clip_limit must be > 0, got {clip_limit}")
    if tiles < 1 or bins < 1:
        raise ConfigError(f"clahe needs tiles >= 1 and bins >= 1, got {tiles}, {bins}")
    h, w = img.shape
    ph = max(tiles, math.ceil(h / tiles) * tiles)
    pw = max(tiles, math.ceil(w / tiles) * tiles)
    padded = np.pad(img, ((0, ph - h), (0, pw - w)), mode="symmetric") if (ph, pw) != (h, w) else img
    th, tw = ph // tiles, pw // tiles
    binned = (padded.astype(np.int64) * bins) // 256

    blocks = binned.reshape(tiles, th, tiles, tw).transpose(0, 2, 1, 3).reshape(tiles * tiles, th * tw)
    offsets = np.arange(tiles * tiles)[:, None] * bins
    hist = np.bincount((blocks + offsets).ravel(), minlength=tiles * tiles * bins).reshape(tiles * tiles, bins)
    hist = hist.astype(np.float64)
    npix = th * tw
    if math.isfinite(clip_limit):
        limit = clip_limit * npix / bins
        excess = np.maximum(hist - limit, 0).sum(axis=1, keepdims=True)
        hist = np.minimum(hist, limit) + excess / bins
    below = np.cumsum(hist, axis=1) - hist
    maps = (255.0 * (below + 0.5 * hist) / npix).reshape(tiles, tiles, bins)

    def neighbours(n_pix: int, size: int):
        t = (np.arange(n_pix) + 0.5) / size - 0.5
        lo = np.clip(np.floor(t), 0, tiles - 1).astype(int)
        hi = np.minimum(lo + 1, tiles - 1)
        frac = np.clip(t - lo, 0, 1)
        return lo, hi, frac

    y0, y1, fy = neighbours(ph, th)
    x0, x1, fx = neighbours(pw, tw)
    b = binned
    Y0, Y1, FY = y0[:, None], y1[:, None], fy[:, None]
    X0, X1, FX = x0[None, :], x1[None, :], fx[None, :]
    top = (1 - FX) * maps[Y0, X0, b] + FX * maps[Y0, X1, b]
    bot = (1 - FX) * maps[Y1, X0, b] + FX * maps[Y1, X1, b]
    out = (1 - FY) * top + FY * bot
    return np.clip(np.floor(out[:h, :w] + 0.5), 0, 255).astype(np.uint8)


@dataclass
class PreprocessConfig:
    clahe: bool = True
    tiles: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def validate(self) -> None:
        if self.tiles < 1 or self.bins < 1 or not self.clip_limit > 0:
            raise ConfigError(f"invalid preprocess settings: {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def preprocess(img: np.ndarray, size: int, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """grayscale -> bilinear resize to ``size x size`` -> CLAHE."""
    cfg = cfg or PreprocessConfig()
    out = resize_bilinear(to_grayscale(img), size, size)
    if cfg.clahe:
        out = clahe(out, cfg.tiles, cfg.clip_limit, cfg.bins)
    return out


# --- augmentation --------------------------------------------------------------------
@dataclass
class AugmentConfig:
    """Which augmentations run and the ranges their parameters are drawn from.

    Elastic ``alpha`` (peak displacement) and ``sigma`` (smoothing) are
    fractions of the image side so one config serves every input size.
    """

    crop: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    rotate: bool = True
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    elastic: bool = True
    elastic_alpha: tuple[float, float] = (0.0, 0.02)
    elastic_sigma: float = 0.08
    optical: bool = True
    optical_limit: tuple[float, float] = (-0.05, 0.05)
    noise: bool = True
    noise_std: tuple[float, float] = (0.0, 10.0)
    erase: bool = True
    erase_area: tuple[float, float] = (0.02, 0.10)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    seed: int = 0

    def validate(self) -> None:
        for name in ("crop_scale", "rotation_deg", "elastic_alpha", "optical_limit", "noise_std", "erase_area", "erase_aspect"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"augment.{name}: low {lo} exceeds high {hi}")
        for name in ("hflip_p", "vflip_p"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"augment.{name} must be a probability, got {p}")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1:
            raise ConfigError(f"augment.crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.elastic_sigma <= 0:
            raise ConfigError(f"augment.elastic_sigma must be > 0, got {self.elastic_sigma}")
        if self.erase_area[0] < 0 or self.erase_area[1] > 1 or self.erase_aspect[0] <= 0:
            raise ConfigError("augment erase ranges must satisfy 0 <= area <= 1 and aspect > 0")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        base = dict(crop=False, rotate=False, hflip_p=0.0, vflip_p=0.0, elastic=False, optical=False, noise=False, erase=False)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _clean(v: float) -> float:
    return 0.0 if abs(v) < 1e-12 else v


class _Warp:
    """A point map with its inverse. ``back`` maps output coords to source coords."""

    def back(self, x, y):
        raise NotImplementedError

    def fwd(self, x: float, y: float) -> tuple[float, float]:
        raise NotImplementedError


class _Affine(_Warp):
    def __init__(self, a: np.ndarray):  # 2x3, output -> source
        self.a = a
        full = np.vstack([a, [0, 0, 1]])
        self.inv = np.linalg.inv(full)[:2]

    def back(self, x, y):
        a = self.a
        return a[0, 0] * x + a[0, 1] * y + a[0, 2], a[1, 0] * x + a[1, 1] * y + a[1, 2]

    def fwd(self, x, y):
        v = self.inv @ np.array([x, y, 1.0])
        return float(v[0]), float(v[1])


class _Displacement(_Warp):
    """source = output + d(output); the inverse is found by fixed-point iteration."""

    def __init__(self, dx: np.ndarray, dy: np.ndarray):
        self.dx, self.dy = dx, dy

    def _d(self, x, y):
        coords = np.array([np.atleast_1d(y), np.atleast_1d(x)], dtype=np.float64)
        ddx = ndimage.map_coordinates(self.dx, coords, order=1, mode="nearest")
        ddy = ndimage.map_coordinates(self.dy, coords, order=1, mode="nearest")
        return ddx, ddy

    def back(self, x, y):
        shape = np.shape(x)
        ddx, ddy = self._d(np.ravel(x), np.ravel(y))
        return x + ddx.reshape(shape), y + ddy.reshape(shape)

    def fwd(self, x, y):
        px, py = x, y
        for _ in range(50):
            ddx, ddy = self._d(px, py)
            nx, ny = x - float(ddx[0]), y - float(ddy[0])
            if abs(nx - px) < 1e-9 and abs(ny - py) < 1e-9:
                px, py = nx, ny
                break
            px, py = nx, ny
        return px, py


class _Radial(_Warp):
    """Barrel (k < 0) / pincushion (k > 0): source = c + (p - c) * (1 + k r^2), r in half-sides."""

    def __init__(self, k: float, size: int):
        self.k = k
        self.c = (size - 1) / 2
        self.half = size / 2

    def back(self, x, y):
        dx, dy = x - self.c, y - self.c
        r2 = (dx * dx + dy * dy) / self.half**2
        f = 1 + self.k * r2
        return self.c + dx * f, self.c + dy * f

    def fwd(self, x, y):
        dx, dy = x - self.c, y - self.c
        rs = math.hypot(dx, dy) / self.half
        if rs == 0 or self.k == 0:
            return x, y
        r = rs
        for _ in range(50):  # Newton on r + k r^3 = rs
            r -= (r + self.k * r**3 - rs) / (1 + 3 * self.k * r * r)
        scale = r / rs
        return self.c + dx * scale, self.c + dy * scale


def _sample_warps(cfg: AugmentConfig, size: int, rng: np.random.Generator) -> list[_Warp]:
    warps: list[_Warp] = []
    c = (size - 1) / 2
    if cfg.crop:
        s = rng.uniform(*cfg.crop_scale)
        side = s * size
        ox = rng.uniform(0, size - side)
        oy = rng.uniform(0, size - side)
        k = side / size
        warps.append(_Affine(np.array([[k, 0, ox + 0.5 * k - 0.5], [0, k, oy + 0.5 * k - 0.5]])))
    if cfg.rotate:
        th = math.radians(rng.uniform(*cfg.rotation_deg))
        co, si = _clean(math.cos(th)), _clean(math.sin(th))
        # positive angles turn the picture counter-clockwise on screen (as np.rot90)
        warps.append(_Affine(np.array([[co, -si, c - co * c + si * c], [si, co, c - si * c - co * c]])))
    if rng.random() < cfg.hflip_p:
        warps.append(_Affine(np.array([[-1.0, 0, size - 1], [0, 1.0, 0]])))
    if rng.random() < cfg.vflip_p:
        warps.append(_Affine(np.array([[1.0, 0, 0], [0, -1.0, size - 1]])))
    if cfg.elastic:
        alpha = rng.uniform(*cfg.elastic_alpha) * size
        sigma = cfg.elastic_sigma * size
        fields = []
        for _ in range(2):
            f = ndimage.gaussian_filter(rng.uniform(-1, 1, (size, size)), sigma, mode="reflect")
            peak = np.abs(f).max()
            fields.append(f / peak * alpha if peak > 0 else f)
        warps.append(_Displacement(fields[0], fields[1]))
    if cfg.optical:
        warps.append(_Radial(rng.uniform(*cfg.optical_limit), size))
    return warps


def _apply_warps(sample, warps: list[_Warp]):
    size = sample.image.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sx, sy = xx, yy
    for w in reversed(warps):
        sx, sy = w.back(sx, sy)
    coords = np.array([sy, sx])
    image = ndimage.map_coordinates(sample.image.astype(np.float64), coords, order=1, mode="nearest")
    image = np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)
    masks = np.stack([ndimage.map_coordinates(m, coords, order=0, mode="nearest") for m in sample.masks])
    tx, ty = float(sample.tip[0]), float(sample.tip[1])
    for w in warps:
        tx, ty = w.fwd(tx, ty)
    return image, masks, np.array([tx, ty])


def augment(sample, cfg: AugmentConfig, rng: np.random.Generator):
    """Randomly transform ``sample``; geometry is shared by image, masks and tip.

    Draws that push the tip out of frame are redrawn up to 10 times before
    falling back to the untouched geometry. Noise and erasing touch the
    image only.
    """
    size = sample.image.shape[0]
    if sample.image.shape != (size, size) or sample.masks.shape[1:] != (size, size):
        raise InputError(f"augment expects a square sample with matching masks, got {sample.image.shape} / {sample.masks.shape}")
    image, masks, tip = sample.image, sample.masks, np.asarray(sample.tip, dtype=np.float64)
    for _ in range(10):
        warps = _sample_warps(cfg, size, rng)
        if not warps:
            break
        cand = _apply_warps(sample, warps)
        t = cand[2]
        if 0 <= t[0] <= size - 1 and 0 <= t[1] <= size - 1:
            image, masks, tip = cand
            break

    if cfg.noise:
        std = rng.uniform(*cfg.noise_std)
        noisy = image.astype(np.float64) + rng.normal(0, 1, image.shape) * std
        image = np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)
    if cfg.erase:
        area = rng.uniform(*cfg.erase_area) * size * size
        aspect = math.exp(rng.uniform(math.log(cfg.erase_aspect[0]), math.log(cfg.erase_aspect[1])))
        eh = int(min(size, round(math.sqrt(area * aspect))))
        ew = int(min(size, round(math.sqrt(area / aspect))))
        if eh > 0 and ew > 0:
            y0 = int(rng.integers(0, size - eh + 1))
            x0 = int(rng.integers(0, size - ew + 1))
            image = image.copy()
            image[y0 : y0 + eh, x0 : x0 + ew] = rng.integers(0, 256, (eh, ew), dtype=np.uint8)
    return replace(sample, image=image, masks=masks, tip=tip)
