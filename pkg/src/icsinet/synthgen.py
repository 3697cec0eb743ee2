"""Stylized ICSI-like frames with exact labels.

A scene has a noisy background, an oocyte (filled rotated ellipse with a
bright rim), a holding pipette entering from the left and touching the
oocyte, and an injection needle entering from the right. The label
polygons are the shapes used for rendering, so masks and tip are exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Sample, annotation_dict, atomic_write_text, write_json, write_png
from .errors import ConfigError, InputError
from .imgproc import PreprocessConfig, preprocess
from .metrics import CLASSES, polygon_to_mask

SPLITS = (("train", 0.80), ("val", 0.85), ("test", 1.0))


@dataclass
class SceneConfig:
    image_size: int = 128
    seed: int = 0
    background: tuple[float, float] = (70.0, 120.0)
    oocyte: tuple[float, float] = (125.0, 165.0)
    rim_gain: tuple[float, float] = (40.0, 70.0)
    pipette: tuple[float, float] = (175.0, 215.0)
    needle: tuple[float, float] = (15.0, 45.0)
    oolemma_axes: tuple[float, float] = (0.25, 0.40)  # semi-axes, fraction of side
    pipette_width: tuple[float, float] = (0.10, 0.18)
    needle_thickness: tuple[float, float] = (0.005, 0.015)
    min_needle_px: float = 1.5
    noise_std: float = 4.0
    oolemma_coverage: tuple[float, float] = (0.15, 0.50)
    pipette_coverage: tuple[float, float] = (0.03, 0.15)
    clahe: bool = False

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"scene.image_size must be >= 16, got {self.image_size}")
        for name in ("background", "oocyte", "rim_gain", "pipette", "needle", "oolemma_axes", "pipette_width", "needle_thickness", "oolemma_coverage", "pipette_coverage"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"scene.{name}: low {lo} exceeds high {hi}")
        if not (0 < self.oolemma_axes[0] and self.oolemma_axes[1] <= 0.45):
            raise ConfigError(f"scene.oolemma_axes must lie in (0, 0.45], got {self.oolemma_axes}")

    def to_dict(self) -> dict:
        return asdict(self)


# --- geometry ------------------------------------------------------------------------
def ellipse_polygon(cx, cy, a, b, theta, n=128) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(theta), math.sin(theta)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def rounded_rect_polygon(x0, y0, x1, y1, r, n_arc=8) -> np.ndarray:
    r = min(r, (x1 - x0) / 2, (y1 - y0) / 2)
    pts = []
    corners = [(x1 - r, y0 + r, -np.pi / 2), (x1 - r, y1 - r, 0.0), (x0 + r, y1 - r, np.pi / 2), (x0 + r, y0 + r, np.pi)]
    for cx, cy, start in corners:
        for t in np.linspace(start, start + np.pi / 2, n_arc):
            pts.append((cx + r * math.cos(t), cy + r * math.sin(t)))
    return np.array(pts)


def _ellipse_frame(a, b, theta):
    """Half extents of the bounding box and the half chord along x through the center."""
    c, s = math.cos(theta), math.sin(theta)
    ext_x = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    ext_y = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    chord = 1.0 / math.sqrt((c / a) ** 2 + (s / b) ** 2)
    return ext_x, ext_y, chord


def _inside_ellipse(x, y, cx, cy, a, b, theta) -> bool:
    c, s = math.cos(theta), math.sin(theta)
    u = c * (x - cx) + s * (y - cy)
    v = -s * (x - cx) + c * (y - cy)
    return (u / a) ** 2 + (v / b) ** 2 < 1.0


@dataclass
class SceneGeometry:
    ellipse: tuple[float, float, float, float, float]  # cx, cy, a, b, theta (plane units)
    pipette: tuple[float, float, float, float, float]  # x0, y0, x1, y1, corner radius
    needle_tip: tuple[float, float]  # plane units
    needle_radius: float
    tip_inside: bool
    polygons: dict = field(default_factory=dict)


def sample_geometry(cfg: SceneConfig, rng: np.random.Generator, max_tries: int = 200) -> SceneGeometry:
    s = float(cfg.image_size)
    margin = 0.02 * s
    for _ in range(max_tries):
        a = rng.uniform(*cfg.oolemma_axes) * s
        b = rng.uniform(*cfg.oolemma_axes) * s
        theta = rng.uniform(0, np.pi)
        ext_x, ext_y, chord = _ellipse_frame(a, b, theta)
        w = rng.uniform(*cfg.pipette_width) * s
        lo_x, hi_x = ext_x + margin, s - ext_x - margin
        lo_y, hi_y = max(ext_y + margin, w), min(s - ext_y - margin, s - w)
        # the pipette (left edge to the oocyte) must reach its minimum coverage
        lo_x = max(lo_x, cfg.pipette_coverage[0] * s * s / w + chord)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        x_end = cx - chord
        pip = (-w, cy - w / 2, x_end, cy + w / 2, 0.3 * w)

        inside = bool(rng.random() < 0.5)
        r = max(rng.uniform(*cfg.needle_thickness) * s, cfg.min_needle_px) / 2
        tip = None
        for _ in range(100):
            tx = rng.uniform(s / 3, s - 0.1 * s)
            ty = rng.uniform(0.08 * s, s - 0.08 * s)
            if _inside_ellipse(tx, ty, cx, cy, a, b, theta) != inside:
                continue
            if tx < x_end + 2 * r + margin and abs(ty - cy) < w / 2 + 2 * r + margin:
                continue
            tip = (tx, ty)
            break
        if tip is None:
            continue
        polys = {
            "oolemma": ellipse_polygon(cx, cy, a, b, theta),
            "pipette": rounded_rect_polygon(*pip),
        }
        size = cfg.image_size
        cov = {k: polygon_to_mask(v, size).mean() for k, v in polys.items()}
        if not cfg.oolemma_coverage[0] <= cov["oolemma"] <= cfg.oolemma_coverage[1]:
            continue
        if not cfg.pipette_coverage[0] <= cov["pipette"] <= cfg.pipette_coverage[1]:
            continue
        return SceneGeometry((cx, cy, a, b, theta), pip, tip, r, inside, polys)
    raise InputError(f"could not place a valid scene in {max_tries} attempts; geometry ranges are too tight")


# --- rendering -------------------------------------------------------------------------------
def _smooth_noise(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), sigma, mode="reflect")
    return f / (f.std() + 1e-12)


def render(cfg: SceneConfig, geo: SceneGeometry, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    s = float(size)
    px = s / 128.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5  # pixel centers in plane units

    bg = rng.uniform(*cfg.background)
    gx, gy = rng.normal(0, 8, 2)
    img = bg + gx * (xx / s - 0.5) + gy * (yy / s - 0.5) + 6 * _smooth_noise(rng, size, 6 * px)

    # oocyte body and rim
    cx, cy, a, b, theta = geo.ellipse
    c, si = math.cos(theta), math.sin(theta)
    u = c * (xx - cx) + si * (yy - cy)
    v = -si * (xx - cx) + c * (yy - cy)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    phi = np.arctan2(v, u)
    rdir = 1.0 / np.sqrt((np.cos(phi) / a) ** 2 + (np.sin(phi) / b) ** 2)
    dist = (rho - 1.0) * rdir  # approx signed distance, positive outside
    body = np.clip(0.5 - dist, 0, 1)
    interior = rng.uniform(*cfg.oocyte) + 5 * _smooth_noise(rng, size, 1.5 * px)
    img = img * (1 - body) + interior * body
    rim_w = 1.2 * px
    img = img + rng.uniform(*cfg.rim_gain) * np.exp(-0.5 * (dist / rim_w) ** 2)

    # holding pipette: bright glass with a darker outline
    x0, y0, x1, y1, r = geo.pipette
    qx = np.maximum(np.maximum(x0 + r - xx, xx - (x1 - r)), 0)
    qy = np.maximum(np.maximum(y0 + r - yy, yy - (y1 - r)), 0)
    pd = np.sqrt(qx**2 + qy**2) - r  # rounded-box distance (outside part)
    inner = np.minimum(np.maximum(np.maximum(x0 + r - xx, xx - (x1 - r)), np.maximum(y0 + r - yy, yy - (y1 - r))), 0)
    pd = pd + inner
    cover = np.clip(0.5 - pd, 0, 1)
    glass = rng.uniform(*cfg.pipette)
    img = img * (1 - cover) + glass * cover
    img = img - 45 * np.exp(-0.5 * (pd / (1.0 * px)) ** 2)

    # needle: horizontal capsule from the tip to beyond the right edge
    tx, ty = geo.needle_tip
    segx = np.clip(xx, tx, s + 10)
    nd = np.sqrt((xx - segx) ** 2 + (yy - ty) ** 2) - geo.needle_radius
    ncover = np.clip(0.5 - nd, 0, 1)
    img = img * (1 - ncover) + rng.uniform(*cfg.needle) * ncover

    img = img + rng.normal(0, cfg.noise_std, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_scene(cfg: SceneConfig, index: int) -> Sample:
    """Deterministic in ``(cfg.seed, index)``."""
    cfg.validate()
    rng = scene_rng(cfg.seed, index)
    geo = sample_geometry(cfg, rng)
    image = render(cfg, geo, rng)
    if cfg.clahe:
        image = preprocess(image, cfg.image_size, PreprocessConfig())
    masks = np.stack([polygon_to_mask(geo.polygons[c], cfg.image_size) for c in CLASSES])
    tip = np.array(geo.needle_tip) - 0.5  # plane units -> pixel-center units
    return Sample(image=image, masks=masks, tip=tip, id=f"{index:06d}", polygons=geo.polygons)


def split_of(seed: int, index: int) -> str:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    for name, edge in SPLITS:
        if u < edge:
            return name
    return SPLITS[-1][0]


def generate_dataset(cfg: SceneConfig, n: int, out_dir) -> dict:
    """Write ``n`` frames, their annotations and a manifest; returns the manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    entries = []
    for i in range(n):
        smp = generate_scene(cfg, i)
        try:
            write_png(out / f"{smp.id}.png", smp.image)
            ann = annotation_dict(smp.id, smp.polygons, smp.tip, image_size=(cfg.image_size, cfg.image_size))
            atomic_write_text(out / f"{smp.id}.json", json.dumps(ann, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise InputError(f"failed writing sample {smp.id} under {out}: {exc}") from exc
        entries.append({"id": smp.id, "split": split_of(cfg.seed, i)})
    manifest = {"count": n, "image_size": cfg.image_size, "scene": cfg.to_dict(), "samples": entries}
    write_json(out / "manifest.json", manifest)
    return manifest
