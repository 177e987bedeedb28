"""Deterministic synthetic 6-band urban scenes with ground-truth water masks.

Shapes are painted back to front onto a class map (land, vegetation, water,
buildings, shadows), then each pixel draws reflectance from its class template
plus Gaussian noise.  Building shadows and dark roofs share a dark spectrum that
sits close to water, which is what makes index thresholding struggle.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ArgumentError, GenerationError
from .raster import Raster, TilePair, tile_pairs, write_raster

# class codes in the painted class map
LAND, VEGETATION, WATER, TURBID, BUILDING, SHADOW, DARK_ROOF = range(7)
WATER_CLASSES = (WATER, TURBID)


@dataclass(frozen=True)
class SpectralTemplate:
    """Per-class mean reflectance (blue, green, red, NIR, SWIR1, SWIR2) and per-band sigma."""

    water: tuple = (0.06, 0.08, 0.06, 0.03, 0.02, 0.01)
    turbid: tuple = (0.08, 0.11, 0.09, 0.05, 0.03, 0.02)
    vegetation: tuple = (0.04, 0.07, 0.05, 0.35, 0.15, 0.08)
    builtup: tuple = (0.18, 0.20, 0.22, 0.25, 0.24, 0.22)
    shadow: tuple = (0.05, 0.05, 0.05, 0.04, 0.03, 0.03)
    sigma: tuple = (0.01,) * 6

    def __post_init__(self):
        for f in fields(self):
            v = np.asarray(getattr(self, f.name), dtype=float)
            if v.shape != (6,):
                raise ArgumentError(f"template {f.name} needs 6 values")
            if f.name == "sigma":
                if (v < 0).any():
                    raise ArgumentError("sigmas must be >= 0")
            elif (v < 0).any() or (v > 1).any():
                raise ArgumentError(f"template {f.name} means must lie in [0, 1]")

    def class_means(self) -> np.ndarray:
        """(7, 6) table indexed by class code."""
        return np.array([self.builtup, self.vegetation, self.water, self.turbid,
                         self.builtup, self.shadow, self.shadow], dtype=np.float64)

    def mndwi_margin(self, green=1, swir1=4) -> float:
        """Smallest water MNDWI minus shadow MNDWI at zero noise."""
        def idx(t):
            return (t[green] - t[swir1]) / (t[green] + t[swir1])
        return min(idx(self.water), idx(self.turbid)) - idx(self.shadow)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 512
    width: int = 512
    water_fraction: tuple = (0.04, 0.45)
    n_lakes: int = 4
    n_rivers: int = 2
    n_buildings: int = 80
    n_vegetation: int = 6
    turbid_fraction: float = 0.3
    dark_roof_fraction: float = 0.15
    shadow_length: tuple = (3, 9)
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "water_fraction", tuple(float(v) for v in self.water_fraction))
        object.__setattr__(self, "shadow_length", tuple(int(v) for v in self.shadow_length))
        if self.height < 64 or self.width < 64:
            raise ArgumentError("scene dimensions must be >= 64")
        lo, hi = self.water_fraction
        if not 0 < lo < hi < 1:
            raise ArgumentError("water_fraction must be an increasing pair inside (0, 1)")
        if min(self.n_lakes, self.n_rivers, self.n_buildings, self.n_vegetation) < 0:
            raise ArgumentError("shape counts must be >= 0")
        if self.n_lakes + self.n_rivers == 0:
            raise ArgumentError("a scene needs at least one water body")
        for name in ("turbid_fraction", "dark_roof_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ArgumentError(f"{name} must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ArgumentError("noise_scale must be >= 0")

    def replace(self, **kw) -> "SceneSpec":
        d = asdict(self)
        d.update(kw)
        return SceneSpec(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ArgumentError(f"unknown SceneSpec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class Scene:
    image: Raster
    mask: Raster
    classes: np.ndarray = field(repr=False)

    @property
    def water_fraction(self) -> float:
        return float(np.isin(self.classes, WATER_CLASSES).mean())


# --- rasterizers ------------------------------------------------------------------

def _ellipse(H, W, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _river(H, W, rng, width):
    """Random-walk polyline from one edge, stamped with a disc of diameter ``width``."""
    out = np.zeros((H, W), dtype=bool)
    if rng.random() < 0.5:
        y, x, heading = rng.uniform(0, H), 0.0, 0.0
    else:
        y, x, heading = 0.0, rng.uniform(0, W), np.pi / 2
    r = width / 2.0
    ri = int(np.ceil(r))
    oy, ox = np.mgrid[-ri:ri + 1, -ri:ri + 1]
    disc = oy * oy + ox * ox <= r * r
    for _ in range(4 * (H + W)):
        iy, ix = int(round(y)), int(round(x))
        y0, y1 = max(iy - ri, 0), min(iy + ri + 1, H)
        x0, x1 = max(ix - ri, 0), min(ix + ri + 1, W)
        if y0 < y1 and x0 < x1:
            out[y0:y1, x0:x1] |= disc[y0 - iy + ri:y1 - iy + ri, x0 - ix + ri:x1 - ix + ri]
        heading += rng.normal(0, 0.15)
        y += np.sin(heading)
        x += np.cos(heading)
        if not (-ri <= y < H + ri and -ri <= x < W + ri):
            break
    return out


def _paint(spec: SceneSpec, rng) -> np.ndarray:
    H, W = spec.height, spec.width
    scale = min(H, W) / 512.0
    cls = np.full((H, W), LAND, dtype=np.int8)
    for _ in range(spec.n_vegetation):
        m = _ellipse(H, W, rng.uniform(0, H), rng.uniform(0, W),
                     rng.uniform(20, 80) * scale, rng.uniform(15, 60) * scale, rng.uniform(0, np.pi))
        cls[m] = VEGETATION
    for _ in range(spec.n_lakes):
        m = _ellipse(H, W, rng.uniform(0, H), rng.uniform(0, W),
                     rng.uniform(18, 90) * scale, rng.uniform(12, 60) * scale, rng.uniform(0, np.pi))
        cls[m] = TURBID if rng.random() < spec.turbid_fraction else WATER
    for _ in range(spec.n_rivers):
        m = _river(H, W, rng, rng.uniform(2.0, 7.0))
        cls[m] = TURBID if rng.random() < spec.turbid_fraction else WATER
    water = np.isin(cls, WATER_CLASSES)
    lo, hi = spec.shadow_length
    for _ in range(spec.n_buildings):
        bh, bw = rng.integers(4, 16, size=2)
        y0, x0 = rng.integers(0, H - bh), rng.integers(0, W - bw)
        L = int(rng.integers(lo, hi + 1))
        roof = DARK_ROOF if rng.random() < spec.dark_roof_fraction else BUILDING
        # skip buildings (with their shadow reach) that would touch water
        if water[y0:min(y0 + bh + L, H), x0:min(x0 + bw + L, W)].any():
            continue
        # shadow cast towards the lower right along a fixed azimuth
        for k in range(1, L + 1):
            sy, sx = y0 + k, x0 + (k + 1) // 2
            ys, xs = slice(sy, min(sy + bh, H)), slice(sx, min(sx + bw, W))
            region = cls[ys, xs]
            region[(region != BUILDING) & (region != DARK_ROOF)] = SHADOW
        cls[y0:y0 + bh, x0:x0 + bw] = roof
    return cls


def gen_scene(spec: SceneSpec, template: SpectralTemplate | None = None,
              max_tries: int = 25) -> Scene:
    """Paint and sample one scene; retries until the water fraction lands in range."""
    template = template or SpectralTemplate()
    if not template.mndwi_margin() > 0:
        raise GenerationError("templates give shadow an MNDWI at or above water")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.water_fraction
    for _ in range(max_tries):
        cls = _paint(spec, rng)
        frac = float(np.isin(cls, WATER_CLASSES).mean())
        if lo <= frac <= hi:
            break
    else:
        raise GenerationError(f"water fraction outside [{lo}, {hi}] after {max_tries} tries (last {frac:.3f})")
    means = template.class_means()[cls]  # (H, W, 6)
    sigma = np.asarray(template.sigma, dtype=np.float64) * spec.noise_scale
    noise = rng.standard_normal(means.shape) * sigma
    img = np.clip(means + noise, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)
    mask = np.isin(cls, WATER_CLASSES).astype(np.float32)
    return Scene(Raster(img), Raster(mask[None]), cls)


def _boosted(count, seed, fraction):
    rng = np.random.default_rng([seed, 0x5EED])
    return set(np.flatnonzero(rng.random(count) < fraction).tolist())


def gen_scenes(spec: SceneSpec, count: int, seed: int, boost_fraction: float = 0.3,
               boost_factor: float = 2.0, template: SpectralTemplate | None = None):
    """``count`` scenes seeded seed + index; a fraction get denser buildings and shadows."""
    if count < 1:
        raise ArgumentError("count must be >= 1")
    boosted = _boosted(count, seed, boost_fraction)
    scenes = []
    for i in range(count):
        s = spec.replace(seed=seed + i)
        if i in boosted:
            s = s.replace(n_buildings=int(round(s.n_buildings * boost_factor)))
        try:
            scenes.append(gen_scene(s, template))
        except GenerationError as exc:
            raise GenerationError(f"scene {i}: {exc}") from exc
    return scenes


def gen_dataset(spec: SceneSpec, count: int, seed: int, tile: int = 256, **kw) -> list:
    """Generate scenes and cut them into non-overlapping training tiles."""
    pairs = []
    for scene in gen_scenes(spec, count, seed, **kw):
        pairs.extend(tile_pairs(scene.image, scene.mask, tile, skip_nodata=True))
    return pairs


def write_scenes(scenes, out_dir, start: int = 0) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, scene in enumerate(scenes, start=start):
        ip, mp = out / f"image_{i:04d}.bsqf", out / f"mask_{i:04d}.bsqf"
        write_raster(scene.image, ip)
        write_raster(scene.mask, mp)
        paths.append((ip, mp))
    return paths


def scene_files(data_dir) -> list:
    """Sorted (image, mask) path pairs found in a directory written by ``write_scenes``."""
    d = Path(data_dir)
    pairs = []
    for ip in sorted(d.glob("image_*.bsqf")):
        mp = d / ip.name.replace("image_", "mask_", 1)
        if not mp.exists():
            raise FileNotFoundError(f"missing mask for {ip}")
        pairs.append((ip, mp))
    return pairs


def load_tiles(data_dir, tile: int = 256) -> list:
    from .raster import read_raster
    tiles = []
    for ip, mp in scene_files(data_dir):
        tiles.extend(tile_pairs(read_raster(ip), read_raster(mp), tile, skip_nodata=True))
    return tiles


__all__ = [
    "SpectralTemplate", "SceneSpec", "Scene", "gen_scene", "gen_scenes", "gen_dataset",
    "write_scenes", "scene_files", "load_tiles", "TilePair",
]
