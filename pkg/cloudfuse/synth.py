"""
Synthetic scene generator.

Each location gets a land-cover label map, K co-registered renderings of it and an
independent cloud layer per rendering. A rendering starts from per-class base colours
with a static texture, gets a per-image gain, and is alpha-composited with a cloud layer
built from multi-octave value noise. The cloud threshold is binary-searched to hit a
coverage drawn from [coverage_min, coverage_max]; pixels above it are opaque cloud
(alpha >= 0.8, recorded in the ground-truth mask) and a band below it is thin haze
(alpha < 0.5, not recorded).

Each location draws from its own generator seeded by (recipe seed, location index), so
output doesn't depend on generation order or thread count.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import netpbm
from .const import (
    COVERAGE_ATTEMPTS,
    COVERAGE_MAX,
    COVERAGE_MIN,
    DEFAULT_BBOX,
    DEFAULT_N_CLASSES,
    DEFAULT_ZOOM,
)
from .errors import ConfigError, DatasetError
from .tiles import tile_bounds, tiles_in_bbox
from .util import _getLogger, derive_rng


log = _getLogger("synth")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Water, tree canopy, low vegetation, barren, impervious (other), impervious (roads).
DEFAULT_PALETTE = (
    (0.10, 0.18, 0.35),
    (0.12, 0.30, 0.12),
    (0.35, 0.50, 0.22),
    (0.55, 0.45, 0.32),
    (0.45, 0.45, 0.48),
    (0.30, 0.30, 0.32),
)

CLOUD_ALPHA_MIN = 0.8
HAZE_ALPHA_MAX = 0.45
CLOUD_BRIGHTNESS_MIN = 0.9


@dataclass
class SceneRecipe:
    seed: int = 42
    n_classes: int = DEFAULT_N_CLASSES
    k: int = 6
    size: int = 64
    class_colors: Optional[List[Tuple[float, float, float]]] = None
    texture_amplitude: float = 0.05
    gain_jitter: float = 0.05
    cloud_octaves: int = 4
    cloud_persistence: float = 0.5
    coverage_target: Optional[float] = None
    coverage_min: float = COVERAGE_MIN
    coverage_max: float = COVERAGE_MAX
    haze_band: float = 0.08
    zoom: int = DEFAULT_ZOOM
    bbox: Tuple[float, float, float, float] = field(default=DEFAULT_BBOX)

    def validate(self):
        reasons = {}
        if self.seed < 0:
            reasons["seed"] = "must be >= 0"
        if self.n_classes < 2:
            reasons["n_classes"] = "must be >= 2"
        if self.k < 1:
            reasons["k"] = "must be >= 1"
        if self.size < 4 or self.size % 4:
            reasons["size"] = "must be a positive multiple of 4"
        if self.cloud_octaves < 1:
            reasons["cloud_octaves"] = "must be >= 1"
        if not 0.0 < self.cloud_persistence <= 1.0:
            reasons["cloud_persistence"] = "must be in (0, 1]"
        if not 0.0 < self.coverage_min <= self.coverage_max < 1.0:
            reasons["coverage_min"] = "need 0 < coverage_min <= coverage_max < 1"
        if self.coverage_target is not None and not (
            self.coverage_min <= self.coverage_target <= self.coverage_max
        ):
            reasons["coverage_target"] = "must lie in [coverage_min, coverage_max]"
        if self.class_colors is not None and len(self.class_colors) < self.n_classes:
            reasons["class_colors"] = "needs one colour per class"
        if reasons:
            raise ConfigError(reasons)
        return self

    def palette(self):
        if self.class_colors is not None:
            return np.asarray(self.class_colors[:self.n_classes], dtype=np.float64)
        colors = list(DEFAULT_PALETTE[:self.n_classes])
        rng = derive_rng(self.seed, 2 ** 31 - 1)
        while len(colors) < self.n_classes:
            colors.append(tuple(rng.uniform(0.05, 0.6, size=3)))
        return np.asarray(colors, dtype=np.float64)

    def to_dict(self):
        """
        The recipe as written to manifest.json: tuples become lists.
        """
        values = asdict(self)
        values["bbox"] = list(self.bbox)
        if self.class_colors is not None:
            values["class_colors"] = [list(color) for color in self.class_colors]
        return values


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(height, width, scale, rng):
    """
    Smoothly interpolated random lattice values in [0, 1], one lattice cell per `scale`
    pixels.
    """
    scale = max(scale, 1.0)
    grid = rng.random((int(np.ceil(height / scale)) + 2, int(np.ceil(width / scale)) + 2))
    ys = np.arange(height) / scale
    xs = np.arange(width) / scale
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    fy = _fade(ys - yi)[:, None]
    fx = _fade(xs - xi)[None, :]
    yi, xi = yi[:, None], xi[None, :]
    top = grid[yi, xi] + fx * (grid[yi, xi + 1] - grid[yi, xi])
    bottom = grid[yi + 1, xi] + fx * (grid[yi + 1, xi + 1] - grid[yi + 1, xi])
    return top + fy * (bottom - top)


def fractal_noise(height, width, octaves, persistence, base_scale, rng):
    result = np.zeros((height, width))
    amplitude = 1.0
    total = 0.0
    scale = base_scale
    for _ in range(octaves):
        result += amplitude * value_noise(height, width, scale, rng)
        total += amplitude
        amplitude *= persistence
        scale /= 2.0
    return result / total


def coverage_threshold(noise, coverage, iterations=40):
    """
    Binary-search the threshold t so that mean(noise >= t) is as close to `coverage` as
    the noise values allow.
    """
    lo, hi = float(noise.min()), float(noise.max())
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.mean(noise >= mid) > coverage:
            lo = mid
        else:
            hi = mid
    # hi leaves coverage at or below the target, lo just above it
    below = np.mean(noise >= hi)
    above = np.mean(noise >= lo)
    return hi if coverage - below <= above - coverage else lo


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def cloud_layer(noise, threshold, haze_band):
    """
    Alpha for a cloud layer: opaque cloud at and above the threshold, a haze ramp below.
    """
    cloud = noise >= threshold
    above = CLOUD_ALPHA_MIN + (1 - CLOUD_ALPHA_MIN) * _smoothstep((noise - threshold) / haze_band)
    below = HAZE_ALPHA_MAX * _smoothstep((noise - threshold + haze_band) / haze_band)
    return np.where(cloud, above, below), cloud


def render_labels(recipe, rng):
    size = recipe.size
    fields = np.stack([
        value_noise(size, size, size / 4.0, rng) for _ in range(recipe.n_classes)
    ])
    return fields.argmax(axis=0).astype(np.uint8)


def render_ground(recipe, labels, rng):
    """
    Return [H, W, 3] ground reflectance: class colours plus a static texture.
    """
    size = recipe.size
    texture = fractal_noise(size, size, 3, 0.5, size / 8.0, rng) - 0.5
    ground = recipe.palette()[labels] + recipe.texture_amplitude * 2 * texture[..., None]
    return np.clip(ground, 0.0, 1.0)


def render_image(recipe, ground, rng):
    """
    Composite one cloudy observation. Returns (rgb [H, W, 3] uint8, mask [H, W] bool,
    coverage), or None when no threshold reaches the coverage range.
    """
    size = recipe.size
    if recipe.coverage_target is None:
        target = rng.uniform(recipe.coverage_min, recipe.coverage_max)
    else:
        target = recipe.coverage_target
    gain = 1.0 + rng.uniform(-recipe.gain_jitter, recipe.gain_jitter)
    for _ in range(COVERAGE_ATTEMPTS):
        noise = fractal_noise(size, size, recipe.cloud_octaves, recipe.cloud_persistence,
                              size / 2.0, rng)
        threshold = coverage_threshold(noise, target)
        alpha, mask = cloud_layer(noise, threshold, recipe.haze_band)
        coverage = float(mask.mean())
        if recipe.coverage_min <= coverage <= recipe.coverage_max:
            break
    else:
        return None
    brightness = CLOUD_BRIGHTNESS_MIN + (1 - CLOUD_BRIGHTNESS_MIN) * noise
    rgb = (1 - alpha[..., None]) * np.clip(ground * gain, 0, 1) + (
        alpha[..., None] * brightness[..., None]
    )
    return netpbm.to_bytes01(rgb), mask, coverage


def generate_location(recipe, index):
    """
    Render one location. Returns (labels, [(rgb, mask, coverage)] * K) or None when a
    rendering couldn't reach the coverage range.
    """
    rng = derive_rng(recipe.seed, index)
    labels = render_labels(recipe, rng)
    ground = render_ground(recipe, labels, rng)
    images = []
    for j in range(recipe.k):
        rendered = render_image(recipe, ground, rng)
        if rendered is None:
            log.warning(
                "Location %d image %d: coverage unattainable after %d attempts, skipping",
                index, j, COVERAGE_ATTEMPTS,
            )
            return None
        images.append(rendered)
    return labels, images


def generate_dataset(recipe, n_locations, out_dir, threads=1):
    """
    Write `n_locations` synthetic locations under `out_dir` together with a JSON manifest.
    Returns the manifest dict.
    """
    recipe.validate()
    if n_locations < 1:
        raise DatasetError("n_locations must be >= 1, got %d" % n_locations)
    tiles = tiles_in_bbox(*recipe.bbox, z=recipe.zoom)
    if n_locations > len(tiles):
        raise DatasetError(
            "%d locations requested, but the box holds only %d tiles at zoom %d"
            % (n_locations, len(tiles), recipe.zoom)
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda i: generate_location(recipe, i), range(n_locations)))

    os.makedirs(out_dir, exist_ok=True)
    locations = []
    for index, result in enumerate(results):
        if result is None:
            continue
        labels, images = result
        location_id = "loc%04d" % index
        os.makedirs(os.path.join(out_dir, location_id), exist_ok=True)
        label_path = "%s/label.pgm" % location_id
        netpbm.write(os.path.join(out_dir, label_path), labels)
        entries = []
        for j, (rgb, mask, coverage) in enumerate(images):
            image_path = "%s/image_%d.ppm" % (location_id, j)
            mask_path = "%s/mask_%d.pgm" % (location_id, j)
            netpbm.write(os.path.join(out_dir, image_path), rgb)
            netpbm.write(os.path.join(out_dir, mask_path), mask.astype(np.uint8) * 255)
            entries.append(dict(path=image_path, mask=mask_path, coverage=round(coverage, 6)))
        tile = tiles[index]
        locations.append(dict(
            id=location_id,
            tile=dict(z=tile.z, x=tile.x, y=tile.y),
            bounds=[round(v, 8) for v in tile_bounds(tile)],
            label=label_path,
            images=entries,
        ))
        log.debug("Wrote %s (tile %s)", location_id, tile)

    if not locations:
        raise DatasetError("No locations could be generated with this recipe")
    manifest = dict(version=MANIFEST_VERSION, recipe=recipe.to_dict(), locations=locations)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    log.info("Generated %d of %d locations in %s", len(locations), n_locations, out_dir)
    return manifest
