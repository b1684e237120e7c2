"""2-D rasteriser standing in for a 3-D renderer, camera jitter and box projection.

Scene coordinates map to pixels through one affine map per image::

    p = c + scale * (s * size - c) + kappa_t * d      (c = size / 2)

applied independently to x (with ``dx``) and y (with ``dy``).  A pixel
``(row, col)`` belongs to an object when its centre ``(col + .5, row + .5)``
lies inside the object's silhouette.  Boxes use pixel-edge coordinates: an
object covering columns 3..7 has ``x_min = 3, x_max = 8``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import GenerationError

PALETTE = {
    "gray": (87, 87, 87), "red": (173, 35, 35), "blue": (42, 75, 215),
    "green": (29, 105, 20), "brown": (129, 74, 25), "purple": (129, 38, 192),
    "cyan": (41, 208, 208), "yellow": (255, 238, 51),
}
BACKGROUND = (0.75, 0.75, 0.75)
METAL_STRIPE = 0.55          # intensity of odd rows on metal objects
CYLINDER_WIDTH = 0.6         # cylinder bar width relative to its height


@dataclass(frozen=True)
class CameraJitter:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    kappa_t: float = 2.0
    kappa_s: float = 0.04
    kappa_b: float = 0.1

    @classmethod
    def identity(cls, cfg=None):
        if cfg is None:
            return cls()
        return cls(0.0, 0.0, 0.0, cfg.kappa_t, cfg.kappa_s, cfg.kappa_b)

    @property
    def translation(self):
        return (self.kappa_t * self.dx, self.kappa_t * self.dy)

    @property
    def scale(self):
        return 1.0 + self.kappa_s * self.dz

    @property
    def brightness(self):
        return 1.0 + self.kappa_b * self.dz

    def to_json(self):
        return {"dx": self.dx, "dy": self.dy, "dz": self.dz, "kappa_t": self.kappa_t,
                "kappa_s": self.kappa_s, "kappa_b": self.kappa_b,
                "translation": list(self.translation), "scale": self.scale,
                "brightness": self.brightness}

    @classmethod
    def from_json(cls, d):
        return cls(d["dx"], d["dy"], d["dz"], d["kappa_t"], d["kappa_s"], d["kappa_b"])


def jitter_camera(rng, cfg):
    dx, dy, dz = (float(v) for v in rng.uniform(-cfg.jitter_range, cfg.jitter_range, size=3))
    return CameraJitter(dx, dy, dz, cfg.kappa_t, cfg.kappa_s, cfg.kappa_b)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    image: str = "before"

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if self.image not in ("before", "after"):
            raise ValueError(f"image tag must be before/after, got {self.image!r}")

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains_pixel(self, row, col):
        cx, cy = col + 0.5, row + 0.5
        return self.x_min <= cx <= self.x_max and self.y_min <= cy <= self.y_max

    def to_json(self):
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max,
                "y_max": self.y_max, "image": self.image}

    @classmethod
    def from_json(cls, d):
        return cls(d["x_min"], d["y_min"], d["x_max"], d["y_max"], d["image"])


def box_iou(a, b):
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def object_frame(obj, jitter, cfg):
    """Pixel-space centre and half-height of ``obj`` under ``jitter``."""
    n = cfg.image_size
    c = n / 2.0
    tx, ty = jitter.translation
    px = c + jitter.scale * (obj.x * n - c) + tx
    py = c + jitter.scale * (obj.y * n - c) + ty
    side = cfg.large_side if obj.size == "large" else cfg.small_side
    return px, py, jitter.scale * side * n / 2.0


def silhouette_mask(obj, jitter, cfg):
    """Boolean (H, W) mask of the pixels covered by ``obj``."""
    n = cfg.image_size
    px, py, half = object_frame(obj, jitter, cfg)
    centres = np.arange(n) + 0.5
    dx = centres[None, :] - px
    dy = centres[:, None] - py
    if obj.shape == "cube":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if obj.shape == "sphere":
        return dx * dx + dy * dy <= half * half
    return (np.abs(dx) <= CYLINDER_WIDTH * half) & (np.abs(dy) <= half)


def render(scene, jitter, cfg):
    """Float (H, W, 3) image in [0, 1]; later objects occlude earlier ones.

    ``scene`` may be a :class:`Scene` or any sequence of objects.
    """
    objects = getattr(scene, "objects", scene)
    n = cfg.image_size
    img = np.empty((n, n, 3))
    img[:] = BACKGROUND
    odd_rows = (np.arange(n) % 2 == 1)[:, None]
    for obj in objects:
        mask = silhouette_mask(obj, jitter, cfg)
        colour = np.array(PALETTE[obj.color]) / 255.0
        if obj.material == "metal":
            shade = np.where(odd_rows, METAL_STRIPE, 1.0)
            img[mask] = (colour[None, None, :] * shade[:, :, None] * np.ones((1, n, 1)))[mask]
        else:
            img[mask] = colour
    return np.clip(img * jitter.brightness, 0.0, 1.0)


def mask_bounds(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def project_bbox(obj, jitter, cfg, image="before"):
    """Tight box around the rendered silhouette, clipped to the raster."""
    bounds = mask_bounds(silhouette_mask(obj, jitter, cfg))
    if bounds is None:
        raise GenerationError(f"object {obj.id} falls entirely outside the frame")
    return BBox(*bounds, image=image)


def all_visible(scene, jitter, cfg):
    return all(silhouette_mask(o, jitter, cfg).any() for o in scene.objects)


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6 pixmap, maxval 255; ``img`` is (H, W, 3) float in [0, 1] or uint8."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path, gray):
    """Binary P5 graymap from a float array in [0, 1]."""
    arr = to_uint8(gray)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_pnm(path):
    """Read a binary P5/P6 file into a uint8 array ((H, W) or (H, W, 3))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValueError(f"{path}: unsupported pixmap ({magic}, maxval {maxval})")
    channels = 3 if magic == "P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()
