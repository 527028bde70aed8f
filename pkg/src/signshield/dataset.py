"""Synthetic 18-class traffic-sign images, PPM/PNG directory I/O and stratified splits."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import glyphs
from .errors import ClassNameError, DataError, FormatError, ParameterError, SizeError, StratificationError
from .transforms import resize_bilinear

MIN_EXTENT = 48
DEFAULT_EXTENT = 64
DIGIT_SCALE = 3  # speed-limit numerals are drawn this many times larger than other text


@dataclass(frozen=True)
class SignClass:
    id: int
    name: str
    text: tuple = ()

    @property
    def has_text(self) -> bool:
        return bool(self.text)

    @property
    def dirname(self) -> str:
        return self.name.replace(" ", "_")


def _speed(v):
    return ("SPEED", "LIMIT", str(v))


SIGN_CLASSES = (
    SignClass(0, "curve left"),
    SignClass(1, "curve right"),
    SignClass(2, "do not enter", ("DO", "NOT", "ENTER")),
    SignClass(3, "lane ends"),
    SignClass(4, "merge"),
    SignClass(5, "pedestrian crossing"),
    SignClass(6, "roundabout"),
    SignClass(7, "school zone", ("SCHOOL",)),
    SignClass(8, "signal ahead"),
    SignClass(9, "speed limit 15", _speed(15)),
    SignClass(10, "speed limit 30", _speed(30)),
    SignClass(11, "speed limit 35", _speed(35)),
    SignClass(12, "speed limit 45", _speed(45)),
    SignClass(13, "speed limit 55", _speed(55)),
    SignClass(14, "speed limit 65", _speed(65)),
    SignClass(15, "stop", ("STOP",)),
    SignClass(16, "stop ahead"),
    SignClass(17, "yield", ("YIELD",)),
)
NUM_CLASSES = len(SIGN_CLASSES)
CLASS_NAMES = tuple(c.name for c in SIGN_CLASSES)
_BY_DIRNAME = {c.dirname: c for c in SIGN_CLASSES}

# Per-class support of a 1451-image reference test set; a consistency
# fixture for the metrics code.
REFERENCE_SUPPORT = {
    "curve left": 39, "curve right": 114, "do not enter": 68, "lane ends": 62,
    "merge": 33, "pedestrian crossing": 88, "roundabout": 61, "school zone": 60,
    "signal ahead": 39, "speed limit 15": 68, "speed limit 30": 110,
    "speed limit 35": 92, "speed limit 45": 107, "speed limit 55": 171,
    "speed limit 65": 134, "stop": 79, "stop ahead": 45, "yield": 81,
}
REFERENCE_TEST_SIZE = 1451


def class_by_name(name: str) -> SignClass:
    key = name.strip().replace(" ", "_").lower()
    if key not in _BY_DIRNAME:
        raise ClassNameError(f"unknown sign class {name!r}")
    return _BY_DIRNAME[key]


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int
    index: int = -1


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


def as_arrays(items) -> tuple[np.ndarray, np.ndarray]:
    if not items:
        return np.zeros((0,), np.float32), np.zeros((0,), np.int64)
    return np.stack([it.image for it in items]), np.array([it.label for it in items], dtype=np.int64)


# -- rendering ---------------------------------------------------------------

RED = (0.80, 0.08, 0.10)
WHITE = (0.97, 0.97, 0.97)
BLACK = (0.05, 0.05, 0.05)
YELLOW = (0.98, 0.82, 0.10)
FLUOR = (0.75, 0.95, 0.15)
TRAFFIC_RED, TRAFFIC_AMBER, TRAFFIC_GREEN = (0.9, 0.1, 0.1), (0.95, 0.7, 0.1), (0.1, 0.75, 0.25)


class _Canvas:
    """Float RGB raster with shape primitives in sign-relative units.

    Coordinates passed to primitives are multiples of the sign radius
    ``r`` measured from the sign center, x to the right and y downward.
    """

    def __init__(self, extent, background, cx, cy, r):
        self.img = np.empty((extent, extent, 3), dtype=np.float64)
        self.img[:] = background
        self.cx, self.cy, self.r = cx, cy, r
        yy, xx = np.mgrid[0:extent, 0:extent] + 0.5
        self.u = (xx - cx) / r
        self.v = (yy - cy) / r

    def fill(self, mask, color):
        self.img[mask] = color

    def polygon(self, pts, color, scale=1.0, offset=(0.0, 0.0)):
        pts = np.asarray(pts, dtype=float) * scale + offset
        inside = np.ones(self.u.shape, dtype=bool)
        n = len(pts)
        # convex, clockwise on screen (y down): interior to the right of each edge
        for k in range(n):
            (x0, y0), (x1, y1) = pts[k], pts[(k + 1) % n]
            inside &= (x1 - x0) * (self.v - y0) - (y1 - y0) * (self.u - x0) >= 0
        self.fill(inside, color)

    def circle(self, x, y, radius, color, inner=0.0):
        d = np.hypot(self.u - x, self.v - y)
        self.fill((d <= radius) & (d >= inner), color)

    def segment(self, p0, p1, width, color):
        p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
        d = p1 - p0
        t = np.clip(((self.u - p0[0]) * d[0] + (self.v - p0[1]) * d[1]) / (d @ d), 0, 1)
        dist = np.hypot(self.u - (p0[0] + t * d[0]), self.v - (p0[1] + t * d[1]))
        self.fill(dist <= width / 2, color)

    def polyline(self, pts, width, color):
        for a, b in zip(pts, pts[1:]):
            self.segment(a, b, width, color)

    def rect(self, x0, y0, x1, y1, color):
        self.fill((self.u >= x0) & (self.u <= x1) & (self.v >= y0) & (self.v <= y1), color)

    def text(self, line, y_top, color, scale):
        """Draw ``line`` centered horizontally, top edge ``y_top`` pixels from the sign center."""
        bitmap = glyphs.render_text(line, scale)
        h, w = bitmap.shape
        top = int(round(self.cy + y_top))
        left = int(round(self.cx - w / 2))
        region = self.img[top:top + h, left:left + w]
        if region.shape[:2] != (h, w):
            raise SizeError(f"text {line!r} does not fit inside the image")
        region[bitmap] = color


_DIAMOND = [(0, -1), (1, 0), (0, 1), (-1, 0)]
_OCTAGON = [(np.cos(a), np.sin(a)) for a in (np.pi / 8 + np.arange(8) * np.pi / 4 - np.pi)]


def _diamond(cv):
    cv.polygon(_DIAMOND, BLACK)
    cv.polygon(_DIAMOND, YELLOW, scale=0.92)


def _arrowhead(cv, tip, direction, size, color):
    d = np.asarray(direction, float)
    d /= np.hypot(*d)
    n = np.array([-d[1], d[0]])
    tip = np.asarray(tip, float)
    base = tip - d * size
    pts = [tip, base + n * size * 0.7, base - n * size * 0.7]
    # orient clockwise for the half-plane test
    if (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1]) - (pts[1][1] - pts[0][1]) * (pts[2][0] - pts[0][0]) < 0:
        pts = [pts[0], pts[2], pts[1]]
    cv.polygon(pts, color)


def _curve(cv, mirror):
    m = -1 if mirror else 1
    _diamond(cv)
    arc = [(m * (0.18 - 0.42 * (1 - np.cos(t))), 0.55 - 0.75 * np.sin(t)) for t in np.linspace(0, np.pi / 2.6, 8)]
    arc = [(m * 0.18, 0.6)] + arc
    cv.polyline(arc, 0.22, BLACK)
    tip = arc[-1]
    direction = (arc[-1][0] - arc[-2][0], arc[-1][1] - arc[-2][1])
    _arrowhead(cv, (tip[0] + 0.18 * np.sign(direction[0]) * 0.7, tip[1] - 0.14), direction, 0.26, BLACK)


def _lane_ends(cv):
    _diamond(cv)
    cv.segment((-0.3, 0.55), (-0.3, -0.5), 0.2, BLACK)
    cv.polyline([(0.3, 0.55), (0.3, 0.05), (0.0, -0.5)], 0.2, BLACK)


def _merge(cv):
    _diamond(cv)
    cv.segment((-0.05, 0.6), (-0.05, -0.35), 0.2, BLACK)
    _arrowhead(cv, (-0.05, -0.64), (0, -1), 0.3, BLACK)
    cv.segment((0.4, 0.45), (-0.02, 0.0), 0.18, BLACK)


def _pedestrian(cv):
    _diamond(cv)
    cv.circle(0.0, -0.45, 0.14, BLACK)
    cv.segment((0.0, -0.3), (0.0, 0.1), 0.2, BLACK)
    cv.segment((0.0, 0.1), (-0.24, 0.5), 0.17, BLACK)
    cv.segment((0.0, 0.1), (0.24, 0.5), 0.17, BLACK)
    cv.segment((-0.28, -0.05), (0.28, -0.22), 0.15, BLACK)


def _roundabout(cv):
    _diamond(cv)
    cv.circle(0.0, 0.0, 0.42, BLACK, inner=0.22)
    for ang in (0.0, 2 * np.pi / 3, 4 * np.pi / 3):
        c, s = np.cos(ang), np.sin(ang)
        _arrowhead(cv, (0.33 * c - 0.2 * s, 0.33 * s + 0.2 * c), (-s, c), 0.2, BLACK)


def _signal_ahead(cv):
    _diamond(cv)
    cv.rect(-0.17, -0.52, 0.17, 0.52, BLACK)
    for y, col in ((-0.33, TRAFFIC_RED), (0.0, TRAFFIC_AMBER), (0.33, TRAFFIC_GREEN)):
        cv.circle(0.0, y, 0.12, col)


def _stop_ahead(cv):
    _diamond(cv)
    cv.polygon(_OCTAGON, RED, scale=0.32, offset=(0.0, -0.22))
    cv.segment((0.0, 0.62), (0.0, 0.32), 0.18, BLACK)
    _arrowhead(cv, (0.0, 0.24), (0, -1), 0.2, BLACK)


def _stop(cv, u):
    cv.polygon(_OCTAGON, WHITE)
    cv.polygon(_OCTAGON, RED, scale=0.9)
    cv.text("STOP", -glyphs.GLYPH_H * u / 2, WHITE, u)


def _yield(cv, u):
    tri = [(-1.15, -0.75), (1.15, -0.75), (0.0, 1.05)]
    cv.polygon(tri, RED)
    inner = [(-0.85, -0.57), (0.85, -0.57), (0.0, 0.75)]
    cv.polygon(inner, WHITE)
    cv.text("YIELD", -0.5 * cv.r, RED, u)


def _do_not_enter(cv, u):
    cv.circle(0.0, 0.0, 1.0, WHITE)
    cv.circle(0.0, 0.0, 0.94, RED)
    bar = 0.12
    cv.rect(-0.78, -bar, 0.78, bar, WHITE)
    gap = 2 * u
    h = glyphs.GLYPH_H * u
    cv.text("DO NOT", -bar * cv.r - gap - h, WHITE, u)
    cv.text("ENTER", bar * cv.r + gap, WHITE, u)


def _school(cv, u):
    pent = [(0.0, -1.0), (0.95, -0.25), (0.95, 0.85), (-0.95, 0.85), (-0.95, -0.25)]
    cv.polygon(pent, BLACK)
    cv.polygon(pent, FLUOR, scale=0.9)
    cv.text("SCHOOL", -glyphs.GLYPH_H * u / 2 + 0.15 * cv.r, BLACK, u)


def _speed_limit(cv, u, value):
    cv.rect(-0.8, -1.08, 0.8, 1.08, BLACK)
    cv.rect(-0.74, -1.02, 0.74, 1.02, WHITE)
    h = glyphs.GLYPH_H * u
    gap = 2 * u
    block = 2 * h + DIGIT_SCALE * h + 2 * gap  # SPEED, LIMIT, large digits
    top = -block / 2
    cv.text("SPEED", top, BLACK, u)
    cv.text("LIMIT", top + h + gap, BLACK, u)
    cv.text(str(value), top + 2 * (h + gap), BLACK, DIGIT_SCALE * u)


_SYMBOLS = {
    0: lambda cv, u: _curve(cv, mirror=False),
    1: lambda cv, u: _curve(cv, mirror=True),
    2: _do_not_enter,
    3: lambda cv, u: _lane_ends(cv),
    4: lambda cv, u: _merge(cv),
    5: lambda cv, u: _pedestrian(cv),
    6: lambda cv, u: _roundabout(cv),
    7: _school,
    8: lambda cv, u: _signal_ahead(cv),
    15: _stop,
    16: lambda cv, u: _stop_ahead(cv),
    17: _yield,
}
for _c in SIGN_CLASSES:
    if _c.name.startswith("speed limit"):
        _SYMBOLS[_c.id] = (lambda v: lambda cv, u: _speed_limit(cv, u, v))(int(_c.text[-1]))


def glyph_scale(extent: int) -> int:
    """Pixel size of one font dot at this image extent (speed-limit digits use ``DIGIT_SCALE`` times this)."""
    return max(1, extent // DEFAULT_EXTENT)


def _hue_rotation(turns: float) -> np.ndarray:
    a = 2 * np.pi * turns
    c, s = np.cos(a), np.sin(a)
    k = np.sqrt(1.0 / 3.0)
    t = (1 - c) / 3
    return np.array([
        [c + t, t - k * s, t + k * s],
        [t + k * s, c + t, t - k * s],
        [t - k * s, t + k * s, c + t],
    ])


def render_sign(class_id: int, extent: int = DEFAULT_EXTENT, rng: np.random.Generator | None = None) -> np.ndarray:
    """One sign image; ``rng=None`` gives the canonical, un-jittered render."""
    if extent < MIN_EXTENT:
        raise SizeError(f"extent {extent} is too small to render 5x7 glyphs (minimum {MIN_EXTENT})")
    # text needs a fixed pixel budget, so small extents keep the 64-pixel sign size
    r = max(0.4 * extent, 0.4 * DEFAULT_EXTENT * glyph_scale(extent))
    if rng is None:
        dx = dy = hue = bright = 0.0
        background = np.array([0.45, 0.6, 0.75])
    else:
        dx, dy = rng.uniform(-0.1, 0.1, size=2) * extent
        background = rng.uniform(0.15, 0.85, size=3)
        hue = rng.uniform(-0.05, 0.05)
        bright = rng.uniform(-0.1, 0.1)
    cv = _Canvas(extent, background, extent / 2 + dx, extent / 2 + dy, r)
    _SYMBOLS[class_id](cv, glyph_scale(extent))
    img = cv.img
    if rng is not None:
        img = img @ _hue_rotation(hue).T + bright
        img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(seed: int, per_class: int, extent: int = DEFAULT_EXTENT) -> list:
    """``18 * per_class`` jittered renders, class-major; image ``i`` uses stream ``(seed, i)``."""
    if per_class < 1:
        raise ParameterError(f"per_class must be >= 1, got {per_class}")
    if extent < MIN_EXTENT:
        raise SizeError(f"extent {extent} is too small to render 5x7 glyphs (minimum {MIN_EXTENT})")
    items = []
    for cls in SIGN_CLASSES:
        for k in range(per_class):
            idx = cls.id * per_class + k
            rng = np.random.default_rng([seed, idx])
            items.append(LabeledImage(render_sign(cls.id, extent, rng), cls.id, idx))
    return items


def split(items, train_fraction: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stratified per-class split; each class keeps at least one image on each side."""
    if not 0 < train_fraction < 1:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class: dict[int, list] = {}
    for pos, it in enumerate(items):
        by_class.setdefault(it.label, []).append(pos)
    rng = np.random.default_rng(seed)
    train_pos, test_pos = [], []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 2:
            raise StratificationError(f"class {CLASS_NAMES[label]!r} has {len(members)} image(s); need at least 2")
        order = rng.permutation(len(members))
        n_train = min(max(int(round(train_fraction * len(members))), 1), len(members) - 1)
        train_pos += [members[i] for i in order[:n_train]]
        test_pos += [members[i] for i in order[n_train:]]
    return DatasetSplit([items[p] for p in sorted(train_pos)], [items[p] for p in sorted(test_pos)], seed)


# -- file I/O ----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM output needs an H x W x 3 image, got {img.shape}")
    data = np.clip(np.floor(img.astype(np.float64) * 255 + 0.5), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PPM header", offset=pos, path=path)
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {fields[0][:8]!r})", offset=0, path=path)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-numeric PPM header field", offset=pos, path=path) from None
    if not (width > 0 and height > 0 and 0 < maxval < 65536):
        raise FormatError(f"invalid PPM dimensions {width}x{height} maxval {maxval}", offset=pos, path=path)
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = width * height * 3 * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise FormatError(f"pixel data truncated: need {need} bytes, have {len(data) - pos}", offset=pos, path=path)
    px = np.frombuffer(data, dtype=dtype, count=width * height * 3, offset=pos)
    return (px.reshape(height, width, 3).astype(np.float32) / np.float32(maxval))


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise FormatError("PNG support needs Pillow", path=path) from None
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise FormatError(f"cannot decode PNG ({exc})", path=path) from None
        return arr
    raise FormatError(f"unsupported image type {suffix or '(none)'!r}", path=path)


def load_directory(path, extent: int = DEFAULT_EXTENT) -> list:
    """Read ``<root>/<class_name>/<file>.ppm|png`` into labeled images resized to ``extent``."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    items = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        if sub.name not in _BY_DIRNAME:
            raise ClassNameError(f"unknown class directory {sub.name!r} in {root}")
        label = _BY_DIRNAME[sub.name].id
        for f in sorted(p for p in sub.iterdir() if p.is_file() and not p.name.startswith(".")):
            img = read_image(f)
            if img.shape[:2] != (extent, extent):
                img = resize_bilinear(img, extent, extent)
            items.append(LabeledImage(np.clip(img, 0, 1).astype(np.float32), label, len(items)))
    return items


def write_directory(path, items, start_index: int = 0) -> list:
    """Write images in the directory layout :func:`load_directory` reads; returns written paths."""
    root = Path(path)
    written = []
    for k, it in enumerate(items):
        sub = root / SIGN_CLASSES[it.label].dirname
        sub.mkdir(parents=True, exist_ok=True)
        idx = it.index if it.index >= 0 else start_index + k
        target = sub / f"{idx:05d}.ppm"
        write_ppm(target, it.image)
        written.append(target)
    return written
