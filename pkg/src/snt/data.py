"""Synthetic articulated-figure scenes, netpbm scene files and augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from scipy import ndimage

from .hierarchy import TreeSpec, flip_labels
from .ops import IGNORE_INDEX
from .tensor import ConfigurationError

# toy7 label ids
BACKGROUND, HEAD, TORSO, LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG = range(7)


@dataclass
class Scene:
    image: np.ndarray      # (H, W, 3) float in [0, 1]
    labels: np.ndarray     # (H, W) uint8
    instances: np.ndarray  # (H, W) uint8, 0 = no instance

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape or self.labels.shape != self.instances.shape:
            raise ValueError(f"scene dims disagree: image {self.image.shape}, labels {self.labels.shape}, "
                             f"instances {self.instances.shape}")


@dataclass(frozen=True)
class GenConfig:
    canvas: tuple = (64, 64)
    figures: tuple = (1, 1)
    scale: tuple = (0.85, 1.05)
    head_radius: tuple = (8.5, 10.0)
    torso_width: tuple = (20.0, 24.0)
    torso_height: tuple = (16.0, 20.0)
    arm_length: tuple = (15.0, 19.0)
    arm_width: tuple = (11.0, 13.0)
    leg_length: tuple = (15.0, 19.0)
    leg_width: tuple = (12.0, 14.0)
    hip_spread: float = 0.25           # hip offset from the midline, as a fraction of torso width
    arm_angle: tuple = (15.0, 110.0)   # degrees outward from hanging straight down
    leg_angle: tuple = (0.0, 25.0)
    color_jitter: float = 0.02
    texture_amplitude: float = 0.0
    min_contrast: float = 0.6          # least RGB distance between background, skin, shirt, pants, sleeves
    distinct_sleeves: bool = True      # sleeves get their own color instead of the shirt's or the skin's
    margin: int = 1

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# -- rasterization ------------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _bar(yy, xx, y0, x0, angle, length, width):
    """Rectangle starting at (y0, x0) extending ``length`` along ``angle``
    (radians, 0 = straight down, positive = toward +x)."""
    dy, dx = math.cos(angle), math.sin(angle)
    along = (yy - y0) * dy + (xx - x0) * dx
    across = -(yy - y0) * dx + (xx - x0) * dy
    return (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)


def _figure_parts(rng: np.random.Generator, cfg: GenConfig, s: float) -> list:
    """Part geometry relative to the neck point at (0, 0): list of (label, kind, params)."""
    u = lambda r: rng.uniform(*r) * s  # noqa: E731
    r = u(cfg.head_radius)
    tw, th = u(cfg.torso_width), u(cfg.torso_height)
    al, aw = u(cfg.arm_length), u(cfg.arm_width)
    ll, lw = u(cfg.leg_length), u(cfg.leg_width)
    a_l, a_r = (math.radians(rng.uniform(*cfg.arm_angle)) for _ in range(2))
    g_l, g_r = (math.radians(rng.uniform(*cfg.leg_angle)) for _ in range(2))
    sh = 0.5 * tw - 0.25 * aw
    hip = cfg.hip_spread * tw
    # the figure faces the viewer: its left side is on the image's right (+x)
    return [
        (LEFT_LEG, "bar", (th - 1.0, hip, g_l, ll, lw)),
        (RIGHT_LEG, "bar", (th - 1.0, -hip, -g_r, ll, lw)),
        (TORSO, "rect", (0.0, -tw / 2, th, tw)),
        (LEFT_ARM, "bar", (1.5, sh, a_l, al, aw)),
        (RIGHT_ARM, "bar", (1.5, -sh, -a_r, al, aw)),
        (HEAD, "ellipse", (-r * 0.95, 0.0, r, r * 0.85)),
    ]


def _part_extent(kind: str, p: tuple) -> tuple:
    """(ymin, ymax, xmin, xmax) of a part relative to the neck."""
    if kind == "ellipse":
        cy, cx, ry, rx = p
        return cy - ry, cy + ry, cx - rx, cx + rx
    if kind == "rect":
        y0, x0, h, w = p
        return y0, y0 + h, x0, x0 + w
    y0, x0, ang, length, width = p
    dy, dx = math.cos(ang), math.sin(ang)
    ny, nx = -dx * width / 2, dy * width / 2
    ys = [y0 + ny, y0 - ny, y0 + dy * length + ny, y0 + dy * length - ny]
    xs = [x0 + nx, x0 - nx, x0 + dx * length + nx, x0 + dx * length - nx]
    return min(ys), max(ys), min(xs), max(xs)


def _draw(mask_target: np.ndarray, yy, xx, kind: str, p: tuple, oy: float, ox: float) -> np.ndarray:
    if kind == "ellipse":
        cy, cx, ry, rx = p
        return _ellipse(yy, xx, cy + oy, cx + ox, ry, rx)
    if kind == "rect":
        y0, x0, h, w = p
        return (yy >= y0 + oy) & (yy <= y0 + oy + h) & (xx >= x0 + ox) & (xx <= x0 + ox + w)
    y0, x0, ang, length, width = p
    return _bar(yy, xx, y0 + oy, x0 + ox, ang, length, width)


def _texture(rng: np.random.Generator, H: int, W: int, amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    tex = np.zeros((H, W, 3))
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        weights = rng.uniform(-1, 1, size=3)
        tex += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None] * weights
    return amplitude * tex / 3.0


SKIN = np.array([0.85, 0.65, 0.5])
SKIN_SCALE = (0.6, 1.1)


def _skin_tone(rng: np.random.Generator) -> np.ndarray:
    return np.clip(SKIN * rng.uniform(*SKIN_SCALE) + rng.normal(0, 0.05, 3), 0, 1)


def _skin_distance(c: np.ndarray) -> float:
    """Distance from ``c`` to the segment of noise-free skin tones."""
    t = np.clip(c @ SKIN / (SKIN @ SKIN), *SKIN_SCALE)
    return float(np.linalg.norm(c - t * SKIN))


def _distinct_color(rng: np.random.Generator, avoid: list, min_dist: float, draw=None,
                    tries: int = 1000) -> np.ndarray:
    """Color from ``draw`` (uniform RGB by default) at least ``min_dist`` from every color in ``avoid``."""
    for _ in range(tries):
        c = draw(rng) if draw is not None else rng.uniform(0, 1, size=3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c
    raise ConfigurationError(f"no color {min_dist} away from {len(avoid)} others after {tries} draws")


def generate_scene(seed: int, config: GenConfig = GenConfig()) -> Scene:
    """Draw 1..k articulated figures on a flat or textured background, deterministically per seed."""
    rng = np.random.default_rng(seed)
    H, W = config.canvas
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    base = rng.uniform(0.15, 0.85, size=3)
    # keep the background off the skin-tone family so a contrasting skin always exists
    for _ in range(1000):
        if _skin_distance(base) >= config.min_contrast:
            break
        base = rng.uniform(0.15, 0.85, size=3)
    else:
        raise ConfigurationError(f"min_contrast {config.min_contrast} leaves no background color")
    image = np.clip(base + _texture(rng, H, W, config.texture_amplitude), 0, 1)
    labels = np.zeros((H, W), dtype=np.uint8)
    instances = np.zeros((H, W), dtype=np.uint8)
    n_fig = int(rng.integers(config.figures[0], config.figures[1] + 1))
    # multi-figure scenes share the canvas horizontally
    slots = np.linspace(0, W, n_fig + 1)
    for f in range(n_fig):
        s = rng.uniform(*config.scale)
        parts = _figure_parts(rng, config, s)
        ext = np.array([_part_extent(k, p) for _, k, p in parts])
        ymin, ymax = ext[:, 0].min(), ext[:, 1].max()
        xmin, xmax = ext[:, 2].min(), ext[:, 3].max()
        m = config.margin
        lo_y, hi_y = m - ymin, H - m - ymax
        # inside the canvas, with the bounding-box center inside this figure's slot
        cx = (xmin + xmax) / 2
        lo_x = max(m - xmin, slots[f] - cx)
        hi_x = min(W - m - xmax, slots[f + 1] - cx)
        if lo_y > hi_y or lo_x > hi_x:
            raise ConfigurationError(
                f"figure extent {ymax - ymin:.1f}x{xmax - xmin:.1f} does not fit canvas {config.canvas} "
                f"with margin {m} and {n_fig} figure(s)")
        oy, ox = rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)
        skin = _distinct_color(rng, [base], config.min_contrast, _skin_tone)
        shirt = _distinct_color(rng, [base, skin], config.min_contrast)
        pants = _distinct_color(rng, [base, skin, shirt], config.min_contrast)
        if config.distinct_sleeves:
            sleeve = _distinct_color(rng, [base, skin, shirt, pants], config.min_contrast)
        else:
            sleeve = shirt * 0.8 if rng.random() < 0.5 else skin
        colors = {HEAD: skin, TORSO: shirt, LEFT_ARM: sleeve, RIGHT_ARM: sleeve, LEFT_LEG: pants, RIGHT_LEG: pants}
        for lab, kind, p in parts:
            region = _draw(labels, yy, xx, kind, p, oy, ox)
            labels[region] = lab
            instances[region] = f + 1
            image[region] = colors[lab]
    image = image + rng.normal(0, config.color_jitter, size=image.shape)
    return Scene(np.clip(image, 0, 1), labels, instances)


# -- augmentation ----------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple = (0.5, 1.5)
    rotation: float = 30.0
    crop: tuple = (64, 64)
    flip_prob: float = 0.5


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    rotation: float = 0.0          # degrees
    offset: Optional[tuple] = None  # top-left of the crop in scaled coordinates; None = centered
    flip: bool = False


def sample_augment(aug: AugmentConfig, shape: tuple, rng: np.random.Generator) -> AugmentParams:
    s = float(rng.uniform(*aug.scale))
    rot = float(rng.uniform(-aug.rotation, aug.rotation))
    hs, ws = round(shape[0] * s), round(shape[1] * s)
    ch, cw = aug.crop
    oy = int(rng.integers(min(0, hs - ch), max(0, hs - ch) + 1))
    ox = int(rng.integers(min(0, ws - cw), max(0, ws - cw) + 1))
    return AugmentParams(s, rot, (oy, ox), bool(rng.random() < aug.flip_prob))


def apply_augment(scene: Scene, params: AugmentParams, crop: tuple, spec: Optional[TreeSpec] = None) -> Scene:
    """Scale about the image center, rotate, crop (padding with background), maybe flip.

    Images are resampled bilinearly; labels and instances use nearest neighbour.
    """
    H, W = scene.labels.shape
    ch, cw = crop
    s = params.scale
    hs, ws = round(H * s), round(W * s)
    oy, ox = params.offset if params.offset is not None else ((hs - ch) // 2, (ws - cw) // 2)
    r, c = np.mgrid[0:ch, 0:cw] + 0.5
    qy, qx = r + oy - hs / 2, c + ox - ws / 2
    th = math.radians(params.rotation)
    cos, sin = math.cos(th), math.sin(th)
    sy = (cos * qy + sin * qx) / s + H / 2 - 0.5
    sx = (-sin * qy + cos * qx) / s + W / 2 - 0.5
    coords = np.stack([sy, sx])
    fill = scene.image.reshape(-1, 3).mean(axis=0)
    image = np.stack([ndimage.map_coordinates(scene.image[..., k], coords, order=1, mode="constant",
                                              cval=fill[k]) for k in range(3)], axis=-1)
    labels = ndimage.map_coordinates(scene.labels, coords, order=0, mode="constant", cval=BACKGROUND)
    instances = ndimage.map_coordinates(scene.instances, coords, order=0, mode="constant", cval=0)
    labels = labels.astype(np.uint8)
    instances = instances.astype(np.uint8)
    if params.flip:
        image = image[:, ::-1]
        instances = instances[:, ::-1]
        labels = flip_labels(labels, spec) if spec is not None else labels[:, ::-1]
    return Scene(np.ascontiguousarray(np.clip(image, 0, 1)), np.ascontiguousarray(labels),
                 np.ascontiguousarray(instances))


def augment(scene: Scene, aug: AugmentConfig, spec: TreeSpec, rng: np.random.Generator) -> Scene:
    return apply_augment(scene, sample_augment(aug, scene.labels.shape, rng), aug.crop, spec)


# -- netpbm I/O ------------------------------------------------------------------------

class NetpbmError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes) -> tuple:
    if data[:2] != magic:
        raise NetpbmError(f"expected magic {magic!r}, found {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError("malformed header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("malformed header: missing separator before raster")
    width, height, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, found {maxval}")
    return width, height, pos + 1


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    q = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + q.tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, off = _read_header(data, b"P6")
    raster = data[off:]
    if len(raster) != w * h * 3:
        raise NetpbmError(f"{path}: expected {w * h * 3} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    v = np.asarray(values)
    if v.ndim != 2:
        raise NetpbmError(f"PGM needs a 2-D map, got shape {v.shape}")
    if v.size and (v.min() < 0 or v.max() > 255):
        raise NetpbmError("PGM values must lie in [0, 255]")
    h, w = v.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + v.astype(np.uint8).tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, off = _read_header(data, b"P5")
    raster = data[off:]
    if len(raster) != w * h:
        raise NetpbmError(f"{path}: expected {w * h} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_labels(path: Union[str, Path], labels: np.ndarray, num_labels: Optional[int] = None) -> None:
    """Label PGM: value = label id, 255 = ignore; ids above 254 are rejected."""
    lab = np.asarray(labels)
    real = lab[lab != IGNORE_INDEX]
    if real.size and (real.min() < 0 or real.max() > 254):
        raise NetpbmError("label ids must lie in [0, 254]; 255 is reserved for ignore")
    if num_labels is not None and real.size and real.max() >= num_labels:
        raise NetpbmError(f"label id {int(real.max())} outside a label set of size {num_labels}")
    write_pgm(path, lab)


def write_scene(scene: Scene, directory: Union[str, Path], scene_id: str) -> None:
    d = Path(directory)
    write_ppm(d / f"{scene_id}.ppm", scene.image)
    write_labels(d / f"{scene_id}.labels.pgm", scene.labels)
    write_pgm(d / f"{scene_id}.inst.pgm", scene.instances)


def read_scene(directory: Union[str, Path], scene_id: str) -> Scene:
    d = Path(directory)
    paths = [d / f"{scene_id}{ext}" for ext in (".ppm", ".labels.pgm", ".inst.pgm")]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"scene {scene_id}: missing {p.name}")
    image, labels, inst = read_ppm(paths[0]), read_pgm(paths[1]), read_pgm(paths[2])
    try:
        return Scene(image, labels, inst)
    except ValueError as e:
        raise NetpbmError(f"scene {scene_id}: {e}") from e


# -- datasets ----------------------------------------------------------------------------

def scene_ids(count: int) -> list:
    return [f"{i:05d}" for i in range(count)]


def write_dataset(directory: Union[str, Path], seed: int, count: int, config: GenConfig = GenConfig(),
                  hierarchy: str = "toy7.json") -> list:
    """Generate ``count`` scenes with seeds ``seed * 100003 + i`` plus a manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = scene_ids(count)
    for i, sid in enumerate(ids):
        write_scene(generate_scene(seed * 100003 + i, config), d, sid)
    manifest = {"ids": ids, "hierarchy": hierarchy, "gen_config": config.to_dict(), "seed": seed}
    (d / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids


@dataclass
class SceneDataset:
    ids: list
    scenes: list
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "SceneDataset":
        d = Path(directory)
        man_path = d / "dataset.json"
        if not man_path.exists():
            raise FileNotFoundError(f"{d}: no dataset.json manifest")
        manifest = json.loads(man_path.read_text())
        ids = list(manifest["ids"])
        return cls(ids, [read_scene(d, sid) for sid in ids], manifest)

    @classmethod
    def generate(cls, seed: int, count: int, config: GenConfig = GenConfig()) -> "SceneDataset":
        """In-memory equivalent of :func:`write_dataset` followed by :meth:`load`."""
        ids = scene_ids(count)
        scenes = []
        for i in range(count):
            sc = generate_scene(seed * 100003 + i, config)
            # round-trip through 8-bit so in-memory and on-disk datasets agree exactly
            sc.image = np.round(sc.image * 255.0) / 255.0
            scenes.append(sc)
        return cls(ids, scenes, {"seed": seed, "gen_config": config.to_dict()})


def to_model_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, H, W, 3) in [0, 1] -> normalized (N, 3, H, W)."""
    return ((np.asarray(images).transpose(0, 3, 1, 2) - 0.5) / 0.25).astype(dtype)


def batch_iterator(dataset: Union[SceneDataset, str, Path], batch_size: int, shuffle_seed: Optional[int] = None,
                   aug: Optional[AugmentConfig] = None, spec: Optional[TreeSpec] = None,
                   epoch: int = 0) -> Iterator[tuple]:
    """Yield (images NCHW float32, labels (N,H,W) int64, instances, ids).

    Order is a deterministic function of (shuffle_seed, epoch); the final
    partial batch is emitted.
    """
    ds = dataset if isinstance(dataset, SceneDataset) else SceneDataset.load(dataset)
    order = np.arange(len(ds))
    rng = None
    if shuffle_seed is not None:
        rng = np.random.default_rng([shuffle_seed, epoch])
        order = rng.permutation(len(ds))
    if aug is not None and rng is None:
        rng = np.random.default_rng([0, epoch])
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        scenes = [ds.scenes[i] for i in idx]
        if aug is not None:
            scenes = [augment(sc, aug, spec, rng) for sc in scenes]
        images = to_model_input(np.stack([sc.image for sc in scenes]))
        labels = np.stack([sc.labels for sc in scenes]).astype(np.int64)
        inst = np.stack([sc.instances for sc in scenes])
        yield images, labels, inst, [ds.ids[i] for i in idx]
