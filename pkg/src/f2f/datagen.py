"""Synthetic moving-shapes mini-clips and the on-disk feature cache.

A world has static structure (background road = class 0, a sky band,
building blocks and optional pillars inside the object band) and a set of moving shapes rendered back-to-front with the
painter's algorithm: later objects occlude earlier ones. Frame ``t`` (the
"labeled" frame, index 10 by default) anchors every trajectory.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CacheFormatError, CacheTruncatedError, ConfigError, DuplicateKeyError,
                     MissingRecordError)

CLASS_NAMES = ["road", "sky", "building", "car", "person", "ball"]
SHAPES = {3: "box", 4: "bar", 5: "disc"}
CLASS_INTENSITY = {0: 0.25, 1: 0.95, 2: 0.6, 3: 0.8, 4: 0.45, 5: 0.08}
TIME_ANCHOR = 10


@dataclass
class WorldConfig:
    height: int = 64
    width: int = 128
    classes: int = 6
    moving_class_ids: list = field(default_factory=lambda: [3, 4, 5])
    n_frames: int = 20
    objects: tuple = (2, 3)
    speed: tuple = (4.0, 6.0)
    directions: str = "right"  # right | both
    vertical_speed: float = 0.0
    accelerate: bool = False
    band: tuple = (22, 46)
    sky_rows: tuple = (6, 10)
    buildings: tuple = (1, 3)
    posts: tuple = (0, 0)  # static building-class pillars inside the band
    pan: float = 0.0
    noise: float = 0.02
    jitter: float = 0.04
    seed: int = 0

    def validate(self):
        if self.height <= 0 or self.width <= 0 or self.n_frames < 1:
            raise ConfigError("height, width and n_frames must be positive")
        if self.objects[0] > self.objects[1] or self.objects[0] < 0:
            raise ConfigError(f"bad object count range {self.objects}")
        if self.moving_class_ids and self.objects[1] == 0:
            raise ConfigError("moving classes requested but the world allows zero objects")
        if self.posts[0] > self.posts[1] or self.posts[0] < 0:
            raise ConfigError(f"bad post count range {self.posts}")
        if self.directions not in ("right", "both"):
            raise ConfigError(f"directions must be 'right' or 'both', got {self.directions!r}")
        if any(not 0 <= c < self.classes for c in self.moving_class_ids):
            raise ConfigError("moving_class_ids must lie in [0, classes)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectSpec:
    class_id: int
    cx: float  # centre at frame TIME_ANCHOR, pixels
    cy: float
    w: float
    h: float
    vx: float  # pixels / frame
    vy: float = 0.0
    ax: float = 0.0
    intensity: float = 0.5

    @property
    def shape(self) -> str:
        return SHAPES.get(self.class_id, "box")

    def centre(self, frame: int, anchor: int = TIME_ANCHOR) -> tuple[float, float]:
        dt = frame - anchor
        return self.cx + self.vx * dt + 0.5 * self.ax * dt * dt, self.cy + self.vy * dt


@dataclass
class StaticLayout:
    sky_rows: int
    buildings: list  # (x0, x1, y0, y1, intensity)
    pan: float = 0.0


@dataclass
class MiniClip:
    clip_id: int
    frames: np.ndarray  # (F, H, W) float32 in [0, 1]
    labels: np.ndarray  # (F, H, W) uint8
    objects: list
    layout: StaticLayout
    anchor: int = TIME_ANCHOR

    def __len__(self):
        return len(self.frames)


def _shape_mask(obj: ObjectSpec, frame: int, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cx, cy = obj.centre(frame)
    if obj.shape == "disc":
        r = obj.w / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return (np.abs(xx - cx) <= obj.w / 2) & (np.abs(yy - cy) <= obj.h / 2)


def render(cfg: WorldConfig, layout: StaticLayout, objects: list[ObjectSpec], frame: int,
           noise_rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise one frame; pixel (r, c) is sampled at its centre (r + .5, c + .5)."""
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    label = np.zeros((h, w), dtype=np.uint8)
    image = np.full((h, w), CLASS_INTENSITY[0], dtype=np.float64)
    shift = layout.pan * (frame - TIME_ANCHOR)
    for x0, x1, y0, y1, inten in layout.buildings:
        m = (xx - shift >= x0) & (xx - shift < x1) & (yy >= y0) & (yy < y1)
        label[m] = 2
        image[m] = inten
    sky = yy < layout.sky_rows
    label[sky] = 1
    image[sky] = CLASS_INTENSITY[1]
    for obj in objects:
        m = _shape_mask(obj, frame, yy, xx)
        label[m] = obj.class_id
        image[m] = obj.intensity
    if noise_rng is not None and cfg.noise > 0:
        image = image + noise_rng.normal(0.0, cfg.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def sample_world(cfg: WorldConfig, rng: np.random.Generator) -> tuple[StaticLayout, list[ObjectSpec]]:
    w = cfg.width
    sky = int(rng.integers(cfg.sky_rows[0], cfg.sky_rows[1] + 1))
    buildings = []
    for _ in range(int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1))):
        bw = float(rng.uniform(12, 28))
        x0 = float(rng.uniform(0, w - bw))
        top = float(rng.uniform(sky, sky + 4))
        bottom = float(rng.uniform(cfg.band[0] - 8, cfg.band[0] - 2))
        inten = CLASS_INTENSITY[2] + float(rng.uniform(-cfg.jitter, cfg.jitter))
        buildings.append((x0, x0 + bw, top, bottom, inten))
    objects = []
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    for _ in range(n_obj):
        cls = int(rng.choice(cfg.moving_class_ids))
        shape = SHAPES.get(cls, "box")
        if shape == "disc":
            ow = oh = float(rng.uniform(12, 18))
        elif shape == "bar":
            ow, oh = float(rng.uniform(7, 10)), float(rng.uniform(16, 22))
        else:
            ow, oh = float(rng.uniform(18, 28)), float(rng.uniform(10, 14))
        speed = float(rng.uniform(*cfg.speed))
        if cfg.directions == "both" and rng.random() < 0.5:
            speed = -speed
        vy = float(rng.uniform(-cfg.vertical_speed, cfg.vertical_speed)) if cfg.vertical_speed else 0.0
        ax = float(rng.uniform(-0.15, 0.15)) if cfg.accelerate else 0.0
        lo, hi = cfg.band[0] + oh / 2, cfg.band[1] - oh / 2
        cy = float(rng.uniform(lo, max(lo, hi)))
        if speed >= 0:
            cx = float(rng.uniform(0.05 * w, 0.65 * w))
        else:
            cx = float(rng.uniform(0.35 * w, 0.95 * w))
        inten = CLASS_INTENSITY[cls] + float(rng.uniform(-cfg.jitter, cfg.jitter))
        objects.append(ObjectSpec(cls, cx, cy, ow, oh, speed, vy, ax, inten))
    if cfg.posts[1] > 0:
        # pillars give moving objects a varied background to hide and reveal
        for _ in range(int(rng.integers(cfg.posts[0], cfg.posts[1] + 1))):
            pw = float(rng.uniform(6, 14))
            x0 = float(rng.uniform(0, w - pw))
            inten = CLASS_INTENSITY[2] + float(rng.uniform(-cfg.jitter, cfg.jitter))
            buildings.append((x0, x0 + pw, float(cfg.band[0] - 4), float(cfg.band[1]), inten))
    return StaticLayout(sky, buildings, cfg.pan), objects


def render_clip(cfg: WorldConfig, layout: StaticLayout, objects: list[ObjectSpec], clip_id: int = 0,
                noise_seed: int | None = None) -> MiniClip:
    noise_rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    frames, labels = [], []
    for f in range(cfg.n_frames):
        img, lab = render(cfg, layout, objects, f, noise_rng)
        frames.append(img)
        labels.append(lab)
    return MiniClip(clip_id, np.stack(frames), np.stack(labels), objects, layout)


def generate_clip(cfg: WorldConfig, seed: int, clip_id: int | None = None) -> MiniClip:
    """Deterministic clip from (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, seed])
    layout, objects = sample_world(cfg, rng)
    return render_clip(cfg, layout, objects, seed if clip_id is None else clip_id,
                       noise_seed=int(rng.integers(2 ** 31)))


def generate_clips(cfg: WorldConfig, clip_ids) -> list[MiniClip]:
    return [generate_clip(cfg, int(c)) for c in clip_ids]


def split_clips(clip_ids, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint, seed-stable train/val split by clip id."""
    ids = sorted(int(c) for c in clip_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    return train, val


def input_frames(t: int, frames: int, stride: int = 3) -> list[int]:
    """Observed frame indices t - stride*(T-1), ..., t - stride, t."""
    return [t - stride * (frames - 1 - i) for i in range(frames)]


def sample_anchors(n_frames: int, frames: int, offset: int, stride: int = 3, two_per_clip: bool = False,
                   anchor: int = TIME_ANCHOR) -> list[int]:
    """Anchor frames t whose inputs and target exist in the clip.

    The default anchor is the labeled frame; with ``two_per_clip`` the
    farthest other valid anchor is added as a second sample.
    """
    valid = [t for t in range(n_frames) if t - stride * (frames - 1) >= 0 and t + offset < n_frames]
    if anchor not in valid:
        raise ConfigError(f"anchor frame {anchor} can't host {frames} inputs and offset +{offset}")
    if not two_per_clip:
        return [anchor]
    others = [t for t in valid if t != anchor]
    if not others:
        return [anchor]
    return [anchor, max(others, key=lambda t: (abs(t - anchor), t))]


# -- feature cache --------------------------------------------------------

CACHE_MAGIC = b"F2FC"
INDEX_MAGIC = b"F2FI"
CACHE_VERSION = 1
_REC_HEAD = struct.Struct("<IHH")  # clip, frame, rank
_IDX_ENTRY = struct.Struct("<IHxxQ")  # clip, frame, pad, offset
_TRAILER = struct.Struct("<Q4s")


def write_feature_cache(path, records):
    """Write ``(clip_id, frame_index, array)`` triples with a random-access footer.

    Layout: magic | version:u32 | count:u32 | records | index | index_offset:u64 | b"F2FI".
    """
    seen = set()
    body = [CACHE_MAGIC, struct.pack("<II", CACHE_VERSION, 0)]
    pos = 12
    index = []
    for clip, frame, arr in records:
        key = (int(clip), int(frame))
        if key in seen:
            raise DuplicateKeyError(f"duplicate cache key clip={key[0]} frame={key[1]}")
        seen.add(key)
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        chunk = _REC_HEAD.pack(key[0], key[1], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()
        index.append((key, pos))
        body.append(chunk)
        pos += len(chunk)
    body[1] = struct.pack("<II", CACHE_VERSION, len(index))
    index_offset = pos
    for (clip, frame), off in index:
        body.append(_IDX_ENTRY.pack(clip, frame, off))
    body.append(_TRAILER.pack(index_offset, INDEX_MAGIC))
    Path(path).write_bytes(b"".join(body))


class FeatureCache:
    """Random-access reader for a feature cache file."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        size = self.path.stat().st_size
        head = self._fh.read(12)
        if len(head) < 12 or head[:4] != CACHE_MAGIC:
            raise CacheFormatError(f"{path}: not a feature cache (bad magic)")
        version, count = struct.unpack("<II", head[4:])
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{path}: unsupported cache version {version}")
        if size < 12 + _TRAILER.size:
            raise CacheTruncatedError(f"{path}: file too short")
        self._fh.seek(size - _TRAILER.size)
        index_offset, magic = _TRAILER.unpack(self._fh.read(_TRAILER.size))
        if magic != INDEX_MAGIC or index_offset + count * _IDX_ENTRY.size + _TRAILER.size != size:
            raise CacheTruncatedError(f"{path}: missing or damaged index footer")
        self._fh.seek(index_offset)
        raw = self._fh.read(count * _IDX_ENTRY.size)
        self._index = {}
        self._data_end = index_offset
        for i in range(count):
            clip, frame, off = _IDX_ENTRY.unpack_from(raw, i * _IDX_ENTRY.size)
            self._index[(clip, frame)] = off

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self._index)

    def __contains__(self, key):
        return tuple(key) in self._index

    def __len__(self):
        return len(self._index)

    def get(self, clip: int, frame: int) -> np.ndarray:
        key = (int(clip), int(frame))
        if key not in self._index:
            raise MissingRecordError(f"no cached features for clip={key[0]} frame={key[1]}")
        off = self._index[key]
        self._fh.seek(off)
        head = self._fh.read(_REC_HEAD.size)
        clip_r, frame_r, rank = _REC_HEAD.unpack(head)
        if (clip_r, frame_r) != key:
            raise CacheFormatError(f"{self.path}: index points at the wrong record for {key}")
        shape = struct.unpack(f"<{rank}I", self._fh.read(4 * rank))
        n = int(np.prod(shape))
        if off + _REC_HEAD.size + 4 * rank + 4 * n > self._data_end:
            raise CacheTruncatedError(f"{self.path}: payload of {key} runs past the data section")
        payload = self._fh.read(4 * n)
        if len(payload) < 4 * n:
            raise CacheTruncatedError(f"{self.path}: truncated payload for {key}")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_feature_cache(path) -> FeatureCache:
    return FeatureCache(path)


class MemoryFeatureCache:
    """In-process cache with the same ``get``/``keys`` surface as FeatureCache."""

    def __init__(self, records=()):
        self._data: dict[tuple[int, int], np.ndarray] = {}
        for clip, frame, arr in records:
            self.put(clip, frame, arr)

    def put(self, clip, frame, arr):
        key = (int(clip), int(frame))
        if key in self._data:
            raise DuplicateKeyError(f"duplicate cache key clip={key[0]} frame={key[1]}")
        self._data[key] = np.asarray(arr)

    def get(self, clip, frame) -> np.ndarray:
        try:
            return self._data[(int(clip), int(frame))]
        except KeyError:
            raise MissingRecordError(f"no cached features for clip={clip} frame={frame}") from None

    def keys(self):
        return sorted(self._data)

    def __contains__(self, key):
        return tuple(key) in self._data

    def __len__(self):
        return len(self._data)

    def records(self):
        return [(c, f, self._data[(c, f)]) for c, f in self.keys()]
