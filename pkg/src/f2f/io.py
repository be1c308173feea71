"""Small file helpers: 8-bit PGM images, CSV tables and key=value manifests."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


def write_pgm(path, image: np.ndarray, scale: float | None = None):
    """Write a 2-d array as binary 8-bit PGM.

    Float images are mapped to [0, 255] by ``scale`` (default: 255 for data in
    [0, 1]); integer images are written as-is and must lie in [0, 255].
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        s = 255.0 if scale is None else scale
        img = np.clip(np.rint(img * s), 0, 255)
    elif img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("integer PGM values must lie in [0, 255]")
    img = img.astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if not buf.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(int(buf[pos:end]))
        pos = end
    pos += 1
    w, h, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def normalized_pgm(path, image: np.ndarray):
    """Write a non-negative float map stretched so its maximum becomes 255."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max(initial=0.0)
    write_pgm(path, img / peak if peak > 0 else img)


def write_csv(path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_manifest(path, entries: dict):
    lines = [f"{k}={_manifest_value(v)}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _manifest_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    text = str(v)
    if "\n" in text:
        raise ConfigError("manifest values must be single-line")
    return text


def read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
