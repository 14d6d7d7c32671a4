"""File formats: PPM/PGM images, raw float maps, checkpoints, config files.

All binary formats are little-endian; checkpoints store float32 arrays after
a small header. Everything round-trips byte-identically for fixed inputs,
which is what the end-to-end determinism guarantee rests on.
"""

import ast
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SDFI"
CKPT_VERSION = 1
RAW_MAGIC = b"SDFR"


def write_ppm(path, rgb):
    """8-bit binary PPM (P6); input floats are clipped to [0,1]."""
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    data = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P6":
        raise ValueError("not a binary PPM")
    dims, rest = rest.split(b"\n", 1)
    maxval, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    arr = np.frombuffer(rest[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / float(int(maxval))


def write_pgm16(path, gray, scale=1.0):
    """16-bit binary PGM (P5) for masks/depth; values clipped to [0, scale]."""
    gray = np.asarray(gray)
    h, w = gray.shape
    data = (np.clip(gray / scale, 0.0, 1.0) * 65535.0 + 0.5).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(data.tobytes())


def read_pgm16(path, scale=1.0):
    with open(path, "rb") as f:
        data = f.read()
    magic, rest = data.split(b"\n", 1)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    dims, rest = rest.split(b"\n", 1)
    _, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    arr = np.frombuffer(rest[:w * h * 2], dtype=">u2").reshape(h, w)
    return arr.astype(np.float64) / 65535.0 * scale


def write_raw(path, arr):
    """Float32 raw with a small header: magic, ndim, dims."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_raw(path):
    with open(path, "rb") as f:
        if f.read(4) != RAW_MAGIC:
            raise ValueError("not a raw float map")
        nd = struct.unpack("<I", f.read(4))[0]
        shape = struct.unpack(f"<{nd}I", f.read(4 * nd))
        arr = np.frombuffer(f.read(), dtype="<f4").reshape(shape)
    return arr.astype(np.float64)


def save_checkpoint(path, arrays: dict):
    """Versioned binary blob: header with dims, then row-major float32 data."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            nlen = struct.unpack("<I", f.read(4))[0]
            name = f.read(nlen).decode()
            nd = struct.unpack("<I", f.read(4))[0]
            shape = struct.unpack(f"<{nd}I", f.read(4 * nd)) if nd else ()
            n = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
    return out


def write_meta(path, entries: dict):
    """Plain key = value text (poses/latents in dataset records)."""
    with open(path, "w") as f:
        for k in sorted(entries):
            v = entries[k]
            if isinstance(v, np.ndarray):
                v = v.tolist()
            f.write(f"{k} = {v!r}\n")


def read_meta(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = ast.literal_eval(v.strip())
    return out


def parse_config(path):
    """Minimal TOML-style sections of key = value pairs.

    Values are python literals where possible, bare strings otherwise.
    Returns {section: {key: value}}; keys before any section go to "".
    """
    sections = {"": {}}
    current = ""
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        k, v = line.split("=", 1)
        v = v.strip()
        try:
            val = ast.literal_eval(v)
        except (ValueError, SyntaxError):
            val = v
        sections[current][k.strip()] = val
    return sections


def write_config(path, sections: dict):
    with open(path, "w") as f:
        for sec in sections:
            if sec:
                f.write(f"[{sec}]\n")
            for k, v in sections[sec].items():
                f.write(f"{k} = {v!r}\n")
            f.write("\n")
