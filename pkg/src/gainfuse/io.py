"""Image files, run configuration files and the file-based denoiser exchange.

Model space is [-1, 1]; an image with maximum code value ``m`` (255 or
65535) maps linearly so that code 0 is -1 and code ``m`` is +1.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image



class InputError(ValueError):
    """Unreadable or inconsistent input file."""


class ConfigError(ValueError):
    """Malformed configuration."""


# -- images ------------------------------------------------------------------

NETPBM_SUFFIXES = (".pgm", ".ppm", ".pnm")


def _read_netpbm(path: Path) -> tuple[np.ndarray, int]:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated netpbm header")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"{path}: only binary PGM/PPM (P5/P6) is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise InputError(f"{path}: malformed netpbm header") from exc
    if maxval not in (255, 65535):
        raise InputError(f"{path}: unsupported maxval {maxval} (need 255 or 65535)")
    pos += 1  # single whitespace after maxval
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    n = h * w * c
    if len(data) - pos < n * dtype.itemsize:
        raise InputError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(h, w, c)
    return arr.astype(np.int64), maxval


def _write_netpbm(path: Path, codes: np.ndarray, maxval: int) -> None:
    h, w, c = codes.shape
    if c not in (1, 3):
        raise ValueError("netpbm needs 1 or 3 channels")
    magic = "P5" if c == 1 else "P6"
    dtype = ">u2" if maxval == 65535 else "u1"
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    _atomic_write(path, header + codes.astype(dtype).tobytes())


def _png_bit_depth(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise InputError(f"{path}: not a PNG file")
    return head[24], head[25]


def load_image(path: str | Path, expected_shape: tuple | None = None) -> np.ndarray:
    """Read a PNG or binary PGM/PPM (8 or 16 bit, gray or RGB) into model space, shape (H, W, C)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    if path.suffix.lower() in NETPBM_SUFFIXES:
        codes, maxval = _read_netpbm(path)
    else:
        depth, colour = _png_bit_depth(path)
        if depth not in (8, 16) or (depth == 16 and colour not in (0, 4)):
            raise InputError(f"{path}: unsupported PNG bit depth {depth} for colour type {colour}")
        try:
            with Image.open(path) as im:
                im.load()
                if depth == 16:
                    arr = np.array(im.convert("I") if im.mode not in ("I;16", "I") else im)
                elif im.mode in ("L", "RGB"):
                    arr = np.array(im)
                elif im.mode in ("LA", "P", "RGBA", "PA", "1"):
                    arr = np.array(im.convert("RGB" if im.mode in ("P", "RGBA", "PA") else "L"))
                else:
                    raise InputError(f"{path}: unsupported image mode {im.mode}")
        except OSError as exc:
            raise InputError(f"{path}: unreadable image ({exc})") from exc
        maxval = 65535 if depth == 16 else 255
        codes = arr.astype(np.int64)
        if codes.ndim == 2:
            codes = codes[..., None]
    x = codes.astype(np.float64) / (maxval / 2.0) - 1.0
    if expected_shape is not None and tuple(x.shape) != tuple(expected_shape):
        raise InputError(f"{path}: shape {x.shape} does not match expected {tuple(expected_shape)}")
    return x


def quantize(x, bit_depth: int = 8) -> np.ndarray:
    """Model-space values to integer codes: clamp, scale, round half to even."""
    maxval = (1 << bit_depth) - 1
    x = np.asarray(x, dtype=np.float64)
    return np.rint(np.clip((x + 1.0) * (maxval / 2.0), 0, maxval)).astype(np.int64)


def save_image(path: str | Path, x, bit_depth: int = 8) -> None:
    """Write a model-space (H, W[, C]) image as PNG or PGM/PPM."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    path = Path(path)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ValueError(f"cannot save image of shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot save non-finite image")
    codes = quantize(x, bit_depth)
    if path.suffix.lower() in NETPBM_SUFFIXES:
        _write_netpbm(path, codes, (1 << bit_depth) - 1)
        return
    if bit_depth == 16:
        if codes.shape[2] != 1:
            raise ValueError("16-bit PNG output is grayscale only; use .ppm for 16-bit RGB")
        im = Image.fromarray(codes[..., 0].astype(np.uint16))
    else:
        arr = codes.astype(np.uint8)
        im = Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr)
    tmp = path.with_name(path.name + ".part")
    im.save(tmp, format="PNG")
    os.replace(tmp, path)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- flat key = value config files --------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; later keys must not repeat."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def format_config(values: dict[str, object]) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = ""
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- external denoiser exchange ------------------------------------------------

MAGIC = b"DIG2"
HEADER = struct.Struct("<4sIIII")


class AdapterError(ValueError):
    """Malformed or mismatched exchange file."""


class AdapterTimeout(TimeoutError):
    """No response arrived in time."""


def encode_tensor(x: np.ndarray, t: int) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    H, W, C = x.shape
    return HEADER.pack(MAGIC, H, W, C, int(t)) + x.astype("<f8").tobytes()


def decode_tensor(payload: bytes) -> tuple[np.ndarray, int]:
    if len(payload) < HEADER.size:
        raise AdapterError("exchange file shorter than its header")
    magic, H, W, C, t = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise AdapterError(f"bad magic {magic!r}")
    n = H * W * C
    if len(payload) != HEADER.size + 8 * n:
        raise AdapterError(f"payload holds {len(payload) - HEADER.size} bytes, header implies {8 * n}")
    x = np.frombuffer(payload, dtype="<f8", offset=HEADER.size).reshape(H, W, C).astype(np.float64)
    return x, t


@dataclass
class ExternalDenoiser:
    """Denoiser that delegates ``predict_eps`` to another process through files.

    Each call writes ``request-NNNNNNNN.bin`` into ``directory`` and blocks
    until ``response-NNNNNNNN.bin`` appears. Both files use the same layout:
    magic ``DIG2``, u32 H, W, C, t, then H*W*C little-endian float64 values
    in (H, W, C) order. Writers must create files atomically (write to a
    temporary name, then rename).
    """

    directory: Path
    timeout: float = 30.0
    poll: float = 0.005
    counter: int = 0

    def __post_init__(self):
        self.directory = Path(self.directory)
        if not self.directory.is_dir():
            raise InputError(f"external denoiser directory {self.directory} does not exist")

    def predict_eps(self, x_t, t: int) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float64)
        squeeze = x.ndim == 2
        n = self.counter
        self.counter += 1
        req = self.directory / f"request-{n:08d}.bin"
        resp = self.directory / f"response-{n:08d}.bin"
        _atomic_write(req, encode_tensor(x, t))
        deadline = time.monotonic() + self.timeout
        while not resp.exists():
            if time.monotonic() > deadline:
                raise AdapterTimeout(f"no response {resp.name} within {self.timeout} s")
            time.sleep(self.poll)
        eps, t_back = decode_tensor(resp.read_bytes())
        resp.unlink()
        expected = x.shape if x.ndim == 3 else (*x.shape, 1)
        if eps.shape != expected:
            raise AdapterError(f"response shape {eps.shape} does not match request {expected}")
        if t_back != int(t):
            raise AdapterError(f"response timestep {t_back} does not match request {t}")
        return eps[..., 0] if squeeze else eps


def serve_requests(directory: str | Path, predict: Callable[[np.ndarray, int], np.ndarray],
                   stop: threading.Event, poll: float = 0.005) -> int:
    """Reference responder: answer requests in ``directory`` until ``stop`` is set.

    Returns the number of requests served.
    """
    directory = Path(directory)
    served = 0
    while not stop.is_set():
        pending = sorted(directory.glob("request-*.bin"))
        if not pending:
            time.sleep(poll)
            continue
        for req in pending:
            x, t = decode_tensor(req.read_bytes())
            req.unlink()
            eps = np.asarray(predict(x, t), dtype=np.float64).reshape(x.shape)
            _atomic_write(directory / req.name.replace("request-", "response-"), encode_tensor(eps, t))
            served += 1
    return served

