"""On-disk formats: STV1 raw volumes, binary PPM frame directories and the
STW1 named-tensor container (network weights, inversion records)."""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .stvolume import Space, VideoVolume

STV1_MAGIC = b"STV1"
STW1_MAGIC = b"STW1"
FRAME_PATTERN = "frame_{:05d}.ppm"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.ppm$")


class FormatError(ValueError):
    pass


def write_stv1(path: str | Path, vol: VideoVolume | np.ndarray) -> None:
    data = vol.data if isinstance(vol, VideoVolume) else np.asarray(vol)
    if data.ndim == 3:
        data = data[..., None]
    header = STV1_MAGIC + struct.pack("<4I", *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_stv1(path: str | Path, space: Space | str = Space.LATENT) -> VideoVolume:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != STV1_MAGIC:
        raise FormatError(f"{path}: not an STV1 file")
    dims = struct.unpack("<4I", raw[4:20])
    count = int(np.prod(dims))
    if len(raw) != 20 + 4 * count:
        raise FormatError(f"{path}: payload holds {len(raw) - 20} bytes, header implies {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(dims)
    return VideoVolume(data.astype(np.float32), Space(space))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(values: np.ndarray) -> np.ndarray:
    return (values.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def write_ppm(path: str | Path, frame: np.ndarray) -> None:
    """One (h, w, 3) frame in [-1, 1] as binary P6."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise FormatError(f"PPM frames need 3 channels, got shape {frame.shape}")
    h, w, _ = frame.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_uint8(frame).tobytes())


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _ppm_tokens(raw, 4)
    if magic != b"P6":
        raise FormatError(f"{path}: only binary P6 is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    if len(raw) - offset < w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    body = np.frombuffer(raw, dtype=np.uint8, offset=offset, count=w * h * 3)
    return from_uint8(body.reshape(h, w, 3))


def write_frames(directory: str | Path, vol: VideoVolume) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(vol.n_frames):
        write_ppm(directory / FRAME_PATTERN.format(t), vol.data[t])


def read_frames(directory: str | Path) -> VideoVolume:
    directory = Path(directory)
    names = sorted(p.name for p in directory.iterdir() if _FRAME_RE.match(p.name))
    if not names:
        raise FormatError(f"{directory}: no frame_NNNNN.ppm files")
    indices = [int(_FRAME_RE.match(n).group(1)) for n in names]
    if indices != list(range(len(indices))):
        raise FormatError(f"{directory}: frame numbering must be contiguous from 0")
    frames = [read_ppm(directory / n) for n in names]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{directory}: frames differ in size")
    return VideoVolume(np.stack(frames), Space.PIXEL)


def read_video(path: str | Path) -> VideoVolume:
    """A frame directory (pixel space) or an STV1 file."""
    path = Path(path)
    if path.is_dir():
        return read_frames(path)
    vol = read_stv1(path)
    if vol.data.size and vol.data.min() >= -1.0 and vol.data.max() <= 1.0:
        return vol.replace(vol.data, Space.PIXEL)
    return vol


def write_video(path: str | Path, vol: VideoVolume, like: str | Path | None = None) -> None:
    """Write in the format of `like` (directory -> PPM frames), else by suffix."""
    path = Path(path)
    as_dir = Path(like).is_dir() if like is not None else path.suffix.lower() != ".stv"
    if as_dir:
        write_frames(path, vol)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_stv1(path, vol)


def write_stw1(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(STW1_MAGIC + struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value, dtype="<f4")  # tobytes() is C-ordered; keeps 0-d shapes
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
                raise FormatError(f"tensor {name!r} cannot be encoded")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_stw1(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != STW1_MAGIC:
        raise FormatError(f"{path}: not an STW1 file")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(raw):
                raise FormatError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated STW1 file") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
