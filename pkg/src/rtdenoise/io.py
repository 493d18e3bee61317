"""File formats: 16-bit mono WAV, the weight container, and the clean/noisy pair folder.

Weight container layout (all integers little-endian)::

    b"WDEN1"                  5 bytes magic
    header_len                uint32
    header                    header_len bytes of UTF-8 text, one entry per line:
                                  key=value            config fields
                                  tensor NAME D0,D1,.. OFFSET
                              OFFSET counts bytes from the start of the payload
    payload                   float32 LE tensors, C order, in manifest order
"""
from __future__ import annotations

import math
import struct
import wave
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .augment import PairBatch
from .model import DemucsConfig, ModelParams, param_shapes
from .tensor import ShapeError

MAGIC = b"WDEN1"
PCM_SCALE = 32768.0
SAMPLE_RATE = 16000


class DataError(ValueError):
    """Input file is missing, malformed, or does not fit the expected format."""


class WeightFormatError(DataError):
    pass


def read_wav(path, rate: int = SAMPLE_RATE, force: bool = False) -> tuple[np.ndarray, int]:
    """Read a 16-bit mono PCM WAV as float64 samples in [-1, 1).

    A sample rate other than ``rate`` is an error unless ``force`` is set, in
    which case it only warns.
    """
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, sr, frames = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(frames)
    except (wave.Error, EOFError, struct.error) as exc:
        raise DataError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if frames == 0 or not raw:
        raise DataError(f"{path}: file contains no samples")
    if len(raw) != 2 * frames:
        raise DataError(f"{path}: truncated data chunk ({len(raw)} bytes for {frames} frames)")
    if sr != rate:
        if not force:
            raise DataError(f"{path}: sample rate {sr} Hz, expected {rate} Hz (use --force to accept)")
        warnings.warn(f"{path}: sample rate {sr} Hz differs from {rate} Hz", stacklevel=2)
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return samples, sr


def quantize(samples) -> np.ndarray:
    """Clamp to [-1, 1) and round to 16-bit PCM codes."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / PCM_SCALE)
    return np.round(x * PCM_SCALE).astype("<i2")


def write_wav(path, samples, rate: int = SAMPLE_RATE) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim > 1 and all(d == 1 for d in samples.shape[:-1]):
        samples = samples.reshape(-1)
    if samples.ndim != 1:
        raise DataError(f"write_wav takes a mono signal, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise DataError("refusing to write non-finite samples")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(quantize(samples).tobytes())


# --- weight container -----------------------------------------------------------

_CONFIG_TYPES = {f.name: f.type for f in fields(DemucsConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    return repr(value)


def _parse_config(entries: dict) -> DemucsConfig:
    kwargs = {}
    for name, raw in entries.items():
        if name not in _CONFIG_TYPES:
            raise WeightFormatError(f"unknown config key {name!r} in weight header")
        kind = _CONFIG_TYPES[name]
        try:
            if kind in ("bool", bool):
                if raw not in ("0", "1"):
                    raise ValueError(raw)
                kwargs[name] = raw == "1"
            elif kind in ("float", float):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = int(raw)
        except ValueError as exc:
            raise WeightFormatError(f"bad value {raw!r} for config key {name!r}") from exc
    try:
        return DemucsConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise WeightFormatError(f"invalid config in weight header: {exc}") from exc


def header_text(params: ModelParams, config: DemucsConfig) -> str:
    lines = [f"{k}={_format_value(v)}" for k, v in config.to_dict().items()]
    offset = 0
    for name, shape in param_shapes(config).items():
        lines.append(f"tensor {name} {','.join(map(str, shape))} {offset}")
        offset += 4 * math.prod(shape)
    return "\n".join(lines) + "\n"


def save_params(path, params: ModelParams, config: DemucsConfig) -> None:
    """Write ``params`` as float32. Values not representable in float32 are rounded."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"missing tensor {name}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(params[name].shape)}, config implies {shape}")
    header = header_text(params, config).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(params[name], dtype="<f4").tobytes() for name in expected)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_params(path, config: DemucsConfig | None = None) -> tuple[ModelParams, DemucsConfig]:
    """Read a weight file; returns ``(params, config)`` with float64 tensors.

    If ``config`` is given it must agree with the configuration stored in the
    file.
    """
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    if len(blob) < len(MAGIC) + 4:
        raise WeightFormatError(f"{path}: truncated header")
    (size,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + size:
        raise WeightFormatError(f"{path}: truncated header")
    try:
        text = blob[start:start + size].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WeightFormatError(f"{path}: header is not UTF-8") from exc
    payload = blob[start + size:]

    entries, manifest = {}, []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 4:
                raise WeightFormatError(f"malformed manifest line {line!r}")
            _, name, dims, offset = parts
            try:
                shape = tuple(int(d) for d in dims.split(","))
                manifest.append((name, shape, int(offset)))
            except ValueError as exc:
                raise WeightFormatError(f"malformed manifest entry for tensor {name}") from exc
        elif "=" in line:
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
        else:
            raise WeightFormatError(f"malformed header line {line!r}")
    stored = _parse_config(entries)
    if config is not None and config != stored:
        diff = {k: (v, getattr(stored, k)) for k, v in config.to_dict().items() if getattr(stored, k) != v}
        raise ShapeError(f"weight file config does not match requested config: "
                         + ", ".join(f"{k} requested {a}, file has {b}" for k, (a, b) in diff.items()))

    expected = param_shapes(stored)
    names = [m[0] for m in manifest]
    if names != list(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise ShapeError(f"manifest does not match config: missing {missing}, unexpected {extra}")
    params, offset = {}, 0
    for name, shape, at in manifest:
        if shape != expected[name]:
            raise ShapeError(f"tensor {name} has manifest shape {shape}, config implies {expected[name]}")
        if at != offset:
            raise WeightFormatError(f"tensor {name} has offset {at}, expected {offset}")
        n = 4 * math.prod(shape)
        if offset + n > len(payload):
            raise WeightFormatError(f"payload truncated inside tensor {name}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset += n
    if offset != len(payload):
        raise WeightFormatError(f"payload has {len(payload) - offset} trailing bytes")
    return params, stored


# --- pair dataset -----------------------------------------------------------------

@dataclass
class PairDataset:
    """``root/clean/*.wav`` and ``root/noisy/*.wav`` matched by file name."""

    root: Path
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.root = Path(self.root)
        clean_dir, noisy_dir = self.root / "clean", self.root / "noisy"
        for d in (clean_dir, noisy_dir):
            if not d.is_dir():
                raise DataError(f"missing directory {d}")
        self.names = sorted(p.name for p in noisy_dir.glob("*.wav"))
        if not self.names:
            raise DataError(f"no .wav files in {noisy_dir}")
        orphans = [n for n in self.names if not (clean_dir / n).is_file()]
        if orphans:
            raise DataError(f"noisy files without a clean partner: {orphans}")

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """``(clean, noise)`` with ``noise = noisy - clean``."""
        name = self.names[index]
        clean, _ = read_wav(self.root / "clean" / name, self.rate)
        noisy, _ = read_wav(self.root / "noisy" / name, self.rate)
        if clean.shape != noisy.shape:
            raise DataError(f"{name}: clean has {clean.size} samples, noisy has {noisy.size}")
        return clean, noisy - clean

    def batch(self, indices, length: int | None = None) -> PairBatch:
        """Stack items, cropped to ``length`` (default: the shortest item)."""
        items = [self[i] for i in indices]
        n = min(c.size for c, _ in items) if length is None else length
        if any(c.size < n for c, _ in items):
            raise DataError(f"items shorter than the requested length {n}")
        clean = np.stack([c[None, :n] for c, _ in items])
        noise = np.stack([z[None, :n] for _, z in items])
        return PairBatch(clean, noise)
