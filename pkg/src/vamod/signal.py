"""Mono audio container, WAV file I/O, and elementary DSP.

Samples are kept as float64 arrays at full scale +-1.0. Only two WAV
encodings are supported: 16-bit integer PCM and IEEE float32, both mono.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChannelCountError,
    CorruptFileError,
    DomainError,
    FormatError,
    IoError,
)

PCM16_SCALE = 32768.0

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3


@dataclass(frozen=True)
class AudioBuffer:
    """Mono sample sequence with its sample rate.

    samples: 1-D float array, full scale +-1.0 (values outside are legal,
    e.g. after gain).
    """

    samples: np.ndarray
    sample_rate_hz: int = 44100

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DomainError(f"expected 1-D sample array, got shape {samples.shape}")
        if self.sample_rate_hz <= 0:
            raise DomainError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def read_wav(path) -> AudioBuffer:
    """Read a mono RIFF/WAVE file (PCM16 or IEEE float32).

    16-bit samples are scaled by 1/32768; float samples pass through.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 12:
        raise CorruptFileError(f"{path}: too short for a RIFF header")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise CorruptFileError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise CorruptFileError(f"{path}: data chunk truncated")
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise CorruptFileError(f"{path}: missing fmt or data chunk")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise ChannelCountError(f"{path}: expected mono, got {channels} channels")

    if audio_format == _WAVE_FORMAT_PCM and bits == 16:
        if len(data) % 2:
            raise CorruptFileError(f"{path}: PCM16 data length is odd")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / PCM16_SCALE
    elif audio_format == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        if len(data) % 4:
            raise CorruptFileError(f"{path}: float32 data length not a multiple of 4")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise FormatError(
            f"{path}: unsupported encoding (format tag {audio_format}, {bits} bits)"
        )

    if not np.all(np.isfinite(samples)):
        raise CorruptFileError(f"{path}: non-finite sample values")
    return AudioBuffer(samples=samples, sample_rate_hz=int(sample_rate))


def write_wav(buffer: AudioBuffer, path, format: str = "float32") -> None:
    """Write a mono WAV file, either "pcm16" or "float32".

    pcm16 hard-clips values outside +-1 before quantization; float32 is a
    lossless round trip through read_wav.
    """
    if len(buffer) == 0:
        raise DomainError("refusing to write an empty buffer")
    if format == "pcm16":
        q = np.round(buffer.samples * PCM16_SCALE)
        q = np.clip(q, -32768, 32767).astype("<i2")
        payload = q.tobytes()
        fmt_tag, bits = _WAVE_FORMAT_PCM, 16
    elif format == "float32":
        payload = buffer.samples.astype("<f4").tobytes()
        fmt_tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise DomainError(f"unknown wav format {format!r}")

    fs = buffer.sample_rate_hz
    block_align = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt_tag, 1, fs, fs * block_align, block_align, bits)
    chunks = [(b"fmt ", fmt_chunk)]
    if fmt_tag == _WAVE_FORMAT_IEEE_FLOAT:
        chunks.append((b"fact", struct.pack("<I", len(buffer))))
    chunks.append((b"data", payload))

    body = b"".join(
        cid + struct.pack("<I", len(c)) + c + (b"\x00" if len(c) & 1 else b"")
        for cid, c in chunks
    )
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def pre_emphasis(buffer: AudioBuffer, coeff: float = 0.95) -> AudioBuffer:
    """First-difference high-pass: out[n] = in[n] - coeff*in[n-1], in[-1] = 0."""
    x = buffer.samples
    out = x.copy()
    out[1:] -= coeff * x[:-1]
    return AudioBuffer(out, buffer.sample_rate_hz)


def apply_gain_db(buffer: AudioBuffer, gain_db: float) -> AudioBuffer:
    """Scale every sample by 10^(gain_db/20)."""
    if not np.isfinite(gain_db):
        raise DomainError(f"gain_db must be finite, got {gain_db}")
    return AudioBuffer(buffer.samples * 10.0 ** (gain_db / 20.0), buffer.sample_rate_hz)


def segment(buffer: AudioBuffer, segment_ms: float) -> list[AudioBuffer]:
    """Split into consecutive non-overlapping segments; the remainder is dropped."""
    if segment_ms <= 0:
        raise DomainError(f"segment_ms must be positive, got {segment_ms}")
    seg_len = int(round(segment_ms * buffer.sample_rate_hz / 1000.0))
    if seg_len <= 0:
        raise DomainError(f"segment of {segment_ms} ms is shorter than one sample")
    count = len(buffer) // seg_len
    return [
        AudioBuffer(buffer.samples[i * seg_len : (i + 1) * seg_len].copy(), buffer.sample_rate_hz)
        for i in range(count)
    ]


def sine(freq_hz: float, amplitude: float, duration_s: float, sample_rate_hz: int = 44100) -> AudioBuffer:
    """Pure tone probe: amplitude * sin(2*pi*freq*n/fs), starting at phase 0."""
    if not 0 < freq_hz < sample_rate_hz / 2:
        raise DomainError(
            f"freq_hz must be in (0, {sample_rate_hz / 2}) for fs={sample_rate_hz}, got {freq_hz}"
        )
    n = np.arange(int(round(duration_s * sample_rate_hz)))
    return AudioBuffer(amplitude * np.sin(2.0 * np.pi * freq_hz * n / sample_rate_hz), sample_rate_hz)
