"""Audio front end: WAV I/O, resampling, cyclic padding, STFT and log-Mel features."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, DecodeError

TARGET_RATE = 16000
TARGET_SECONDS = 8.0


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = TARGET_RATE
    window: int = 400
    hop: int = 160
    fft_size: int = 512
    mel_bins: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    pad_multiple: int = 16

    def validate(self) -> "MelConfig":
        if self.sample_rate <= 0 or self.window <= 0 or self.hop <= 0 or self.mel_bins <= 0:
            raise ConfigError(f"mel config sizes must be positive: {self}")
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.window > self.fft_size:
            raise ConfigError(f"window {self.window} exceeds fft_size {self.fft_size}")
        if not 0.0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(f"need 0 <= f_min < f_max <= {self.sample_rate / 2}, got {self.f_min}, {self.f_max}")
        if self.log_floor <= 0.0:
            raise ConfigError("log_floor must be positive")
        if self.pad_multiple <= 0:
            raise ConfigError("pad_multiple must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Spectrogram:
    """Log-Mel energies, ``values[bin, frame]``."""

    values: np.ndarray
    hop_seconds: float
    mel: MelConfig | None = field(default=None, repr=False)

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV container

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    """Decode a RIFF/WAVE byte string holding PCM16 or float32, mono or stereo."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError(f"{source_id or 'wav'}: RIFF: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        name = chunk_id.decode("latin-1")
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"{source_id or 'wav'}: {name}: chunk truncated ({len(body)} of {size} bytes)")
        if chunk_id == b"fmt ":
            if size < 16:
                raise DecodeError(f"{source_id or 'wav'}: fmt : chunk too short ({size} bytes)")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _EXTENSIBLE and size >= 26:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise DecodeError(f"{source_id or 'wav'}: fmt : chunk missing")
    if payload is None:
        raise DecodeError(f"{source_id or 'wav'}: data: chunk missing")
    tag, channels, rate, block_align, bits = fmt
    if channels not in (1, 2):
        raise DecodeError(f"{source_id or 'wav'}: fmt : unsupported channel count {channels}")
    if rate <= 0:
        raise DecodeError(f"{source_id or 'wav'}: fmt : invalid sample rate {rate}")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(payload, dtype="<i2", count=len(payload) // 2).astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4", count=len(payload) // 4).astype(np.float64)
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise DecodeError(f"{source_id or 'wav'}: fmt : unsupported codec (format tag {tag}, {bits} bits)")
    frames = samples.shape[0] // channels
    if frames == 0:
        raise DecodeError(f"{source_id or 'wav'}: data: no samples")
    samples = samples[: frames * channels].reshape(frames, channels)
    mono = samples[:, 0] if channels == 1 else 0.5 * (samples[:, 0] + samples[:, 1])
    return AudioClip(mono, int(rate), source_id)


def encode_wav(clip: AudioClip, codec: str = "pcm16") -> bytes:
    """Serialize a mono clip as PCM16 (rounded, clipped) or float32 WAV."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if codec == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif codec == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ContractError(f"unknown codec {codec!r}")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


# ---------------------------------------------------------------------------
# resampling and padding

SINC_ZERO_CROSSINGS = 16
KAISER_BETA = 8.0


def resample(clip: AudioClip, target_rate: int = TARGET_RATE, chunk: int = 16384) -> AudioClip:
    """Band-limited windowed-sinc rate conversion (Kaiser window, beta 8, 16 lobes per side).

    The low-pass cutoff is the lower of the two Nyquist rates. Kernel weights
    are renormalized per output sample, so constant signals pass unchanged.
    """
    src = clip.sample_rate
    if target_rate <= 0:
        raise ContractError(f"target rate must be positive, got {target_rate}")
    if target_rate == src:
        return clip
    x = clip.samples
    n_out = int(round(len(x) * target_rate / src))
    cutoff = min(1.0, target_rate / src)
    half = int(np.ceil(SINC_ZERO_CROSSINGS / cutoff))
    taps = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out), dtype=np.int64)
        # exact rational position n * src / target_rate
        base = (n * src) // target_rate
        frac = ((n * src) % target_rate) / target_rate
        idx = base[:, None] + taps[None, :]
        t = frac[:, None] - taps[None, :]
        win = _kaiser(t / half)
        h = cutoff * np.sinc(cutoff * t) * win
        valid = (idx >= 0) & (idx < len(x))
        h = np.where(valid, h, 0.0)
        vals = x[np.clip(idx, 0, len(x) - 1)]
        out[n] = (h * vals).sum(axis=1) / h.sum(axis=1)
    return AudioClip(out, target_rate, clip.source_id)


def _kaiser(u: np.ndarray) -> np.ndarray:
    """Kaiser window evaluated at normalized positions ``u`` in [-1, 1], zero outside."""
    inside = np.abs(u) <= 1.0
    arg = KAISER_BETA * np.sqrt(np.clip(1.0 - u**2, 0.0, None))
    return np.where(inside, np.i0(arg) / np.i0(KAISER_BETA), 0.0)


def cyclic_pad(clip: AudioClip, duration: float = TARGET_SECONDS) -> AudioClip:
    """Repeat a short clip end to end up to ``duration`` seconds; truncate a long one."""
    n = len(clip)
    if n == 0:
        raise DataError(f"{clip.source_id or 'clip'}: cannot pad an empty signal")
    target = int(round(duration * clip.sample_rate))
    out = clip.samples[np.arange(target) % n]
    return AudioClip(out, clip.sample_rate, clip.source_id)


# ---------------------------------------------------------------------------
# spectral analysis


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ContractError(f"radix-2 FFT needs a power-of-two length, got {n}")
    lead = x.shape[:-1]
    out = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(*lead, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return out


def rfft(x: np.ndarray) -> np.ndarray:
    n = np.asarray(x).shape[-1]
    return fft(x)[..., : n // 2 + 1]


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(length: int, window: int, hop: int) -> int:
    return 1 + (length - window) // hop


def stft(clip: AudioClip, config: MelConfig = MelConfig()) -> np.ndarray:
    """Complex one-sided spectrum, shape ``[frames, fft_size // 2 + 1]``."""
    config.validate()
    x = clip.samples
    if len(x) < config.window:
        raise DataError(f"{clip.source_id or 'clip'}: {len(x)} samples is shorter than the {config.window}-sample window")
    frames = frame_count(len(x), config.window, config.hop)
    starts = np.arange(frames) * config.hop
    segs = x[starts[:, None] + np.arange(config.window)[None, :]] * hann(config.window)
    padded = np.zeros((frames, config.fft_size))
    padded[:, : config.window] = segs
    return rfft(padded)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: MelConfig) -> np.ndarray:
    """Filter edge/center frequencies in Hz, ``mel_bins + 2`` points."""
    pts = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.mel_bins + 2)
    return mel_to_hz(pts)


def _triangle_cdf(x: np.ndarray, left, center, right) -> np.ndarray:
    """Integral of a unit-peak triangle from -inf to ``x``."""
    rise = np.clip(x - left, 0.0, center - left)
    fall = np.clip(right - x, 0.0, right - center)
    up = rise**2 / (2.0 * (center - left))
    down = (right - center) / 2.0 - fall**2 / (2.0 * (right - center))
    return np.where(x <= center, up, (center - left) / 2.0 + down)


def mel_filterbank(config: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``[mel_bins, fft_size // 2 + 1]``.

    Each FFT bin stands for the frequency cell of width ``sr / fft_size``
    around its center; a filter's weight on a bin is the triangle's integral
    over that cell. Rows are scaled to sum to one.
    """
    config.validate()
    n_freq = config.fft_size // 2 + 1
    delta = config.sample_rate / config.fft_size
    edges = (np.arange(n_freq + 1) - 0.5) * delta
    pts = mel_centers(config)
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    cdf = _triangle_cdf(edges[None, :], left, center, right)
    weights = np.diff(cdf, axis=1)
    weights[weights < 0.0] = 0.0
    totals = weights.sum(axis=1)
    empty = np.flatnonzero(totals <= 0.0)
    if empty.size:
        raise ConfigError(f"mel filter {int(empty[0])} has no support at fft_size {config.fft_size}; reduce mel_bins")
    return weights / totals[:, None]


def log_mel(clip: AudioClip, config: MelConfig = MelConfig()) -> Spectrogram:
    """``ln(max(filterbank @ |STFT|^2, floor))``, frames right-padded by repeating the last one."""
    config.validate()
    if clip.sample_rate != config.sample_rate:
        raise ContractError(f"clip rate {clip.sample_rate} != mel config rate {config.sample_rate}; resample first")
    power = np.abs(stft(clip, config)) ** 2
    energies = mel_filterbank(config) @ power.T
    values = np.log(np.maximum(energies, config.log_floor))
    short = (-values.shape[1]) % config.pad_multiple
    if short:
        values = np.concatenate([values, np.repeat(values[:, -1:], short, axis=1)], axis=1)
    return Spectrogram(values, config.hop / config.sample_rate, config)


def preprocess(clip: AudioClip, config: MelConfig = MelConfig(), duration: float = TARGET_SECONDS) -> Spectrogram:
    """Resample, cyclic-pad and convert a raw clip to its log-Mel spectrogram."""
    return log_mel(cyclic_pad(resample(clip, config.sample_rate), duration), config)


# ---------------------------------------------------------------------------
# SPG1 serialization

_SPG_HEADER = struct.Struct("<4sIId")


def spectrogram_to_bytes(spec: Spectrogram) -> bytes:
    header = _SPG_HEADER.pack(b"SPG1", spec.bins, spec.frames, spec.hop_seconds)
    return header + np.ascontiguousarray(spec.values, dtype="<f8").tobytes()


def spectrogram_from_bytes(data: bytes) -> Spectrogram:
    if len(data) < _SPG_HEADER.size:
        raise DataError("SPG1: truncated header")
    magic, bins, frames, hop = _SPG_HEADER.unpack_from(data)
    if magic != b"SPG1":
        raise DataError(f"SPG1: bad magic {magic!r}")
    expected = _SPG_HEADER.size + 8 * bins * frames
    if len(data) != expected:
        raise DataError(f"SPG1: expected {expected} bytes, got {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=_SPG_HEADER.size).reshape(bins, frames).astype(np.float64)
    return Spectrogram(values, hop)
