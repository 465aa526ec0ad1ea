"""Per-video-frame audio features: log-mel vectors, windows, and time encodings.

One feature vector is produced per video frame (25 fps by default), with
window length equal to the hop so frame count is floor(duration * fps).
Pretrained speech encoders are deliberately not used; the log-mel provider
and the synthetic provider (driven by a scene's envelope signal) both sit
behind the same FeatureTrack currency so a heavier encoder can be swapped
in later.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ClipTooShort, CorruptHeader, IndexOutOfRange, UnsupportedFormat

SUPPORTED_RATES = (16000, 22050, 44100)
DEFAULT_FPS = 25.0
DEFAULT_N_MELS = 80
DEFAULT_WINDOW = 4  # neighbor frames on each side of tau
DEFAULT_TIME_PAIRS = 4  # K sin/cos pairs
DEFAULT_BASE_PERIOD = 1.0  # seconds; periods grow geometrically from here
LOG_FLOOR_EPS = 1e-10

FEATURE_MAGIC = b"SYAF"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # float64 mono PCM in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureTrack:
    frames: np.ndarray  # (N, F_a) float32
    fps: float = DEFAULT_FPS

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class WindowedFeatures:
    stacked: np.ndarray  # (2n+1, F_a)
    n: int


@dataclass(frozen=True)
class TimeEncoding:
    vec: np.ndarray  # (2K,) in [-1, 1]


def load_wav(path: Path | str) -> AudioClip:
    """Decode a RIFF/PCM 16-bit WAV to mono float64 in [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            comptype = wf.getcomptype()
            if comptype != "NONE":
                raise UnsupportedFormat(f"{path}: compressed WAV ({comptype}) not supported")
            if sampwidth != 2:
                raise UnsupportedFormat(f"{path}: only 16-bit PCM supported, got {8 * sampwidth}-bit")
            if rate not in SUPPORTED_RATES:
                raise UnsupportedFormat(f"{path}: sample rate {rate} not in {SUPPORTED_RATES}")
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc
    except (EOFError, struct.error) as exc:
        raise CorruptHeader(f"{path}: truncated header") from exc
    expected = n_frames * n_channels * 2
    if len(raw) < expected:
        raise CorruptHeader(f"{path}: data chunk truncated ({len(raw)} < {expected} bytes)")
    if n_frames == 0:
        raise CorruptHeader(f"{path}: empty WAV")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path: Path | str, samples: np.ndarray, sample_rate: int) -> None:
    """16-bit mono PCM writer, mainly for fixtures and synthetic audio."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm16 = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm16.tobytes())


def _mel_scale(hz: np.ndarray) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over rfft bins, (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(_mel_scale(np.array(0.0)), _mel_scale(np.array(sample_rate / 2.0)), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        bank[m] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def extract_mel_features(
    clip: AudioClip, fps: float = DEFAULT_FPS, n_mels: int = DEFAULT_N_MELS
) -> FeatureTrack:
    """One log-mel vector per video frame; window == hop == 1/fps seconds."""
    hop = int(round(clip.sample_rate / fps))
    n_frames = len(clip.samples) // hop
    if n_frames < 1:
        raise ClipTooShort(
            f"clip of {len(clip.samples)} samples shorter than one {hop}-sample window"
        )
    n_fft = 1
    while n_fft < hop:
        n_fft *= 2
    bank = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    window = np.hanning(hop)
    frames = np.empty((n_frames, n_mels), dtype=np.float64)
    for i in range(n_frames):
        seg = clip.samples[i * hop : (i + 1) * hop] * window
        spec = np.abs(np.fft.rfft(seg, n=n_fft)) ** 2
        frames[i] = np.log(bank @ spec + LOG_FLOOR_EPS)
    return FeatureTrack(frames=frames.astype(np.float32), fps=fps)


def window_features(track: FeatureTrack, tau: int, n: int = DEFAULT_WINDOW) -> WindowedFeatures:
    """Rows tau-n .. tau+n with edge frames repeated outside the track."""
    if not 0 <= tau < len(track):
        raise IndexOutOfRange(f"tau = {tau} outside track of {len(track)} frames")
    idx = np.clip(np.arange(tau - n, tau + n + 1), 0, len(track) - 1)
    return WindowedFeatures(stacked=track.frames[idx].copy(), n=n)


def window_matrix(track: FeatureTrack, n: int = DEFAULT_WINDOW) -> np.ndarray:
    """All windows at once, (N, 2n+1, F_a); edge repetition as in window_features."""
    taus = np.arange(len(track))
    idx = np.clip(taus[:, None] + np.arange(-n, n + 1)[None, :], 0, len(track) - 1)
    return track.frames[idx]


def time_periods(k_pairs: int = DEFAULT_TIME_PAIRS, base_period: float = DEFAULT_BASE_PERIOD) -> np.ndarray:
    """Geometric period ladder base, 2*base, 4*base, ... (seconds).

    Periods grow from the base so slow rhythms (blinks, nod cycles) fall
    inside the ladder instead of aliasing against it.
    """
    return base_period * (2.0 ** np.arange(k_pairs))


def encode_time(
    tau: int,
    fps: float = DEFAULT_FPS,
    k_pairs: int = DEFAULT_TIME_PAIRS,
    base_period: float = DEFAULT_BASE_PERIOD,
) -> TimeEncoding:
    """[sin(2 pi t / P_k), cos(2 pi t / P_k)] pairs for t = tau / fps."""
    if tau < 0:
        raise IndexOutOfRange(f"tau = {tau} must be nonnegative")
    t = tau / fps
    periods = time_periods(k_pairs, base_period)
    phases = 2.0 * np.pi * t / periods
    vec = np.empty(2 * k_pairs)
    vec[0::2] = np.sin(phases)
    vec[1::2] = np.cos(phases)
    return TimeEncoding(vec=vec)


def encode_time_matrix(
    n_frames: int,
    fps: float = DEFAULT_FPS,
    k_pairs: int = DEFAULT_TIME_PAIRS,
    base_period: float = DEFAULT_BASE_PERIOD,
) -> np.ndarray:
    """(N, 2K) time encodings for frames 0..N-1."""
    t = np.arange(n_frames) / fps
    phases = 2.0 * np.pi * t[:, None] / time_periods(k_pairs, base_period)[None, :]
    out = np.empty((n_frames, 2 * k_pairs))
    out[:, 0::2] = np.sin(phases)
    out[:, 1::2] = np.cos(phases)
    return out


def save_feature_track(path: Path | str, track: FeatureTrack) -> None:
    """Cache file: magic SYAF, u32 frame count, u32 dim, frame-major f32le."""
    frames = np.ascontiguousarray(track.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def load_feature_track(path: Path | str, fps: float = DEFAULT_FPS) -> FeatureTrack:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise CorruptHeader(f"{path}: not a SYAF feature cache")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + count * dim * 4
    if len(raw) != expected:
        raise CorruptHeader(f"{path}: payload {len(raw) - 12} bytes, expected {expected - 12}")
    frames = np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).copy()
    return FeatureTrack(frames=frames, fps=fps)


class MelFeatureProvider:
    """WAV file -> log-mel FeatureTrack."""

    def __init__(self, fps: float = DEFAULT_FPS, n_mels: int = DEFAULT_N_MELS):
        self.fps = fps
        self.n_mels = n_mels

    def from_wav(self, path: Path | str) -> FeatureTrack:
        return extract_mel_features(load_wav(path), fps=self.fps, n_mels=self.n_mels)


class SyntheticFeatureProvider:
    """Features derived from a scene's driving envelope instead of real audio.

    The envelope is quantized to a small alphabet before projection onto
    fixed random carrier patterns, then a small seeded noise floor is
    added.  Quantization makes the audio-to-motion mapping genuinely
    one-to-many: frames with the same local envelope pattern carry
    near-identical features, so audio alone cannot identify a frame.
    """

    def __init__(
        self,
        n_mels: int = DEFAULT_N_MELS,
        fps: float = DEFAULT_FPS,
        noise_std: float = 0.01,
        quant_levels: int = 5,
        pattern_seed: int = 1234,
    ):
        self.n_mels = n_mels
        self.fps = fps
        self.noise_std = noise_std
        self.quant_levels = quant_levels
        rng = np.random.default_rng(pattern_seed)
        self.carrier_env = rng.normal(0.0, 1.0, n_mels)
        self.carrier_diff = rng.normal(0.0, 1.0, n_mels)

    def quantize(self, envelope: np.ndarray) -> np.ndarray:
        q = self.quant_levels - 1
        return np.round(np.asarray(envelope, dtype=np.float64) * q) / q

    def from_envelope(self, envelope: np.ndarray, seed: int) -> FeatureTrack:
        env_q = self.quantize(envelope)
        diff = np.gradient(env_q)
        rng = np.random.default_rng(seed)
        frames = (
            env_q[:, None] * self.carrier_env[None, :]
            + diff[:, None] * self.carrier_diff[None, :]
            + rng.normal(0.0, self.noise_std, (len(env_q), self.n_mels))
        )
        return FeatureTrack(frames=frames.astype(np.float32), fps=self.fps)
