"""Speech signal front-end.

Fixed analysis stack: 16 kHz mono audio, 40 ms Hann window zero-padded into a
1024-point FFT, 10 ms hop, 80 mel channels spanning 0-8000 Hz, natural-log
power with a 1e-10 floor. Frames are centered via reflect padding, so a
waveform of N samples yields exactly floor(N / hop) + 1 frames.

Also provides energy-based silence trimming, polyphase resampling, an
iterative phase-reconstruction audition path, and the mel/WAV file formats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as spsig
from scipy.io import wavfile

from .errors import EmptyAfterTrim, InvalidInput, IoError

SAMPLE_RATE = 16_000
HOP_S = 0.010
WIN_S = 0.040
FFT_SIZE = 1024
N_MELS = 80
FMIN_HZ = 0.0
FMAX_HZ = 8000.0
LOG_FLOOR_POWER = 1e-10

HOP = int(round(SAMPLE_RATE * HOP_S))
WIN = int(round(SAMPLE_RATE * WIN_S))

MEL_MAGIC = b"UFMEL1"

_MEL_BREAK_HZ = 1000.0
_MEL_BREAK = 15.0
_MEL_LOGSTEP = np.log(6.4) / 27.0


@dataclass(frozen=True)
class Waveform:
    """Mono waveform with float samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInput(f"waveform must be 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidInput(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise InvalidInput("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Natural-log mel power frames, shape (T, 80), floored at log(log_floor)."""

    frames: np.ndarray
    hop_s: float = HOP_S
    win_s: float = WIN_S
    fft_size: int = FFT_SIZE
    sample_rate: int = SAMPLE_RATE
    log_floor: float = LOG_FLOOR_POWER

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise InvalidInput(f"mel frames must be (T, {N_MELS}), got {frames.shape}")
        if frames.shape[0] < 1:
            raise InvalidInput("mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise InvalidInput("mel frames contain non-finite values")
        floor = float(np.log(self.log_floor))
        # f32 storage may round a float64 log(floor) down by one ulp.
        if float(frames.min()) < floor - 1e-4:
            raise InvalidInput("mel frames fall below the log power floor")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class VadConfig:
    """Energy VAD thresholds in dB relative to full scale."""

    frame_s: float = 0.020
    energy_threshold_db: float = -45.0
    edge_threshold_db: float = -35.0
    min_speech_frames: int = 2

    def __post_init__(self):
        if self.frame_s <= 0:
            raise InvalidInput("frame_s must be positive")
        if self.edge_threshold_db < self.energy_threshold_db:
            raise InvalidInput("edge threshold must be >= interior energy threshold")
        if self.min_speech_frames < 1:
            raise InvalidInput("min_speech_frames must be >= 1")


def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    mel = 3.0 * f / 200.0
    above = f >= _MEL_BREAK_HZ
    return np.where(
        above,
        _MEL_BREAK + np.log(np.maximum(f, 1e-12) / _MEL_BREAK_HZ) / _MEL_LOGSTEP,
        mel,
    )


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    hz = 200.0 * m / 3.0
    above = m >= _MEL_BREAK
    return np.where(above, _MEL_BREAK_HZ * np.exp(_MEL_LOGSTEP * (m - _MEL_BREAK)), hz)


def mel_filterbank(
    n_mels: int = N_MELS,
    fft_size: int = FFT_SIZE,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = FMIN_HZ,
    fmax: float = FMAX_HZ,
) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, fft_size // 2 + 1).

    Filters are area-normalized (each triangle scaled by 2 / bandwidth) so
    filter energies are comparable across the band.
    """
    bin_hz = np.fft.rfftfreq(fft_size, d=1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bin_hz.size))
    for i in range(n_mels):
        lo, ctr, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / (ctr - lo)
        down = (hi - bin_hz) / (hi - ctr)
        fb[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def _analysis_window() -> np.ndarray:
    # 640-tap periodic Hann centered inside the 1024-point FFT frame.
    win = spsig.get_window("hann", WIN, fftbins=True)
    out = np.zeros(FFT_SIZE)
    pad = (FFT_SIZE - WIN) // 2
    out[pad : pad + WIN] = win
    return out


_WINDOW = _analysis_window()
_MEL_FB = mel_filterbank()
_FB_PINV = None


def _fb_pinv() -> np.ndarray:
    global _FB_PINV
    if _FB_PINV is None:
        _FB_PINV = np.linalg.pinv(_MEL_FB)
    return _FB_PINV


def _stft(samples: np.ndarray) -> np.ndarray:
    """Centered STFT, shape (floor(N / hop) + 1, fft // 2 + 1) complex."""
    x = np.asarray(samples, dtype=np.float64)
    pad = FFT_SIZE // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = x.size // HOP + 1
    frames = np.lib.stride_tricks.sliding_window_view(xp, FFT_SIZE)[::HOP][:n_frames]
    return np.fft.rfft(frames * _WINDOW, axis=1)


def _istft(spec: np.ndarray) -> np.ndarray:
    """Overlap-add inverse of _stft; returns hop * (T - 1) samples."""
    frames = np.fft.irfft(spec, n=FFT_SIZE, axis=1)
    t_frames = spec.shape[0]
    total = FFT_SIZE + HOP * (t_frames - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(t_frames):
        s = i * HOP
        y[s : s + FFT_SIZE] += frames[i] * _WINDOW
        wsum[s : s + FFT_SIZE] += _WINDOW * _WINDOW
    y = y / np.maximum(wsum, 1e-12)
    pad = FFT_SIZE // 2
    n_out = HOP * (t_frames - 1)
    return y[pad : pad + n_out]


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling to target_rate; duration kept within one sample."""
    if w.samples.size == 0:
        raise InvalidInput("cannot resample an empty waveform")
    if target_rate <= 0:
        raise InvalidInput(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), target_rate)
    g = np.gcd(int(target_rate), int(w.sample_rate))
    up, down = target_rate // g, w.sample_rate // g
    y = spsig.resample_poly(w.samples, up, down)
    return Waveform(y, target_rate)


def log_mel(w: Waveform) -> MelSpectrogram:
    """Natural-log mel power spectrogram of a 16 kHz waveform.

    Returns exactly floor(N / hop) + 1 frames. Power below 1e-10 is clamped
    before the log, so digital silence maps to constant log(1e-10) frames.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise InvalidInput(f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate}")
    if w.samples.size < HOP:
        raise InvalidInput(f"waveform too short: need >= {HOP} samples, got {w.samples.size}")
    spec = _stft(w.samples)
    power = spec.real**2 + spec.imag**2
    mel_power = power @ _MEL_FB.T
    frames = np.log(np.clip(mel_power, LOG_FLOOR_POWER, None))
    return MelSpectrogram(frames.astype(np.float32))


def _frame_energy_db(x: np.ndarray, frame_len: int) -> np.ndarray:
    n_full = x.size // frame_len
    tail = x.size - n_full * frame_len
    energies = []
    if n_full:
        blocks = x[: n_full * frame_len].reshape(n_full, frame_len)
        energies.append(np.mean(blocks**2, axis=1))
    if tail:
        energies.append(np.array([np.mean(x[n_full * frame_len :] ** 2)]))
    e = np.concatenate(energies) if energies else np.zeros(0)
    return 10.0 * np.log10(e + 1e-12)


def trim_silence(w: Waveform, cfg: VadConfig = VadConfig()) -> Waveform:
    """Cut leading and trailing low-energy frames; interior frames are kept.

    Frame boundaries are multiples of the VAD frame length, so re-trimming a
    trimmed waveform is a no-op. Raises EmptyAfterTrim when fewer than
    min_speech_frames frames clear the edge threshold.
    """
    if w.samples.size == 0:
        raise EmptyAfterTrim("waveform is empty")
    frame_len = int(round(cfg.frame_s * w.sample_rate))
    if frame_len < 1:
        raise InvalidInput("VAD frame shorter than one sample")
    db = _frame_energy_db(w.samples, frame_len)
    speech = np.flatnonzero(db >= cfg.edge_threshold_db)
    if speech.size < cfg.min_speech_frames:
        raise EmptyAfterTrim(
            f"only {speech.size} frames above {cfg.edge_threshold_db} dB"
        )
    start = int(speech[0]) * frame_len
    end = min((int(speech[-1]) + 1) * frame_len, w.samples.size)
    return Waveform(w.samples[start:end], w.sample_rate)


def mel_to_audio(m: MelSpectrogram, iters: int = 32, seed: int = 0) -> Waveform:
    """Iterative phase reconstruction from a log-mel spectrogram.

    Mel power is lifted back to the linear spectrum with the filterbank
    pseudo-inverse (clamped at zero), then phase is recovered by alternating
    projection for `iters` rounds starting from seeded random phase. Audition
    quality only; not part of the training loop.
    """
    if iters <= 0:
        raise InvalidInput(f"iters must be >= 1, got {iters}")
    mel_power = np.exp(m.frames.astype(np.float64))
    lin_power = np.clip(mel_power @ _fb_pinv().T, 0.0, None)
    mag = np.sqrt(lin_power)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    y = np.zeros(HOP * (m.n_frames - 1)) if m.n_frames > 1 else np.zeros(HOP)
    for _ in range(iters):
        y = _istft(mag * phase)
        phase = np.exp(1j * np.angle(_stft(y)))
    return Waveform(y, m.sample_rate)


def read_wav(path) -> Waveform:
    """Load a mono WAV file; 16-bit PCM is scaled to [-1, 1)."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    try:
        sr, data = wavfile.read(path)
    except ValueError as e:
        raise IoError(f"unreadable WAV file {path}: {e}") from e
    if data.ndim != 1:
        raise InvalidInput(f"expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidInput(f"unsupported WAV sample format {data.dtype}")
    return Waveform(samples, int(sr))


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM; samples are clipped to full scale first."""
    x = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype(np.int16)
    wavfile.write(Path(path), w.sample_rate, pcm)


def write_mel(path, m: MelSpectrogram) -> None:
    """Binary mel file: magic, u32 T, u32 n_mels, f32 row-major frames.

    All integers and floats little-endian. A JSON sidecar at <path>.json
    carries the analysis metadata.
    """
    path = Path(path)
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MEL_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes(order="C"))
    meta = {
        "fft_size": m.fft_size,
        "hop_s": m.hop_s,
        "log_floor": m.log_floor,
        "sample_rate": m.sample_rate,
        "win_s": m.win_s,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=0)
        f.write("\n")


def read_mel(path) -> MelSpectrogram:
    """Inverse of write_mel; missing sidecar falls back to stack defaults."""
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MEL_MAGIC))
        if magic != MEL_MAGIC:
            raise IoError(f"{path}: bad magic {magic!r}")
        t, n = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * t * n), dtype="<f4")
    if data.size != t * n:
        raise IoError(f"{path}: truncated payload")
    meta = {}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        with open(sidecar) as f:
            meta = json.load(f)
    return MelSpectrogram(
        data.reshape(t, n).copy(),
        hop_s=float(meta.get("hop_s", HOP_S)),
        win_s=float(meta.get("win_s", WIN_S)),
        fft_size=int(meta.get("fft_size", FFT_SIZE)),
        sample_rate=int(meta.get("sample_rate", SAMPLE_RATE)),
        log_floor=float(meta.get("log_floor", LOG_FLOOR_POWER)),
    )
