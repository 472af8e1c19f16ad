"""Multichannel STFT analysis and weighted overlap-add synthesis.

Frames are laid out as X_FTM (frequency x time x channel) throughout the
package.  Frame t covers samples [t * hop, t * hop + fft_size); there is no
centering or reflection padding, so sample n of the resynthesized signal
lines up with sample n of the input.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChannelLengthMismatch",
    "StftConfig",
    "StftAnalyzer",
    "StftSynthesizer",
    "analyze",
    "synthesize",
]


class ChannelLengthMismatch(ValueError):
    """Input channels differ in length."""


@dataclass(frozen=True)
class StftConfig:
    """STFT framing parameters (16 kHz, 1024-point Hann, 75% overlap)."""

    fft_size: int = 1024
    hop: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ValueError("fft_size and hop must be positive")
        if self.fft_size % self.hop != 0:
            raise ValueError("hop must divide fft_size")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    @property
    def frame_period_s(self):
        return self.hop / self.sample_rate

    def analysis_window(self):
        """Periodic Hann window of length fft_size."""
        n = np.arange(self.fft_size)
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / self.fft_size))

    def synthesis_window(self):
        """Analysis window rescaled so analysis x synthesis overlap-adds
        to one (checked to 1e-10)."""
        wa = self.analysis_window()
        ws = wa / self._ola_norm(wa)
        prof = self._cola_profile(wa, ws)
        if np.max(np.abs(prof - 1.0)) > 1e-10:
            raise ValueError("window pair does not satisfy COLA")
        return ws

    def _ola_norm(self, wa):
        overlap = self.fft_size // self.hop
        acc = np.zeros(self.hop)
        for k in range(overlap):
            seg = (wa * wa)[k * self.hop:(k + 1) * self.hop]
            acc += seg
        if np.max(acc) <= 0.0:
            raise ValueError("degenerate window")
        return np.tile(acc, overlap)

    def _cola_profile(self, wa, ws):
        """Sum_k wa(n - k hop) ws(n - k hop) over one hop period."""
        overlap = self.fft_size // self.hop
        acc = np.zeros(self.hop)
        for k in range(overlap):
            acc += (wa * ws)[k * self.hop:(k + 1) * self.hop]
        return acc


def _as_channels(samples):
    """Coerce input to a float64 [n, M] array.

    Accepts a 1-D array (single channel), a 2-D [n, M] array, or a sequence
    of per-channel 1-D arrays (which must share one length).
    """
    if isinstance(samples, np.ndarray):
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError("expected [n] or [n, M] samples")
        return x
    chans = [np.asarray(c, dtype=np.float64).reshape(-1) for c in samples]
    lengths = {len(c) for c in chans}
    if len(lengths) != 1:
        raise ChannelLengthMismatch(f"channel lengths differ: {sorted(lengths)}")
    return np.stack(chans, axis=1)


class StftAnalyzer:
    """Streaming analysis: push samples, get completed frames back.

    Single-consumer state machine; distinct instances are independent.
    """

    def __init__(self, cfg: StftConfig, n_chan: int):
        self.cfg = cfg
        self.n_chan = n_chan
        self._window = cfg.analysis_window()[:, None]
        self._pending = np.zeros((0, n_chan))
        self.frames_emitted = 0

    def push(self, samples):
        """Feed [k, M] samples; returns X_FTM for frames completed so far."""
        x = _as_channels(samples)
        if x.shape[1] != self.n_chan:
            raise ChannelLengthMismatch(
                f"expected {self.n_chan} channels, got {x.shape[1]}")
        buf = np.concatenate([self._pending, x], axis=0)
        cfg = self.cfg
        n_frames = max(0, (buf.shape[0] - cfg.fft_size) // cfg.hop + 1)
        if n_frames == 0:
            self._pending = buf
            return np.zeros((cfg.n_bins, 0, self.n_chan), dtype=np.complex128)
        idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
        segs = buf[idx]                                    # [T, fft, M]
        spec = np.fft.rfft(segs * self._window[None], axis=1)
        self._pending = buf[n_frames * cfg.hop:]
        self.frames_emitted += n_frames
        return np.ascontiguousarray(np.moveaxis(spec, 0, 1))  # [F, T, M]


class StftSynthesizer:
    """Streaming weighted overlap-add for a single channel.

    Emits a sample once no future frame can overlap it (hop samples per
    frame); ``flush`` returns the remaining tail.
    """

    def __init__(self, cfg: StftConfig):
        self.cfg = cfg
        self._window = cfg.synthesis_window()
        self._tail = np.zeros(cfg.fft_size)
        self._started = False

    def push(self, frames):
        """Feed [F] or [F, T] spectra; returns newly finalized samples."""
        spec = np.asarray(frames, dtype=np.complex128)
        if spec.ndim == 1:
            spec = spec[:, None]
        cfg = self.cfg
        if spec.shape[0] != cfg.n_bins:
            raise ValueError(f"expected {cfg.n_bins} bins, got {spec.shape[0]}")
        out = []
        for t in range(spec.shape[1]):
            frame = np.fft.irfft(spec[:, t], n=cfg.fft_size) * self._window
            if self._started:
                out.append(self._tail[:cfg.hop].copy())
                self._tail = np.roll(self._tail, -cfg.hop)
                self._tail[-cfg.hop:] = 0.0
            self._tail += frame
            self._started = True
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    def flush(self):
        """Return the trailing fft_size samples and reset."""
        tail = self._tail if self._started else np.zeros(0)
        self._tail = np.zeros(self.cfg.fft_size)
        self._started = False
        return tail


def analyze(samples, cfg: StftConfig):
    """Analyze a full multichannel signal.

    Args:
        samples: [n] or [n, M] array, or a list of per-channel arrays
            (all the same length, at least fft_size samples).
        cfg: framing parameters.

    Returns:
        X_FTM complex array, one frame per hop.
    """
    x = _as_channels(samples)
    if x.shape[0] < cfg.fft_size:
        raise ValueError("input shorter than one analysis frame")
    return StftAnalyzer(cfg, x.shape[1]).push(x)


def synthesize(spec_FT, cfg: StftConfig, length=None):
    """Overlap-add a single-channel spectrogram back to samples.

    Args:
        spec_FT: [F, T] complex frames (contiguous hops).
        length: optional output length; the natural length
            fft_size + (T - 1) * hop is zero-padded or truncated to it.

    Returns:
        float64 sample array.
    """
    spec = np.asarray(spec_FT, dtype=np.complex128)
    if spec.ndim != 2:
        raise ValueError("expected [F, T] spectrogram")
    synth = StftSynthesizer(cfg)
    head = synth.push(spec)
    out = np.concatenate([head, synth.flush()])
    if length is not None:
        if len(out) >= length:
            out = out[:length]
        else:
            out = np.concatenate([out, np.zeros(length - len(out))])
    return out
