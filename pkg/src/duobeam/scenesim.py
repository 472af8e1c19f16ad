"""Synthetic multichannel scene rendering for tests and benchmarks.

A scene is a microphone array plus a list of far-field sources, each with an
azimuth schedule (the azimuth may jump at scheduled times), a diffuse noise
field built from decorrelated plane waves, and a simple reverberation model:
the direct path is an exact fractional delay from the geometry and the tail
is seeded noise with an exponential envelope matching the requested RT60.

Per-source images are rendered separately and summed, so the returned
mixture equals the sample-wise sum of the images plus the noise exactly.
Level fields are RMS levels in dB at the reference microphone relative to a
unit-RMS signal, so SNR/SIR between components is just the level difference.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .steering import SPEED_OF_SOUND, SteeringTable, build_steering_table

__all__ = [
    "SourceSpec",
    "ReverbSpec",
    "NoiseSpec",
    "SceneSpec",
    "RenderedScene",
    "render",
    "default_scene",
    "fractional_delay",
    "decay_tail",
]

# Padding for the frequency-domain delay; keeps the circular wrap of the
# bandlimited interpolation tails below -80 dB.
_DELAY_PAD = 4096
_TAIL_GAP_S = 0.0025


@dataclass
class SourceSpec:
    """One far-field source.

    kind: "speech_shaped" (pink noise with syllabic 4 Hz amplitude
        modulation), "pink", "white", or "wav" (requires ``wav_path``).
    azimuth_schedule: list of (start_s, azimuth_deg); times strictly
        increasing, first entry at 0.
    """

    kind: str = "speech_shaped"
    azimuth_schedule: tuple = ((0.0, 0.0),)
    distance_m: float = 1.5
    level_db: float = 0.0
    wav_path: str = ""

    def azimuths(self):
        return [float(az) for _, az in self.azimuth_schedule]


@dataclass
class ReverbSpec:
    """Exponential-tail reverberation parameters.

    direct_to_reverb_db sets the tail level at 1 m; a source at distance d
    sees it reduced by 20 log10(d) (the direct path falls off, the diffuse
    tail does not).
    """

    rt60_s: float = 0.3
    reflection_density: float = 1.0
    direct_to_reverb_db: float = 6.0


@dataclass
class NoiseSpec:
    """Diffuse noise as a sum of decorrelated plane waves."""

    level_db: float = -5.0
    n_plane_waves: int = 8
    seed: int | None = None


@dataclass
class SceneSpec:
    """Complete scene description; see module docstring for level semantics."""

    mic_positions: tuple = (
        (0.05, 0.05), (-0.05, 0.05), (-0.05, -0.05), (0.05, -0.05))
    sources: tuple = field(default_factory=tuple)
    noise: NoiseSpec | None = None
    reverb: ReverbSpec = field(default_factory=ReverbSpec)
    duration_s: float = 10.0
    sample_rate: int = 16000
    ref_mic: int = 0
    steering_grid_deg: float = 5.0
    steering_fft_size: int = 1024

    def validate(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 2:
            raise ValueError("need at least 2 microphone positions")
        if not (0 <= self.ref_mic < pos.shape[0]):
            raise ValueError("ref_mic out of range")
        for src in self.sources:
            times = [t for t, _ in src.azimuth_schedule]
            if not times or times[0] != 0.0:
                raise ValueError("azimuth schedule must start at 0.0 s")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("azimuth schedule times must increase")
            if not math.isfinite(src.level_db):
                raise ValueError("source level must be finite")
        if self.noise is not None and not math.isfinite(self.noise.level_db):
            raise ValueError("noise level must be finite")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")

    @property
    def n_chan(self):
        return len(self.mic_positions)

    def steering_azimuths(self):
        grid = np.arange(0.0, 360.0, self.steering_grid_deg)
        extra = [az for src in self.sources for az in src.azimuths()]
        return np.union1d(grid, np.asarray(extra) % 360.0)

    def move_times(self):
        """Times (s) at which any source relocates."""
        times = sorted({t for src in self.sources
                        for t, _ in src.azimuth_schedule[1:]})
        return times

    def to_dict(self):
        return {
            "duration": self.duration_s,
            "sample_rate": self.sample_rate,
            "ref_mic": self.ref_mic,
            "steering_grid_deg": self.steering_grid_deg,
            "steering_fft_size": self.steering_fft_size,
            "array": {"positions": [list(p) for p in self.mic_positions]},
            "reverb": {
                "rt60": self.reverb.rt60_s,
                "reflection_density": self.reverb.reflection_density,
                "direct_to_reverb_db": self.reverb.direct_to_reverb_db,
            },
            "noise": None if self.noise is None else {
                "level_db": self.noise.level_db,
                "n_plane_waves": self.noise.n_plane_waves,
                "seed": self.noise.seed,
            },
            "sources": [{
                "kind": s.kind,
                "azimuth_schedule": [list(x) for x in s.azimuth_schedule],
                "distance": s.distance_m,
                "level_db": s.level_db,
                "wav_path": s.wav_path,
            } for s in self.sources],
        }

    @classmethod
    def from_dict(cls, d):
        reverb = d.get("reverb", {})
        noise = d.get("noise")
        spec = cls(
            mic_positions=tuple(tuple(p) for p in d["array"]["positions"]),
            sources=tuple(
                SourceSpec(
                    kind=s.get("kind", "speech_shaped"),
                    azimuth_schedule=tuple(tuple(x)
                                           for x in s["azimuth_schedule"]),
                    distance_m=float(s.get("distance", 1.5)),
                    level_db=float(s.get("level_db", 0.0)),
                    wav_path=s.get("wav_path", ""),
                ) for s in d.get("sources", [])),
            noise=None if noise is None else NoiseSpec(
                level_db=float(noise.get("level_db", -5.0)),
                n_plane_waves=int(noise.get("n_plane_waves", 8)),
                seed=noise.get("seed"),
            ),
            reverb=ReverbSpec(
                rt60_s=float(reverb.get("rt60", 0.3)),
                reflection_density=float(reverb.get("reflection_density", 1.0)),
                direct_to_reverb_db=float(
                    reverb.get("direct_to_reverb_db", 2.0)),
            ),
            duration_s=float(d.get("duration", 10.0)),
            sample_rate=int(d.get("sample_rate", 16000)),
            ref_mic=int(d.get("ref_mic", 0)),
            steering_grid_deg=float(d.get("steering_grid_deg", 5.0)),
            steering_fft_size=int(d.get("steering_fft_size", 1024)),
        )
        spec.validate()
        return spec


@dataclass
class RenderedScene:
    """Rendered audio plus the ground truth needed for scoring."""

    mixture: np.ndarray               # [n, M]
    references: np.ndarray            # [S, n], per-source image at ref mic
    steering: SteeringTable
    spec: SceneSpec
    seed: int
    images: np.ndarray | None = None  # [S, n, M]
    noise: np.ndarray | None = None   # [n, M]

    @property
    def sample_rate(self):
        return self.spec.sample_rate


def fractional_delay(x, delay_samples, out_len):
    """Delay ``x`` by a (fractional) number of samples, exactly.

    Bandlimited: implemented as a linear phase ramp on a zero-padded FFT;
    the pad keeps the circular wrap of the interpolation tails negligible.
    """
    n = len(x) + int(np.ceil(abs(delay_samples))) + _DELAY_PAD
    spec = np.fft.rfft(x, n=n)
    w = 2.0 * np.pi * np.arange(len(spec)) / n
    ramp = np.exp(-1j * w * delay_samples)
    if n % 2 == 0:
        # Real output: only the cosine component of the Nyquist bin is
        # representable under a fractional shift.
        ramp[-1] = np.cos(np.pi * delay_samples)
    shifted = np.fft.irfft(spec * ramp, n=n)
    if out_len <= n:
        return shifted[:out_len]
    return np.concatenate([shifted, np.zeros(out_len - n)])


def decay_tail(rng, rt60_s, sample_rate, density=1.0, energy=1.0):
    """Exponentially decaying noise tail whose Schroeder curve matches rt60.

    Args:
        density: fraction of taps carrying a reflection, in (0, 1].
        energy: total tail energy after scaling.
    """
    n = max(1, int(round(1.2 * rt60_s * sample_rate)))
    amp_rate = 3.0 * np.log(10.0) / rt60_s
    t = np.arange(n) / sample_rate
    tail = rng.standard_normal(n) * np.exp(-amp_rate * t)
    if density < 1.0:
        tail = tail * (rng.random(n) < density)
    e = float(np.sum(tail ** 2))
    if e > 0.0:
        tail = tail * np.sqrt(energy / e)
    return tail


def _pink_noise(rng, n, sample_rate):
    """1/f-shaped noise, flat below 50 Hz, unit RMS."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec = spec / np.sqrt(np.maximum(freqs, 50.0))
    spec[0] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / max(np.sqrt(np.mean(x ** 2)), 1e-30)


def _smooth_envelope(rng, n, sample_rate, rate_hz, depth):
    """Random syllabic-rate on/off envelope in [1 - depth, 1]."""
    n_ctrl = max(2, int(np.ceil(n / sample_rate * rate_hz)) + 1)
    ctrl = rng.random(n_ctrl) ** 2.0
    t = np.linspace(0.0, n_ctrl - 1.0, n)
    env = np.interp(t, np.arange(n_ctrl), ctrl)
    return (1.0 - depth) + depth * env


def _source_signal(src, n, sample_rate, rng):
    if src.kind == "speech_shaped":
        # Pink noise split into bands, each gated by its own syllabic-rate
        # envelope: gives the time-frequency sparsity real speech has,
        # which any masking or separation method depends on.
        n_bands = 8
        edges = np.geomspace(80.0, sample_rate / 2.0, n_bands + 1)
        spec = np.fft.rfft(_pink_noise(rng, n, sample_rate))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        x = np.zeros(n)
        for b in range(n_bands):
            band = spec * ((freqs >= edges[b]) & (freqs < edges[b + 1]))
            env = _smooth_envelope(rng, n, sample_rate, 4.0, depth=0.97)
            x += np.fft.irfft(band, n=n) * env
        # Utterance-scale pauses on top of the per-band gating.
        x *= _smooth_envelope(rng, n, sample_rate, 0.8, depth=0.9)
        return x / max(np.sqrt(np.mean(x ** 2)), 1e-30)
    if src.kind == "pink":
        return _pink_noise(rng, n, sample_rate)
    if src.kind == "white":
        return rng.standard_normal(n)
    if src.kind == "wav":
        from scipy.io import wavfile
        rate, raw = wavfile.read(src.wav_path)
        if rate != sample_rate:
            raise ValueError(
                f"{src.wav_path}: sample rate {rate} != scene {sample_rate}")
        data = np.asarray(raw, dtype=np.float64)
        if np.issubdtype(raw.dtype, np.integer):
            data = data / float(np.iinfo(raw.dtype).max)
        if data.ndim == 2:
            data = data[:, 0]
        if len(data) < n:
            data = np.tile(data, int(np.ceil(n / len(data))))
        return data[:n]
    raise ValueError(f"unknown source kind {src.kind!r}")


def _render_source(src, signal, spec, rng, n):
    """Image [n, M] of one source through its schedule of positions."""
    sr = spec.sample_rate
    pos = np.asarray(spec.mic_positions, dtype=np.float64)
    n_chan = pos.shape[0]
    image = np.zeros((n, n_chan))
    schedule = list(src.azimuth_schedule) + [(spec.duration_s, None)]
    gap = int(round(_TAIL_GAP_S * sr))

    for (t0, az), (t1, _) in zip(schedule[:-1], schedule[1:]):
        i0, i1 = int(round(t0 * sr)), min(int(round(t1 * sr)), n)
        if i1 <= i0:
            continue
        seg = signal[i0:i1]
        u = np.array([np.cos(np.deg2rad(az)), np.sin(np.deg2rad(az))])
        gain = 1.0 / max(src.distance_m, 0.1)
        tails = None
        if spec.reverb.rt60_s > 0.0:
            # Tail referenced to the 1 m direct level: farther sources are
            # relatively more reverberant.
            tail_energy = 10.0 ** (-spec.reverb.direct_to_reverb_db / 10.0)
            tails = [decay_tail(rng, spec.reverb.rt60_s, sr,
                                spec.reverb.reflection_density, tail_energy)
                     for _ in range(n_chan)]
            reverb = [fftconvolve(seg, tail) for tail in tails]
        for m in range(n_chan):
            tau = (src.distance_m - float(u @ pos[m, :2])) / SPEED_OF_SOUND
            d_samp = tau * sr
            room = max(0, n - i0)
            direct = gain * fractional_delay(seg, d_samp, room)
            image[i0:i0 + len(direct), m] += direct
            if tails is not None:
                off = i0 + int(round(d_samp)) + gap
                r = reverb[m][:max(0, n - off)]
                image[off:off + len(r), m] += r
    return image


def _render_noise(spec, rng, n):
    """Diffuse field from decorrelated plane waves, [n, M]."""
    sr = spec.sample_rate
    pos = np.asarray(spec.mic_positions, dtype=np.float64)
    n_chan = pos.shape[0]
    waves = max(8, spec.noise.n_plane_waves)
    out = np.zeros((n, n_chan))
    for p in range(waves):
        az = (p + 0.5) * 360.0 / waves
        u = np.array([np.cos(np.deg2rad(az)), np.sin(np.deg2rad(az))])
        sig = _pink_noise(rng, n, sr)
        for m in range(n_chan):
            tau = -float(u @ pos[m, :2]) / SPEED_OF_SOUND
            # Keep delays causal across the array.
            d_samp = (tau + 0.01) * sr
            out[:, m] += fractional_delay(sig, d_samp, n)
    return out


def render(spec: SceneSpec, seed=0):
    """Render a scene deterministically.

    Returns:
        RenderedScene; ``mixture`` is exactly ``images.sum(0) + noise``.
    """
    spec.validate()
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    root = np.random.SeedSequence(seed)
    src_seeds = root.spawn(len(spec.sources) + 1)

    n_chan = spec.n_chan
    images = np.zeros((len(spec.sources), n, n_chan))
    for s, src in enumerate(spec.sources):
        rng = np.random.default_rng(src_seeds[s])
        signal = _source_signal(src, n, sr, rng)
        img = _render_source(src, signal, spec, rng, n)
        rms = np.sqrt(np.mean(img[:, spec.ref_mic] ** 2))
        if rms > 0.0:
            img *= 10.0 ** (src.level_db / 20.0) / rms
        images[s] = img

    noise = np.zeros((n, n_chan))
    if spec.noise is not None:
        noise_seed = (spec.noise.seed if spec.noise.seed is not None
                      else src_seeds[-1])
        rng = np.random.default_rng(noise_seed)
        noise = _render_noise(spec, rng, n)
        rms = np.sqrt(np.mean(noise[:, spec.ref_mic] ** 2))
        if rms > 0.0:
            noise *= 10.0 ** (spec.noise.level_db / 20.0) / rms

    mixture = images.sum(axis=0) + noise
    steering = build_steering_table(
        spec.mic_positions, spec.steering_azimuths(), spec.steering_fft_size,
        sr)
    return RenderedScene(
        mixture=mixture,
        references=np.ascontiguousarray(images[:, :, spec.ref_mic]),
        steering=steering,
        spec=spec,
        seed=seed,
        images=images,
        noise=noise,
    )


def default_scene(duration_s=60.0, move_period_s=8.0):
    """The benchmark scene: static target at 0 degrees, an interferer that
    relocates among four azimuths on a fixed period, diffuse noise 5 dB
    below the target."""
    moves = [45.0, 180.0, 270.0, 315.0]
    schedule = [(0.0, 90.0)]
    t = move_period_s
    k = 0
    while t < duration_s:
        schedule.append((t, moves[k % len(moves)]))
        t += move_period_s
        k += 1
    return SceneSpec(
        sources=(
            SourceSpec(kind="speech_shaped", azimuth_schedule=((0.0, 0.0),),
                       distance_m=1.0, level_db=0.0),
            SourceSpec(kind="speech_shaped",
                       azimuth_schedule=tuple(schedule),
                       distance_m=2.0, level_db=0.0),
        ),
        noise=NoiseSpec(level_db=-5.0, n_plane_waves=8),
        reverb=ReverbSpec(rt60_s=0.3, reflection_density=1.0,
                          direct_to_reverb_db=2.0),
        duration_s=duration_s,
    )
