"""Far-field steering vectors and their on-disk table format.

A steering vector d_FM holds, per frequency bin and microphone, the relative
phase a plane wave from a given azimuth produces across the array:

    d_m(f) = exp(+j * 2 pi f_hz * (u . p_m) / c)

with u the unit vector pointing from the array origin toward the source and
p_m the microphone position in meters.  Azimuth 0 degrees points along +x,
90 degrees along +y; entries have unit magnitude.

File format (extension .stbl), little-endian throughout:

    offset  type        content
    0       8 bytes     magic b"DBSTEER1"
    8       uint32      A, number of azimuths
    12      uint32      F, number of frequency bins
    16      uint32      M, number of microphones
    20      uint32      fft_size
    24      float64     sample_rate in Hz
    32      float64[A]  azimuths in degrees, ascending
    ...     float64[A*F*M*2]  vectors as (re, im) pairs, azimuth-major,
                              then frequency, then microphone

All floats are IEEE-754 doubles.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SPEED_OF_SOUND",
    "SteeringTable",
    "far_field_steering",
    "build_steering_table",
]

SPEED_OF_SOUND = 343.0

_MAGIC = b"DBSTEER1"


def far_field_steering(positions_M2, azimuth_deg, n_bins, fft_size,
                       sample_rate, c=SPEED_OF_SOUND):
    """Plane-wave steering vector, [F, M] complex with |entries| = 1."""
    pos = np.atleast_2d(np.asarray(positions_M2, dtype=np.float64))
    az = np.deg2rad(azimuth_deg)
    u = np.array([np.cos(az), np.sin(az)])
    proj_M = pos[:, :2] @ u
    freqs_F = np.arange(n_bins) * (sample_rate / fft_size)
    return np.exp(2j * np.pi * freqs_F[:, None] * proj_M[None, :] / c)


@dataclass
class SteeringTable:
    """Steering vectors on a grid of azimuths."""

    azimuths_deg: np.ndarray          # [A], ascending
    vectors_AFM: np.ndarray           # [A, F, M] complex
    sample_rate: float
    fft_size: int

    @property
    def n_bins(self):
        return self.vectors_AFM.shape[1]

    @property
    def n_chan(self):
        return self.vectors_AFM.shape[2]

    def vector(self, azimuth_deg):
        """Steering vector [F, M] for the nearest tabulated azimuth
        (circular distance)."""
        diff = np.abs((self.azimuths_deg - azimuth_deg + 180.0) % 360.0 - 180.0)
        return self.vectors_AFM[int(np.argmin(diff))]

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            header = np.array([len(self.azimuths_deg), self.n_bins,
                               self.n_chan, self.fft_size], dtype="<u4")
            fh.write(header.tobytes())
            fh.write(np.float64(self.sample_rate).astype("<f8").tobytes())
            fh.write(self.azimuths_deg.astype("<f8").tobytes())
            inter = np.empty(self.vectors_AFM.shape + (2,), dtype="<f8")
            inter[..., 0] = self.vectors_AFM.real
            inter[..., 1] = self.vectors_AFM.imag
            fh.write(inter.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"{path}: not a steering table (bad magic)")
            a, f, m, fft_size = np.frombuffer(fh.read(16), dtype="<u4")
            sample_rate = float(np.frombuffer(fh.read(8), dtype="<f8")[0])
            az = np.frombuffer(fh.read(8 * int(a)), dtype="<f8").copy()
            raw = np.frombuffer(fh.read(), dtype="<f8")
        expected = int(a) * int(f) * int(m) * 2
        if raw.size != expected:
            raise ValueError(f"{path}: truncated steering table")
        inter = raw.reshape(int(a), int(f), int(m), 2)
        vec = inter[..., 0] + 1j * inter[..., 1]
        return cls(az, np.ascontiguousarray(vec), sample_rate, int(fft_size))


def build_steering_table(positions_M2, azimuths_deg, fft_size, sample_rate,
                         c=SPEED_OF_SOUND):
    """Tabulate far-field vectors for a set of azimuths."""
    az = np.unique(np.asarray(azimuths_deg, dtype=np.float64) % 360.0)
    n_bins = fft_size // 2 + 1
    vecs = np.stack([
        far_field_steering(positions_M2, a, n_bins, fft_size, sample_rate, c)
        for a in az])
    return SteeringTable(az, vecs, float(sample_rate), int(fft_size))
