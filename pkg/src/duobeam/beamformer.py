"""Front-end source statistics and MVDR beamforming.

Per frame, the posterior snapshot turns the observed outer product into a
source covariance and its interference complement:

    Gamma = W x x^H W^H + Sigma        (source)
    Upsilon = x x^H - Gamma            (everything else)

Per front-end block these are smoothed by EMAs and converted into weights

    w = tr(Upsilon^-1 Gamma)^-1 Upsilon^-1 Gamma u_ref

which are then applied to every frame of the block.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import SingularMatrix, herm_solve, hermitianize, outer, trace

__all__ = [
    "DegenerateStatistics",
    "BeamformerConfig",
    "BeamformerState",
    "frame_moments",
    "accumulate_block",
    "mvdr_weights",
    "apply_weights",
]

_TRACE_GUARD = 1e-12


class DegenerateStatistics(RuntimeError):
    """The statistics carry no usable signal (silence)."""


@dataclass
class BeamformerConfig:
    """Smoothing and referencing for the front-end statistics.

    alpha: EMA weight of a new block (1 on the first block regardless).
    block_frames: frames per weight refresh.
    ref_mic: distortionless reference channel.
    loading: relative diagonal loading applied before inverting Upsilon.
    """

    alpha: float = 0.020
    block_frames: int = 2
    ref_mic: int = 0
    loading: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.block_frames < 1:
            raise ValueError("block_frames must be >= 1")
        if self.loading < 0.0:
            raise ValueError("loading must be nonnegative")


def frame_moments(x_FM, wiener_FMM, cov_FMM):
    """Raw second-order moments of one frame under the posterior snapshot.

    Args:
        x_FM: dereverberated mixture frame(s), [..., M].
        wiener_FMM, cov_FMM: the snapshot entries of one source, [..., M, M].

    Returns:
        (Gamma, Upsilon), both [..., M, M]; their sum is exactly x x^H.
    """
    xx = outer(x_FM)
    wx = np.einsum("...ij,...j->...i", wiener_FMM, x_FM)
    gamma = hermitianize(outer(wx) + cov_FMM)
    return gamma, xx - gamma


def accumulate_block(gammas_TFMM, upsilons_TFMM, state, alpha=None):
    """Fold one block of frame moments into the state's EMAs.

    The first accumulated block ignores history (weight forced to 1).
    ``state.block_index`` counts accumulated blocks, 1-based after the call.
    """
    g = np.asarray(gammas_TFMM)
    u = np.asarray(upsilons_TFMM)
    if alpha is None:
        alpha = state.cfg.alpha
    g_mean = g.mean(axis=0)
    u_mean = u.mean(axis=0)
    if state.block_index == 0:
        state.Gamma_FMM = hermitianize(g_mean)
        state.Upsilon_FMM = hermitianize(u_mean)
    else:
        state.Gamma_FMM = hermitianize(
            alpha * g_mean + (1.0 - alpha) * state.Gamma_FMM)
        state.Upsilon_FMM = hermitianize(
            alpha * u_mean + (1.0 - alpha) * state.Upsilon_FMM)
    state.block_index += 1
    return state


def _mvdr_core(Gamma, Upsilon, ref_mic, loading):
    """Weights plus a validity mask marking bins with usable statistics."""
    Gamma = np.asarray(Gamma, dtype=np.complex128)
    Upsilon = np.asarray(Upsilon, dtype=np.complex128)
    n_chan = Gamma.shape[-1]

    diag_u = np.mean(np.abs(np.einsum("...ii->...i", Upsilon)), axis=-1)
    diag_g = np.mean(np.abs(np.einsum("...ii->...i", Gamma)), axis=-1)
    # Zero Upsilon diagonals take their scale from Gamma, which yields the
    # loading-independent limit w = Gamma u / tr(Gamma); fully dead bins get
    # unit loading so the batched solve stays well posed and is masked out
    # through the trace guard below.
    load = loading * np.where(diag_u > 0.0, diag_u, diag_g)
    load = np.where(load > 0.0, load, 1.0)
    eye = np.eye(n_chan, dtype=np.complex128)
    ratio = herm_solve(Upsilon + load[..., None, None] * eye, Gamma)

    tr = trace(ratio)
    valid = np.abs(tr) >= _TRACE_GUARD
    safe_tr = np.where(valid, tr, 1.0)
    w = ratio[..., :, ref_mic] / safe_tr[..., None]
    return w, valid


def mvdr_weights(Gamma, Upsilon, ref_mic, loading=1e-6):
    """Distortionless weights from source and interference covariances.

    Args:
        Gamma, Upsilon: Hermitian [..., M, M].
        ref_mic: reference channel index.
        loading: relative diagonal loading for the Upsilon inverse; when the
            Upsilon diagonal is exactly zero, the loading falls back to the
            Gamma diagonal so the limit w = Gamma u / tr(Gamma) is returned.

    Returns:
        w with shape [..., M].

    Raises:
        DegenerateStatistics: tr(Upsilon^-1 Gamma) below 1e-12 (on every
            matrix of a batch); the caller keeps its previous weights.
            Batched callers that need per-bin retention should go through
            ``BeamformerState.refresh_weights``.
    """
    w, valid = _mvdr_core(Gamma, Upsilon, ref_mic, loading)
    if not np.any(valid):
        raise DegenerateStatistics("tr(Upsilon^-1 Gamma) below guard")
    return w


def apply_weights(w_FM, x_FM):
    """Beamformer output w^H x per frequency."""
    return np.einsum("...m,...m->...", np.conj(w_FM), x_FM)


class BeamformerState:
    """Per-frequency EMAs and current weights for one source.

    Owned and mutated by the front-end context only; weights start at the
    reference-channel selector so the output is a pass-through until the
    first usable refresh.
    """

    def __init__(self, cfg: BeamformerConfig, n_bins: int, n_chan: int):
        self.cfg = cfg
        self.n_bins = n_bins
        self.n_chan = n_chan
        self.Gamma_FMM = np.zeros((n_bins, n_chan, n_chan), dtype=np.complex128)
        self.Upsilon_FMM = np.zeros((n_bins, n_chan, n_chan), dtype=np.complex128)
        self.w_FM = np.zeros((n_bins, n_chan), dtype=np.complex128)
        self.w_FM[:, cfg.ref_mic] = 1.0
        self.block_index = 0
        self.degenerate_bins = 0

    def refresh_weights(self):
        """Recompute weights from the current EMAs.

        Bins whose statistics are degenerate keep their previous weights;
        their count is kept in ``degenerate_bins``.
        """
        cfg = self.cfg
        try:
            w_new, valid = _mvdr_core(self.Gamma_FMM, self.Upsilon_FMM,
                                      cfg.ref_mic, cfg.loading)
        except SingularMatrix:
            self.degenerate_bins = self.n_bins
            return self.w_FM
        valid &= np.all(np.isfinite(w_new), axis=-1)
        self.degenerate_bins = int(np.sum(~valid))
        self.w_FM = np.where(valid[:, None], w_new, self.w_FM)
        return self.w_FM
