"""Dereverberation by multichannel linear prediction, in two regimes.

``offline_wpe`` alternates power estimation and filter re-estimation over a
whole block.  ``OnlineWpe`` is the per-frame recursion: the delayed-frame
correlation matrix and cross-correlation are tracked as exponential moving
averages with weight ``alpha`` on the new frame, and the inverse correlation
matrix is propagated directly through a rank-one (Sherman-Morrison) update,
so no matrix inversion happens in the frame path.

With this EMA convention ``alpha`` weights the new data, matching the other
smoothing constants in the package (larger alpha = faster, shorter memory).
"""

from dataclasses import dataclass

import numpy as np

from .linalg import herm_solve, hermitianize

__all__ = [
    "BlockTooShort",
    "NumericalDivergence",
    "WpeConfig",
    "OnlineWpe",
    "offline_wpe",
]

_DIVERGENCE_LIMIT = 1e12
_POWER_GUARD = 1e-12


class BlockTooShort(ValueError):
    """Block has fewer frames than delay + taps."""


class NumericalDivergence(RuntimeError):
    """The tracked inverse correlation matrix blew up.

    The offending per-frequency states have already been reset to their
    initial values when this is raised.  ``frame`` carries a safe output
    for the current step (pass-through on the reset bins) and
    ``reset_bins`` the indices of the frequencies that were reset.
    """

    def __init__(self, message, frame=None, reset_bins=None):
        super().__init__(message)
        self.frame = frame
        self.reset_bins = reset_bins


@dataclass
class WpeConfig:
    """Prediction-filter parameters.

    taps: filter length K per channel.
    delay: prediction delay in frames.
    iterations: power/filter alternations (offline regime only).
    alpha: EMA weight of the new frame (online regime only).
    """

    taps: int = 5
    delay: int = 3
    iterations: int = 3
    alpha: float = 0.005

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1:
            raise ValueError("taps and delay must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


class OnlineWpe:
    """Per-frame recursive dereverberation, vectorized over frequencies.

    State per frequency f: inverse EMA correlation Rinv [MK x MK], filter
    H [MK x M], the last delay+taps-1 mixture frames, and the per-frame
    powers needed for the normalization term.  Strictly causal: the output
    at frame t depends on frames <= t only.

    Single-owner object; distinct frequencies are independent by
    construction so one vectorized update touches no shared state.
    """

    def __init__(self, cfg: WpeConfig, n_bins: int, n_chan: int):
        self.cfg = cfg
        self.n_bins = n_bins
        self.n_chan = n_chan
        self.filter_dim = n_chan * cfg.taps
        self._history = cfg.delay + cfg.taps - 1
        # Workspaces are allocated once here; the step path only rebinds
        # these arrays.
        self.Rinv_Fkk = np.zeros((n_bins, self.filter_dim, self.filter_dim),
                                 dtype=np.complex128)
        self._rank1_Fkk = np.zeros_like(self.Rinv_Fkk)
        self.filt_FkM = np.zeros((n_bins, self.filter_dim, n_chan),
                                 dtype=np.complex128)
        self._frames_DFM = np.zeros((self._history, n_bins, n_chan),
                                    dtype=np.complex128)
        self._power_DF = np.zeros((cfg.delay, n_bins))
        self._mean_power_F = np.zeros(n_bins)
        self.steps = 0
        self._reset_matrices(np.arange(n_bins))

    def _reset_matrices(self, bins):
        self.Rinv_Fkk[bins] = np.eye(self.filter_dim, dtype=np.complex128)
        self.filt_FkM[bins] = 0.0

    def reset(self):
        """Back to the initial state (identity Rinv, zero filter)."""
        self._reset_matrices(np.arange(self.n_bins))
        self._frames_DFM[:] = 0.0
        self._power_DF[:] = 0.0
        self._mean_power_F[:] = 0.0
        self.steps = 0

    def _delayed_stack(self):
        """Stack of the taps delayed frames, newest first: [F, MK].

        The history ring holds frames t-1 .. t-(delay+taps-1), newest at
        index 0; the prediction context is its last ``taps`` entries,
        frames t-delay .. t-delay-taps+1.
        """
        frames = self._frames_DFM[self.cfg.delay - 1:]
        return np.moveaxis(frames, 0, 1).reshape(self.n_bins, self.filter_dim)

    def step(self, X_FM):
        """Advance one frame.

        Args:
            X_FM: mixture frame, [F, M] complex (F may be 1 for a single
                frequency).

        Returns:
            Dereverberated frame [F, M].

        Raises:
            NumericalDivergence: see class docstring; the exception carries
                a usable output frame.
        """
        x = np.asarray(X_FM, dtype=np.complex128)
        if x.shape != (self.n_bins, self.n_chan):
            raise ValueError(f"expected frame of shape {(self.n_bins, self.n_chan)}")
        cfg = self.cfg

        # Per-frame mean power enters the normalization window immediately
        # (the window covers the current frame and the delay-1 before it).
        p_F = np.mean(np.abs(x) ** 2, axis=1)
        self._power_DF = np.roll(self._power_DF, 1, axis=0)
        self._power_DF[0] = p_F

        if self.steps < self._history:
            # No complete delayed context yet: pass through, keep filters.
            self._push_frame(x, p_F)
            return x.copy()

        phi_F = np.mean(self._power_DF, axis=0)
        tilde_Fk = self._delayed_stack()

        alpha = cfg.alpha
        Rx_Fk = np.einsum("fij,fj->fi", self.Rinv_Fkk, tilde_Fk)
        quad_F = np.real(np.einsum("fi,fi->f", np.conj(tilde_Fk), Rx_Fk))
        denom_F = (1.0 - alpha) * phi_F + alpha * quad_F

        update_F = phi_F > _POWER_GUARD * self._mean_power_F
        all_update = bool(np.all(update_F))
        safe_denom = denom_F if all_update else np.where(update_F, denom_F, 1.0)
        gain_Fk = (alpha / safe_denom)[:, None] * Rx_Fk
        if not all_update:
            gain_Fk[~update_F] = 0.0

        pred_err_FM = x - np.einsum("fkm,fk->fm", np.conj(self.filt_FkM), tilde_Fk)

        if all_update:
            # Fast path: update the state in place; the rank-one update
            # preserves Hermitian symmetry analytically, so it is enforced
            # only periodically to cap rounding drift (one ulp per step).
            np.einsum("fi,fj->fij", gain_Fk, np.conj(Rx_Fk),
                      out=self._rank1_Fkk)
            np.subtract(self.Rinv_Fkk, self._rank1_Fkk, out=self.Rinv_Fkk)
            if alpha < 1.0:
                self.Rinv_Fkk *= 1.0 / (1.0 - alpha)
            self.filt_FkM += np.einsum("fk,fm->fkm", gain_Fk,
                                       np.conj(pred_err_FM))
            if self.steps % 64 == 0:
                self.Rinv_Fkk = hermitianize(self.Rinv_Fkk)
            out_FM = x - np.einsum("fkm,fk->fm", np.conj(self.filt_FkM),
                                   tilde_Fk)
        else:
            new_Rinv = (self.Rinv_Fkk
                        - np.einsum("fi,fj->fij", gain_Fk, np.conj(Rx_Fk)))
            if alpha < 1.0:
                new_Rinv = new_Rinv / (1.0 - alpha)
            new_filt = self.filt_FkM + np.einsum(
                "fk,fm->fkm", gain_Fk, np.conj(pred_err_FM))
            upd = update_F[:, None, None]
            self.Rinv_Fkk = np.where(upd, hermitianize(new_Rinv),
                                     self.Rinv_Fkk)
            self.filt_FkM = np.where(upd, new_filt, self.filt_FkM)
            # Frequencies under the power guard pass through untouched.
            out_FM = np.where(
                update_F[:, None],
                x - np.einsum("fkm,fk->fm", np.conj(self.filt_FkM), tilde_Fk),
                x)

        # Rinv is Hermitian positive definite, so its largest magnitude
        # entry sits on the diagonal; scanning it is enough.
        diag_F = np.real(np.einsum("fii->fi", self.Rinv_Fkk))
        bad_F = np.max(diag_F, axis=1) > _DIVERGENCE_LIMIT
        self._push_frame(x, p_F)
        if np.any(bad_F):
            bins = np.nonzero(bad_F)[0]
            self._reset_matrices(bins)
            out_FM[bins] = x[bins]
            raise NumericalDivergence(
                f"inverse correlation diverged on {len(bins)} bins",
                frame=out_FM, reset_bins=bins)
        return out_FM

    def _push_frame(self, x, p_F):
        self._frames_DFM = np.roll(self._frames_DFM, 1, axis=0)
        self._frames_DFM[0] = x
        self.steps += 1
        self._mean_power_F += (p_F - self._mean_power_F) / self.steps


def _delayed_view(X_FTM, taps, delay):
    """[F, MK, T] stacks of delayed frames, zero-padded at the start.

    Row block k of the stack holds frame t - delay - k, so the stack at
    time t covers frames t-delay-taps+1 .. t-delay (newest first).
    """
    F, T, M = X_FTM.shape
    out = np.zeros((F, taps * M, T), dtype=np.complex128)
    for k in range(taps):
        lag = delay + k
        if lag < T:
            out[:, k * M:(k + 1) * M, lag:] = np.moveaxis(
                X_FTM[:, :T - lag, :], 1, 2)
    return out


def offline_wpe(X_FTM, cfg: WpeConfig):
    """Block-offline iterative dereverberation.

    Args:
        X_FTM: mixture block [F, T, M] with T >= delay + taps.
        cfg: filter parameters; ``cfg.iterations`` power/filter rounds.

    Returns:
        Dereverberated block of the same shape.
    """
    X = np.asarray(X_FTM, dtype=np.complex128)
    if X.ndim != 3:
        raise ValueError("expected [F, T, M] block")
    F, T, M = X.shape
    if T < cfg.delay + cfg.taps:
        raise BlockTooShort(f"need at least {cfg.delay + cfg.taps} frames, got {T}")

    block_power = float(np.mean(np.abs(X) ** 2))
    if not np.isfinite(block_power):
        raise ValueError("block contains non-finite samples")
    if block_power == 0.0:
        return X.copy()
    floor = 1e-10 * block_power

    tilde_FkT = _delayed_view(X, cfg.taps, cfg.delay)
    est = X
    for _ in range(cfg.iterations):
        psd_FT = np.maximum(np.mean(np.abs(est) ** 2, axis=2), floor)
        weighted = tilde_FkT / psd_FT[:, None, :]
        R_Fkk = hermitianize(
            weighted @ np.conj(np.swapaxes(tilde_FkT, 1, 2)))
        P_FkM = weighted @ np.conj(X)
        G_FkM = herm_solve(R_Fkk, P_FkM, loading=1e-6)
        est = X - np.einsum("fkm,fkt->ftm", np.conj(G_FkM), tilde_FkT)
    return est
