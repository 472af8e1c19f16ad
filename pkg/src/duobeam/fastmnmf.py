"""Blind source separation with a jointly-diagonalizable spatial model.

Each source image is modeled per time-frequency bin as zero-mean complex
Gaussian with covariance lambda_nft * G_nf, where the spatial matrices of
all sources share one diagonalizer per frequency:

    G_nf = Qinv_f Diag(g_n) Qinv_f^H.

The power spectra factor through NMF, lambda_nft = sum_c u_ncf v_nct.
Fitting alternates multiplicative updates for U, V, G with iterative
projection for the rows of Q; the spatial gains are frequency-shared during
warm-up sweeps and per-frequency afterwards.

What the front end consumes is not the separated signals but the posterior
of each source image given the mixture: the Wiener matrix W_nft and the
posterior covariance Sigma_nft, averaged per block and smoothed across
blocks into a PosteriorSnapshot.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .linalg import hermitianize

__all__ = [
    "SingularInitialization",
    "LikelihoodDiverged",
    "FastMnmfModel",
    "PosteriorSnapshot",
    "init_model",
    "fit",
    "log_likelihood",
    "posterior",
    "posterior_block_mean",
    "separate_target",
    "publish_snapshot",
    "roll_activations",
]

_PARAM_FLOOR = 1e-10


class SingularInitialization(RuntimeError):
    """Assembled diagonalizer is rank-deficient even after perturbation."""


class LikelihoodDiverged(RuntimeError):
    """Non-finite parameters or likelihood during fitting."""


@dataclass
class FastMnmfModel:
    """Separation model parameters.

    Q_FMM / Qinv_FMM: per-frequency diagonalizers and cached inverses.
    U_NCF, V_NCT: nonnegative NMF spectra and activations.
    G: diagonal spatial gains, [N, M] while frequency-shared or [N, F, M]
       once expanded to per-frequency values.
    """

    Q_FMM: np.ndarray
    Qinv_FMM: np.ndarray
    U_NCF: np.ndarray
    V_NCT: np.ndarray
    G: np.ndarray
    target_source: int = 0

    @property
    def n_src(self):
        return self.U_NCF.shape[0]

    @property
    def n_chan(self):
        return self.Q_FMM.shape[-1]

    @property
    def n_bins(self):
        return self.Q_FMM.shape[0]

    @property
    def frequency_shared(self):
        return self.G.ndim == 2

    def gains_NFM(self):
        """Spatial gains broadcast to [N, F, M] regardless of sharing."""
        if self.frequency_shared:
            return np.broadcast_to(self.G[:, None, :],
                                   (self.n_src, self.n_bins, self.n_chan))
        return self.G

    def copy(self):
        return FastMnmfModel(
            self.Q_FMM.copy(), self.Qinv_FMM.copy(), self.U_NCF.copy(),
            self.V_NCT.copy(), self.G.copy(), self.target_source)


@dataclass(frozen=True)
class PosteriorSnapshot:
    """Smoothed block posterior statistics, the back-to-front interface.

    wiener_NFMM: EMA of the per-frame Wiener matrices.
    cov_NFMM: EMA of the per-frame posterior covariances (Hermitian).
    block_index: 1-based index of the newest contributing block.
    """

    wiener_NFMM: np.ndarray
    cov_NFMM: np.ndarray
    block_index: int
    target_source: int = 0
    timestamp: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.wiener_NFMM.setflags(write=False)
        self.cov_NFMM.setflags(write=False)


def _oblique_residual(B_FMd, e_M):
    """Residual of e after removing its projection onto the columns of B."""
    if B_FMd.shape[-1] == 0:
        return np.broadcast_to(e_M, B_FMd.shape[:-1]).astype(np.complex128).copy()
    Bh = np.conj(np.swapaxes(B_FMd, -1, -2))
    gram = Bh @ B_FMd
    rhs = Bh @ e_M.astype(np.complex128)[:, None]
    coef = np.linalg.solve(gram, rhs)
    return np.broadcast_to(e_M, B_FMd.shape[:-1]) - (B_FMd @ coef)[..., 0]


def _assemble_qinv(directed_FMD, n_chan):
    """Fill the remaining columns with canonical basis vectors,
    orthogonalized against everything placed so far."""
    F = directed_FMD.shape[0]
    B = directed_FMD
    used = set()
    eye = np.eye(n_chan)
    while B.shape[-1] < n_chan:
        best = None
        for j in range(n_chan):
            if j in used:
                continue
            r = _oblique_residual(B, eye[:, j])
            score = float(np.min(np.linalg.norm(r, axis=-1)))
            if best is None or score > best[0] + 1e-12:
                best = (score, j, r)
        score, j, r = best
        used.add(j)
        norms = np.linalg.norm(r, axis=-1, keepdims=True)
        r = r / np.maximum(norms, 1e-12)
        B = np.concatenate([B, r[..., None]], axis=-1)
    return B


def _invert_with_fallback(Qinv_FMM):
    """Invert per frequency; rank-deficient bins get a 1e-3 I perturbation."""
    n_bins, n_chan = Qinv_FMM.shape[0], Qinv_FMM.shape[-1]
    Q = np.zeros_like(Qinv_FMM)
    bad = np.zeros(n_bins, dtype=bool)
    try:
        Q = np.linalg.inv(Qinv_FMM)
        bad = ~np.all(np.isfinite(Q), axis=(1, 2))
    except np.linalg.LinAlgError:
        for f in range(n_bins):
            try:
                Q[f] = np.linalg.inv(Qinv_FMM[f])
            except np.linalg.LinAlgError:
                bad[f] = True
        bad |= ~np.all(np.isfinite(Q), axis=(1, 2))
    if np.any(bad):
        fixed = Qinv_FMM[bad] + 1e-3 * np.eye(n_chan)
        try:
            Q[bad] = np.linalg.inv(fixed)
        except np.linalg.LinAlgError as exc:
            raise SingularInitialization(str(exc)) from exc
        Qinv_FMM = Qinv_FMM.copy()
        Qinv_FMM[bad] = fixed
        if not np.all(np.isfinite(Q)):
            raise SingularInitialization("diagonalizer not invertible")
    return Q, Qinv_FMM


def init_model(n_src, n_chan, n_bins, n_comp, n_frames=0, directions=(),
               steering=None, seed=0, target_source=0):
    """Build a seeded initial model, optionally steered at known directions.

    For each directed source n (in order), column n of Qinv_f is set to the
    unit-normalized steering vector for that azimuth; the remaining columns
    are canonical basis vectors orthogonalized against the set.  U and V are
    drawn uniformly from [0.5, 1.5); the spatial gain of each source is 1 on
    its own channel and 1e-2 elsewhere.  Deterministic given the seed.

    Args:
        n_frames: block length the activations V are sized for; may be 0
            when the model is only used for posterior algebra.
        directions: azimuths in degrees, at most min(n_src, n_chan) many.
        steering: lookup with ``vector(azimuth) -> [F, M]``; required when
            directions are given.
    """
    directions = tuple(directions)
    if len(directions) > min(n_src, n_chan):
        raise ValueError("more directions than assignable sources")
    if directions and steering is None:
        raise ValueError("directions require a steering table")

    cols = []
    for az in directions:
        d_FM = np.asarray(steering.vector(az), dtype=np.complex128)
        if d_FM.shape != (n_bins, n_chan):
            raise ValueError(f"steering vector shape {d_FM.shape} does not "
                             f"match (F, M) = {(n_bins, n_chan)}")
        d_FM = d_FM / np.linalg.norm(d_FM, axis=-1, keepdims=True)
        cols.append(d_FM)
    if cols:
        directed = np.stack(cols, axis=-1)
    else:
        directed = np.zeros((n_bins, n_chan, 0), dtype=np.complex128)

    Qinv = _assemble_qinv(directed, n_chan)
    Q, Qinv = _invert_with_fallback(Qinv)

    rng = np.random.default_rng(seed)
    U = rng.uniform(0.5, 1.5, size=(n_src, n_comp, n_bins))
    V = rng.uniform(0.5, 1.5, size=(n_src, n_comp, n_frames))
    G = np.full((n_src, n_chan), 1e-2)
    for n in range(n_src):
        G[n, n % n_chan] = 1.0
    return FastMnmfModel(Q, Qinv, U, V, G, target_source)


def _lambda(model):
    # sum_c u_ncf v_nct as a batched matmul over sources.
    lam = np.matmul(model.U_NCF.transpose(0, 2, 1), model.V_NCT)
    return np.maximum(lam, _PARAM_FLOOR)


def _model_psd(lam_NFT, gains_NFM, floor):
    # sum_n lam_nft g_nfm -> [F, T, M], one dgemm per frequency.
    psd = np.matmul(lam_NFT.transpose(1, 2, 0),
                    np.ascontiguousarray(gains_NFM.transpose(1, 0, 2)))
    return np.maximum(psd, floor)


def log_likelihood(model, X_FTM):
    """Gaussian log-likelihood of a block (additive constants dropped)."""
    X = np.asarray(X_FTM, dtype=np.complex128)
    T = X.shape[1]
    y = np.matmul(X, np.swapaxes(model.Q_FMM, 1, 2))
    p = np.abs(y) ** 2
    floor = _PARAM_FLOOR * max(float(np.mean(p)), np.finfo(np.float64).tiny)
    yhat = _model_psd(_lambda(model), model.gains_NFM(), floor)
    _, logdet = np.linalg.slogdet(model.Q_FMM)
    return float(-np.sum(p / yhat) - np.sum(np.log(yhat))
                 + 2.0 * T * np.sum(logdet))


def fit(model, X_FTM, total_iters=50, warmup_iters=40):
    """Fit the model to a dereverberated block, in place.

    Runs ``total_iters`` sweeps of multiplicative updates for U, V, G and
    iterative projection for Q.  A model still carrying frequency-shared
    gains does the first ``warmup_iters`` sweeps in that form, then expands
    to per-frequency gains; a model that is already per-frequency (warm
    start) skips the warm-up entirely.

    Returns:
        Log-likelihood trace of length total_iters + 1; entry 0 is the
        likelihood of the incoming model.

    Raises:
        LikelihoodDiverged: NaN/Inf appeared in parameters or likelihood.
    """
    X = np.ascontiguousarray(X_FTM, dtype=np.complex128)
    F, T, M = X.shape
    if F != model.n_bins or M != model.n_chan:
        raise ValueError("block shape does not match model dims")
    if model.V_NCT.shape[2] != T:
        raise ValueError("block frame count does not match activations; "
                         "pass n_frames to init_model")

    eye_M = np.eye(M)
    trace = []

    def refresh_qdomain():
        y = np.matmul(X, np.swapaxes(model.Q_FMM, 1, 2))
        return np.abs(y) ** 2

    p_FTM = refresh_qdomain()
    floor = _PARAM_FLOOR * max(float(np.mean(p_FTM)), np.finfo(np.float64).tiny)

    def checked(loglik):
        if not np.isfinite(loglik):
            raise LikelihoodDiverged("non-finite log-likelihood")
        trace.append(loglik)

    def current_loglik():
        yhat = _model_psd(_lambda(model), model.gains_NFM(), floor)
        _, logdet = np.linalg.slogdet(model.Q_FMM)
        return float(-np.sum(p_FTM / yhat) - np.sum(np.log(yhat))
                     + 2.0 * T * np.sum(logdet))

    checked(current_loglik())

    for sweep in range(total_iters):
        if model.frequency_shared and sweep == warmup_iters:
            model.G = np.repeat(model.G[:, None, :], F, axis=1).copy()

        gains = model.gains_NFM()
        lam = _lambda(model)
        yhat = _model_psd(lam, gains, floor)

        def moment_maps(yhat):
            """[N, F, T] contractions of the inverse-PSD maps with the
            per-source gains (batched matvec over m)."""
            iq2 = p_FTM / (yhat * yhat)
            iq1 = 1.0 / yhat
            g_col = np.ascontiguousarray(gains)[:, :, :, None]
            num = np.matmul(iq2[None], g_col)[..., 0]
            den = np.matmul(iq1[None], g_col)[..., 0]
            return num, den, iq1, iq2

        # NMF spectra.
        num_NFT, den_NFT, _, _ = moment_maps(yhat)
        numU = np.matmul(model.V_NCT, num_NFT.transpose(0, 2, 1))
        denU = np.matmul(model.V_NCT, den_NFT.transpose(0, 2, 1))
        model.U_NCF = np.maximum(
            model.U_NCF * np.sqrt(numU / np.maximum(denU, _PARAM_FLOOR)),
            _PARAM_FLOOR)

        # NMF activations, with refreshed statistics.
        lam = _lambda(model)
        yhat = _model_psd(lam, gains, floor)
        num_NFT, den_NFT, _, _ = moment_maps(yhat)
        numV = np.matmul(model.U_NCF, num_NFT)
        denV = np.matmul(model.U_NCF, den_NFT)
        model.V_NCT = np.maximum(
            model.V_NCT * np.sqrt(numV / np.maximum(denV, _PARAM_FLOOR)),
            _PARAM_FLOOR)

        # Spatial gains.
        lam = _lambda(model)
        yhat = _model_psd(lam, model.gains_NFM(), floor)
        iq2 = p_FTM / (yhat * yhat)
        iq1 = 1.0 / yhat
        numG_NFM = np.matmul(lam[:, :, None, :], iq2[None])[:, :, 0, :]
        denG_NFM = np.matmul(lam[:, :, None, :], iq1[None])[:, :, 0, :]
        if model.frequency_shared:
            numG = numG_NFM.sum(axis=1)
            denG = denG_NFM.sum(axis=1)
        else:
            numG, denG = numG_NFM, denG_NFM
        model.G = np.maximum(
            model.G * np.sqrt(numG / np.maximum(denG, _PARAM_FLOOR)),
            _PARAM_FLOOR)

        # Diagonalizer rows by iterative projection.
        yhat = _model_psd(_lambda(model), model.gains_NFM(), floor)
        for m in range(M):
            Xw = X / yhat[:, :, m][:, :, None]
            Vm_FMM = (np.swapaxes(X, 1, 2) @ np.conj(Xw)) / T
            QV = model.Q_FMM @ Vm_FMM
            rhs = np.broadcast_to(eye_M[:, m].astype(np.complex128), (F, M))
            try:
                q_FM = np.linalg.solve(QV, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                ridge = 1e-10 * np.mean(np.abs(np.einsum("fii->fi", QV)))
                try:
                    q_FM = np.linalg.solve(QV + ridge * eye_M,
                                           rhs[..., None])[..., 0]
                except np.linalg.LinAlgError as exc:
                    raise LikelihoodDiverged(
                        "iterative projection hit a singular system") from exc
            norm_F = np.real(np.einsum("fi,fij,fj->f", np.conj(q_FM),
                                       Vm_FMM, q_FM))
            q_FM = q_FM / np.sqrt(np.maximum(norm_F, _PARAM_FLOOR))[:, None]
            model.Q_FMM[:, m, :] = np.conj(q_FM)
        p_FTM = refresh_qdomain()

        # Remove scale indeterminacies: per-source gains sum to M, spectra
        # sum to one over frequency, compensations keep the PSDs intact.
        if model.frequency_shared:
            s_N = model.G.sum(axis=1) / M
            model.G = model.G / s_N[:, None]
            model.U_NCF = model.U_NCF * s_N[:, None, None]
        else:
            s_NF = model.G.sum(axis=2) / M
            model.G = model.G / s_NF[:, :, None]
            model.U_NCF = model.U_NCF * s_NF[:, None, :]
        kappa_NC = model.U_NCF.sum(axis=2)
        model.U_NCF = model.U_NCF / np.maximum(kappa_NC[:, :, None],
                                               _PARAM_FLOOR)
        model.V_NCT = model.V_NCT * kappa_NC[:, :, None]
        model.U_NCF = np.maximum(model.U_NCF, _PARAM_FLOOR)
        model.V_NCT = np.maximum(model.V_NCT, _PARAM_FLOOR)
        model.G = np.maximum(model.G, _PARAM_FLOOR)

        for arr in (model.U_NCF, model.V_NCT, model.G, model.Q_FMM):
            if not np.all(np.isfinite(arr)):
                raise LikelihoodDiverged("non-finite model parameter")
        checked(current_loglik())

    try:
        model.Qinv_FMM = np.linalg.inv(model.Q_FMM)
    except np.linalg.LinAlgError as exc:
        raise LikelihoodDiverged("fitted diagonalizer not invertible") from exc
    if not np.all(np.isfinite(model.Qinv_FMM)):
        raise LikelihoodDiverged("fitted diagonalizer not invertible")
    return trace


def _posterior_diagonals(model, frame_slice):
    """Per-entry numerators lambda_n g_n and their sum, [N, F, T, M]."""
    lam_NFT = np.maximum(
        np.matmul(model.U_NCF.transpose(0, 2, 1),
                  model.V_NCT[:, :, frame_slice]),
        _PARAM_FLOOR)
    num = lam_NFT[..., None] * model.gains_NFM()[:, :, None, :]
    den = np.maximum(num.sum(axis=0), _PARAM_FLOOR)
    return num, den


def posterior(model, frame_index):
    """Posterior Wiener matrices and covariances for one block frame.

    Returns:
        (W_NFMM, Sigma_NFMM); the Wiener matrices of all sources sum to the
        identity per frequency, and each covariance is Hermitian PSD.
    """
    num, den = _posterior_diagonals(model, slice(frame_index, frame_index + 1))
    ratio_NFM = (num / den)[:, :, 0, :]
    resid_NFM = (num * (1.0 - num / den))[:, :, 0, :]
    W = np.einsum("fij,nfj,fjk->nfik", model.Qinv_FMM, ratio_NFM, model.Q_FMM)
    S = np.einsum("fij,nfj,fkj->nfik", model.Qinv_FMM, resid_NFM,
                  np.conj(model.Qinv_FMM))
    return W, hermitianize(S)


def posterior_block_mean(model, n_frames=None):
    """Block means of the per-frame posteriors, without materializing them.

    The Wiener matrix and covariance are linear in their per-frequency
    diagonal, so the mean over frames commutes with the sandwich by Q.
    """
    T = model.V_NCT.shape[2] if n_frames is None else n_frames
    num, den = _posterior_diagonals(model, slice(0, T))
    ratio_NFM = np.mean(num / den, axis=2)
    resid_NFM = np.mean(num * (1.0 - num / den), axis=2)
    W = np.einsum("fij,nfj,fjk->nfik", model.Qinv_FMM, ratio_NFM, model.Q_FMM)
    S = np.einsum("fij,nfj,fkj->nfik", model.Qinv_FMM, resid_NFM,
                  np.conj(model.Qinv_FMM))
    return W, hermitianize(S)


def separate_target(model, X_FTM):
    """Posterior-mean estimate of the target image at every mic, [F, T, M]."""
    num, den = _posterior_diagonals(model, slice(0, X_FTM.shape[1]))
    ratio_FTM = num[model.target_source] / den
    y_FTM = np.matmul(X_FTM, np.swapaxes(model.Q_FMM, 1, 2))
    return np.matmul(ratio_FTM * y_FTM, np.swapaxes(model.Qinv_FMM, 1, 2))


def publish_snapshot(W_block, Sigma_block, previous, alpha_bss,
                     target_source=0, timestamp=None):
    """Fold a block of posteriors into the running snapshot EMA.

    Args:
        W_block / Sigma_block: per-frame posteriors [N, F, T, M, M] or their
            precomputed block means [N, F, M, M].
        previous: last snapshot or None; the first block ignores history
            (EMA weight forced to 1).
        alpha_bss: EMA weight of the new block, in (0, 1].

    Returns:
        New immutable PosteriorSnapshot with block_index advanced by one.
    """
    if not 0.0 < alpha_bss <= 1.0:
        raise ValueError("alpha_bss must be in (0, 1]")
    W = np.asarray(W_block, dtype=np.complex128)
    S = np.asarray(Sigma_block, dtype=np.complex128)
    if W.ndim == 5:
        W = W.mean(axis=2)
    if S.ndim == 5:
        S = S.mean(axis=2)
    if previous is None:
        W_new, S_new, index = W, S, 1
    else:
        W_new = alpha_bss * W + (1.0 - alpha_bss) * previous.wiener_NFMM
        S_new = alpha_bss * S + (1.0 - alpha_bss) * previous.cov_NFMM
        index = previous.block_index + 1
    if timestamp is None:
        timestamp = time.time()
    return PosteriorSnapshot(np.ascontiguousarray(W_new),
                             hermitianize(S_new).copy(),
                             index, target_source, timestamp)


def roll_activations(model, shift):
    """Advance the activations by ``shift`` frames for a warm restart on the
    next overlapped block; new frames repeat the last column."""
    if model.V_NCT.shape[2] == 0 or shift <= 0:
        return
    T = model.V_NCT.shape[2]
    shift = min(shift, T)
    rolled = np.empty_like(model.V_NCT)
    rolled[:, :, :T - shift] = model.V_NCT[:, :, shift:]
    rolled[:, :, T - shift:] = model.V_NCT[:, :, -1:]
    model.V_NCT = rolled
