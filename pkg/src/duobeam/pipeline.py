"""Dual-process orchestration: a frame-driven front end re-steered by a
block-driven back end.

Per frame, the front end runs online dereverberation, converts the frame and
the latest posterior snapshot into source/interference moments, and, at the
end of every front-end block, refreshes the MVDR weights and emits the
block's enhanced frames.  Independently, every back-end shift worth of
frames, the newest back-end block (mixture frames, not the front end's
output) is dereverberated offline, fitted, and the resulting posterior
means are folded into a new snapshot.

Three schedulers cover the deployment and experiment regimes:

    "ideal"     single context; ticks run at exact block boundaries and
                publish immediately.  Deterministic and bit-reproducible.
    "realtime"  single context; ticks run at boundaries but their snapshot
                only becomes visible after the measured compute time has
                elapsed in stream time, and boundaries reached while a tick
                is conceptually in flight are skipped.
    "threaded"  a real worker thread with a latest-wins, depth-one request
                queue; the front end never blocks on it.

The back end can fail or fall behind without stalling the front end: the
previous snapshot simply stays in use.
"""

import json
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .beamformer import (BeamformerConfig, BeamformerState, accumulate_block,
                         frame_moments)
from .fastmnmf import (LikelihoodDiverged, PosteriorSnapshot, fit, init_model,
                       posterior_block_mean, publish_snapshot,
                       roll_activations)
from .stft import StftAnalyzer, StftConfig, StftSynthesizer
from .wpe import NumericalDivergence, OnlineWpe, WpeConfig, offline_wpe

__all__ = [
    "PipelineConfig",
    "SnapshotSlot",
    "EnhanceResult",
    "default_snapshot",
    "backend_tick",
    "run_stream",
    "precompute_snapshots",
    "frontend_pass",
    "write_timing_log",
]

_SCHEDULERS = ("ideal", "realtime", "threaded")


@dataclass
class PipelineConfig:
    """Everything the two processing contexts need.

    Defaults follow the reference operating point: 1024/256 STFT at 16 kHz,
    back-end blocks of 256 frames with 75% overlap (shift 64), taps 5 and
    delay 3 for both dereverberators, 8 NMF components, 50 fit sweeps with
    40 warm-up sweeps, alpha_wpe 0.005, alpha_bss 0.100, and the front end
    at 2 frames per block with alpha_bf 0.020.
    """

    stft: StftConfig = field(default_factory=StftConfig)
    wpe_front: WpeConfig = field(default_factory=WpeConfig)
    wpe_back: WpeConfig = field(default_factory=WpeConfig)
    t_bss: int = 256
    bss_overlap: float = 0.75
    t_bf: int = 2
    alpha_bss: float = 0.100
    alpha_bf: float = 0.020
    n_sources: int = 3
    n_components: int = 8
    fit_iterations: int = 50
    fit_warmup: int = 40
    target_azimuth: float = 0.0
    extra_azimuths: tuple = ()
    ref_mic: int = 0
    seed: int = 0
    warm_start: bool = True
    compute_all_sources: bool = False
    backend_enabled: bool = True
    scheduler: str = "ideal"

    def __post_init__(self):
        shift = self.t_bss * (1.0 - self.bss_overlap)
        if abs(shift - round(shift)) > 1e-9 or round(shift) < 1:
            raise ValueError("t_bss * (1 - bss_overlap) must be a positive "
                             "integer frame count")
        if self.t_bf < 1:
            raise ValueError("t_bf must be >= 1")
        if not 0.0 < self.alpha_bss <= 1.0 or not 0.0 < self.alpha_bf <= 1.0:
            raise ValueError("EMA weights must be in (0, 1]")
        if self.scheduler not in _SCHEDULERS:
            raise ValueError(f"scheduler must be one of {_SCHEDULERS}")
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")

    @property
    def bss_shift(self):
        return int(round(self.t_bss * (1.0 - self.bss_overlap)))

    def directions(self):
        return (self.target_azimuth, *self.extra_azimuths)

    def to_dict(self):
        return {
            "stft": {"fft_size": self.stft.fft_size, "hop": self.stft.hop,
                     "sample_rate": self.stft.sample_rate},
            "wpe_front": {"taps": self.wpe_front.taps,
                          "delay": self.wpe_front.delay,
                          "alpha": self.wpe_front.alpha},
            "wpe_back": {"taps": self.wpe_back.taps,
                         "delay": self.wpe_back.delay,
                         "iterations": self.wpe_back.iterations},
            "t_bss": self.t_bss, "bss_overlap": self.bss_overlap,
            "t_bf": self.t_bf, "alpha_bss": self.alpha_bss,
            "alpha_bf": self.alpha_bf, "n_sources": self.n_sources,
            "n_components": self.n_components,
            "fit_iterations": self.fit_iterations,
            "fit_warmup": self.fit_warmup,
            "target_azimuth": self.target_azimuth,
            "extra_azimuths": list(self.extra_azimuths),
            "ref_mic": self.ref_mic, "seed": self.seed,
            "warm_start": self.warm_start,
            "compute_all_sources": self.compute_all_sources,
            "backend_enabled": self.backend_enabled,
            "scheduler": self.scheduler,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        stft = StftConfig(**d.pop("stft", {}))
        wf = d.pop("wpe_front", {})
        wb = d.pop("wpe_back", {})
        extra = tuple(d.pop("extra_azimuths", ()) or ())
        return cls(stft=stft, wpe_front=WpeConfig(**wf),
                   wpe_back=WpeConfig(**wb), extra_azimuths=extra, **d)


class SnapshotSlot:
    """Single-writer, single-reader slot holding the current snapshot.

    Publication replaces the whole (counter, snapshot) pair in one
    reference assignment, so a reader always sees a complete snapshot and a
    strictly increasing publication counter.
    """

    def __init__(self, initial: PosteriorSnapshot):
        self._state = (0, initial)

    def publish(self, snapshot: PosteriorSnapshot):
        counter = self._state[0] + 1
        self._state = (counter, snapshot)
        return counter

    def read(self):
        return self._state[1]

    @property
    def counter(self):
        return self._state[0]


def default_snapshot(n_src, n_bins, n_chan, target_source=0):
    """Degenerate snapshot used before the first publication: the target
    passes through (W = I, Sigma = 0), all other sources are zero."""
    W = np.zeros((n_src, n_bins, n_chan, n_chan), dtype=np.complex128)
    W[target_source] = np.eye(n_chan)
    S = np.zeros_like(W)
    return PosteriorSnapshot(W, S, block_index=0, target_source=target_source)


def backend_tick(frames_FTM, model, slot, cfg, previous=None, timestamp=0.0):
    """One back-end pass: offline dereverberation, fit, publish.

    Args:
        frames_FTM: the newest t_bss mixture frames.
        model: warm-start model (mutated in place).
        slot: SnapshotSlot to publish into.
        previous: snapshot the EMA continues from (None for the first block).

    Returns:
        (snapshot, fit trace); the snapshot is already published.

    Raises:
        LikelihoodDiverged: nothing was published; the caller decides how to
            recover (the pipeline resets the model and keeps the old
            snapshot).
    """
    dereverbed = offline_wpe(frames_FTM, cfg.wpe_back)
    trace = fit(model, dereverbed, cfg.fit_iterations, cfg.fit_warmup)
    W, S = posterior_block_mean(model)
    snap = publish_snapshot(W, S, previous, cfg.alpha_bss,
                            target_source=model.target_source,
                            timestamp=timestamp)
    slot.publish(snap)
    return snap, trace


class _FrameRing:
    """Circular buffer of the newest t_bss frames."""

    def __init__(self, n_frames, n_bins, n_chan):
        self.buf = np.zeros((n_frames, n_bins, n_chan), dtype=np.complex128)
        self.n_frames = n_frames
        self._next = 0
        self.count = 0

    def push(self, X_FM):
        self.buf[self._next] = X_FM
        self._next = (self._next + 1) % self.n_frames
        self.count += 1

    def window(self):
        """Chronological [F, T, M] copy of the buffered frames."""
        if self.count < self.n_frames:
            ordered = self.buf[:self.count]
        else:
            ordered = np.concatenate(
                [self.buf[self._next:], self.buf[:self._next]], axis=0)
        return np.ascontiguousarray(np.moveaxis(ordered, 0, 1))


class _Backend:
    """Owns the separation model and the snapshot EMA across ticks."""

    def __init__(self, cfg: PipelineConfig, steering, n_chan, hook=None):
        self.cfg = cfg
        self.steering = steering
        self.n_chan = n_chan
        self.hook = hook
        self.model = None
        self.previous = None
        self.last_start = None
        self.tick_index = 0
        self.log = []

    def _fresh_model(self):
        cfg = self.cfg
        directions = cfg.directions()
        if len(directions) > min(cfg.n_sources, self.n_chan):
            directions = directions[:min(cfg.n_sources, self.n_chan)]
        return init_model(cfg.n_sources, self.n_chan, cfg.stft.n_bins,
                          cfg.n_components, n_frames=cfg.t_bss,
                          directions=directions, steering=self.steering,
                          seed=cfg.seed, target_source=0)

    def tick(self, frames_FTM, slot, start_frame, stream_time):
        """Run one tick; returns (snapshot or None, elapsed ms)."""
        cfg = self.cfg
        t0 = time.perf_counter()
        if self.hook is not None:
            self.hook(frames_FTM)
        try:
            if self.model is None or not cfg.warm_start:
                self.model = self._fresh_model()
            elif self.last_start is not None:
                roll_activations(self.model, start_frame - self.last_start)
            snap, trace = backend_tick(frames_FTM, self.model, slot, cfg,
                                       previous=self.previous,
                                       timestamp=stream_time)
            self.previous = snap
            self.last_start = start_frame
            self.tick_index += 1
            elapsed = 1e3 * (time.perf_counter() - t0)
            self.log.append({"kind": "backend", "i": snap.block_index,
                             "compute_ms": elapsed, "skipped": 0,
                             "frame": start_frame + frames_FTM.shape[1],
                             "loglik": trace[-1]})
            return snap, elapsed
        except Exception as exc:
            # A failing tick must never stall the front end: keep the stale
            # snapshot, restart from a fresh model on the next tick.
            self.model = None
            elapsed = 1e3 * (time.perf_counter() - t0)
            name = type(exc).__name__
            self.log.append({"kind": "backend", "i": None,
                             "compute_ms": elapsed, "skipped": 0,
                             "frame": start_frame + frames_FTM.shape[1],
                             "error": f"{name}: {exc}"})
            return None, elapsed

    def note_skipped(self, frame):
        self.log.append({"kind": "backend", "i": None, "compute_ms": 0.0,
                         "skipped": 1, "frame": frame})


class _FrontEnd:
    """Frame-driven context: WPE, moments, block-wise MVDR, synthesis."""

    def __init__(self, cfg: PipelineConfig, n_chan):
        self.cfg = cfg
        n_bins = cfg.stft.n_bins
        self.wpe = OnlineWpe(cfg.wpe_front, n_bins, n_chan)
        bf_cfg = BeamformerConfig(alpha=cfg.alpha_bf, block_frames=cfg.t_bf,
                                  ref_mic=cfg.ref_mic)
        n_src = cfg.n_sources if cfg.compute_all_sources else 1
        self.source_ids = (list(range(cfg.n_sources))
                           if cfg.compute_all_sources else [0])
        self.states = [BeamformerState(bf_cfg, n_bins, n_chan)
                       for _ in self.source_ids]
        self.synths = [StftSynthesizer(cfg.stft) for _ in self.source_ids]
        self._xhat = []
        self._gammas = [[] for _ in range(n_src)]
        self._upsilons = [[] for _ in range(n_src)]
        self._acc_s = 0.0
        self.block_count = 0
        self.divergences = 0
        self.log = []

    def process_frame(self, X_FM, snapshot):
        """Returns per-source sample chunks emitted by a completed block."""
        t0 = time.perf_counter()
        try:
            xhat = self.wpe.step(X_FM)
        except NumericalDivergence as exc:
            xhat = exc.frame
            self.divergences += 1
        for k, n in enumerate(self.source_ids):
            g, u = frame_moments(xhat, snapshot.wiener_NFMM[n],
                                 snapshot.cov_NFMM[n])
            self._gammas[k].append(g)
            self._upsilons[k].append(u)
        self._xhat.append(xhat)
        self._acc_s += time.perf_counter() - t0
        if len(self._xhat) == self.cfg.t_bf:
            return self._emit_block(refresh=True)
        return None

    def _emit_block(self, refresh):
        t0 = time.perf_counter()
        frames_TFM = np.stack(self._xhat)
        chunks = []
        for k, state in enumerate(self.states):
            if refresh:
                accumulate_block(np.stack(self._gammas[k]),
                                 np.stack(self._upsilons[k]), state)
                state.refresh_weights()
            spec_FT = np.einsum("fm,tfm->ft", np.conj(state.w_FM), frames_TFM)
            chunks.append(self.synths[k].push(spec_FT))
        n_frames = len(self._xhat)
        self._xhat = []
        for k in range(len(self.states)):
            self._gammas[k] = []
            self._upsilons[k] = []
        self.block_count += 1
        elapsed = self._acc_s + (time.perf_counter() - t0)
        self._acc_s = 0.0
        self.log.append({"kind": "frontend", "j": self.block_count,
                         "frames": n_frames, "compute_ms": 1e3 * elapsed})
        return chunks

    def flush(self):
        """Emit any buffered partial block (with the current weights) and
        drain the synthesizers."""
        chunks = None
        if self._xhat:
            chunks = self._emit_block(refresh=False)
        tails = [s.flush() for s in self.synths]
        return chunks, tails


@dataclass
class EnhanceResult:
    """Output of a pipeline run."""

    samples: np.ndarray
    frontend_log: list
    backend_log: list
    skipped_ticks: int
    wpe_divergences: int
    config: PipelineConfig
    all_samples: dict | None = None
    snapshots: list | None = None       # [(publish_frame, snapshot)]

    def frontend_ms_per_frame(self):
        return np.array([r["compute_ms"] / r["frames"]
                         for r in self.frontend_log])

    def latency_summary(self):
        """Block shift plus mean front-end block compute, as milliseconds."""
        per_block = np.array([r["compute_ms"] for r in self.frontend_log])
        shift_ms = 1e3 * self.config.t_bf * self.config.stft.frame_period_s
        mean_ms = float(per_block.mean()) if per_block.size else 0.0
        return {"block_shift_ms": shift_ms, "mean_compute_ms": mean_ms,
                "total_latency_ms": shift_ms + mean_ms}


def _frame_stream(samples, cfg, n_chan=None):
    """Yield [F, M] frames from an array or an iterable of sample chunks."""
    if isinstance(samples, np.ndarray):
        x = samples if samples.ndim == 2 else samples[:, None]
        analyzer = StftAnalyzer(cfg.stft, x.shape[1])
        frames = analyzer.push(x)
        for t in range(frames.shape[1]):
            yield frames[:, t, :]
        return
    analyzer = None
    for chunk in samples:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim == 1:
            chunk = chunk[:, None]
        if analyzer is None:
            analyzer = StftAnalyzer(cfg.stft, chunk.shape[1])
        frames = analyzer.push(chunk)
        for t in range(frames.shape[1]):
            yield frames[:, t, :]


def _input_geometry(samples, cfg, n_chan):
    if isinstance(samples, np.ndarray):
        x = samples if samples.ndim == 2 else samples[:, None]
        return x.shape[0], x.shape[1]
    if n_chan is None:
        raise ValueError("n_chan is required for streamed input")
    return None, n_chan


def run_stream(samples, cfg: PipelineConfig, steering=None, n_chan=None,
               backend_hook=None, keep_snapshots=False):
    """Enhance a multichannel signal with the full dual-process pipeline.

    Args:
        samples: [n, M] array or an iterable of [k, M] chunks.
        steering: SteeringTable; required while the back end is enabled.
        backend_hook: test hook called with each tick's input block.
        keep_snapshots: record (publish_frame, snapshot) pairs on the result.

    Returns:
        EnhanceResult; ``samples`` is the target estimate, trimmed/padded to
        the input length for array input.
    """
    if cfg.backend_enabled and steering is None:
        raise ValueError("steering table required while the back end runs")
    n_samples, m = _input_geometry(samples, cfg, n_chan)
    slot = SnapshotSlot(default_snapshot(cfg.n_sources, cfg.stft.n_bins, m))
    backend = (_Backend(cfg, steering, m, hook=backend_hook)
               if cfg.backend_enabled else None)
    fe = _FrontEnd(cfg, m)
    ring = _FrameRing(cfg.t_bss, cfg.stft.n_bins, m)

    out = [[] for _ in fe.source_ids]
    skipped = 0
    snapshots = []
    pending = None          # realtime: (publish_frame, snapshot)
    worker = None
    requests = None
    if cfg.scheduler == "threaded" and backend is not None:
        requests = queue.Queue(maxsize=1)

        def _run_worker():
            while True:
                item = requests.get()
                if item is None:
                    return
                start, frames, stream_time = item
                try:
                    backend.tick(frames, slot, start, stream_time)
                except Exception as exc:  # keep the front end alive
                    backend.log.append({"kind": "backend", "i": None,
                                        "compute_ms": 0.0, "skipped": 0,
                                        "frame": start,
                                        "error": repr(exc)})

        worker = threading.Thread(target=_run_worker, daemon=True)
        worker.start()

    frame_period = cfg.stft.frame_period_s
    f_idx = -1
    for f_idx, X in enumerate(_frame_stream(samples, cfg, m)):
        if pending is not None and pending[0] <= f_idx:
            slot.publish(pending[1])
            if keep_snapshots:
                snapshots.append(pending)
            pending = None
        chunks = fe.process_frame(X, slot.read())
        if chunks is not None:
            for k, c in enumerate(chunks):
                out[k].append(c)
        ring.push(X)
        count = f_idx + 1
        at_boundary = (backend is not None and count >= cfg.t_bss
                       and (count - cfg.t_bss) % cfg.bss_shift == 0)
        if not at_boundary:
            continue
        start = count - cfg.t_bss
        stream_time = count * frame_period
        if cfg.scheduler == "ideal":
            snap, _ = backend.tick(ring.window(), slot, start, stream_time)
            if snap is not None and keep_snapshots:
                snapshots.append((count, snap))
        elif cfg.scheduler == "realtime":
            if pending is not None:
                skipped += 1
                backend.note_skipped(count)
                continue
            deferred = SnapshotSlot(slot.read())
            snap, elapsed = backend.tick(ring.window(), deferred, start,
                                         stream_time)
            if snap is not None:
                publish_frame = count + max(0, int(np.ceil(
                    1e-3 * elapsed / frame_period)))
                pending = (publish_frame, snap)
        else:  # threaded
            item = (start, ring.window(), stream_time)
            try:
                requests.put_nowait(item)
            except queue.Full:
                try:
                    requests.get_nowait()
                    skipped += 1
                    backend.note_skipped(count)
                except queue.Empty:
                    pass
                requests.put_nowait(item)

    if worker is not None:
        requests.put(None)
        worker.join()

    chunks, tails = fe.flush()
    if chunks is not None:
        for k, c in enumerate(chunks):
            out[k].append(c)
    for k, tail in enumerate(tails):
        out[k].append(tail)

    outputs = [np.concatenate(c) if c else np.zeros(0) for c in out]
    if n_samples is not None:
        fixed = []
        for o in outputs:
            if len(o) >= n_samples:
                fixed.append(o[:n_samples])
            else:
                fixed.append(np.concatenate([o, np.zeros(n_samples - len(o))]))
        outputs = fixed

    backend_log = backend.log if backend is not None else []
    all_samples = None
    if cfg.compute_all_sources:
        all_samples = {n: outputs[k] for k, n in enumerate(fe.source_ids)}
    return EnhanceResult(
        samples=outputs[0],
        frontend_log=fe.log,
        backend_log=backend_log,
        skipped_ticks=skipped,
        wpe_divergences=fe.divergences,
        config=cfg,
        all_samples=all_samples,
        snapshots=snapshots if keep_snapshots else None,
    )


def precompute_snapshots(samples, cfg: PipelineConfig, steering,
                         backend_hook=None):
    """Run only the back-end chain over a signal (ideal schedule).

    Returns:
        (schedule, backend_log) where schedule is a list of
        (publish_frame, snapshot) pairs; the snapshot becomes visible to
        frames with index >= publish_frame.  Feeding the schedule to
        ``frontend_pass`` reproduces the ideal-mode ``run_stream`` output
        exactly.
    """
    n_samples, m = _input_geometry(samples, cfg, None)
    slot = SnapshotSlot(default_snapshot(cfg.n_sources, cfg.stft.n_bins, m))
    backend = _Backend(cfg, steering, m, hook=backend_hook)
    ring = _FrameRing(cfg.t_bss, cfg.stft.n_bins, m)
    schedule = []
    for f_idx, X in enumerate(_frame_stream(samples, cfg, m)):
        ring.push(X)
        count = f_idx + 1
        if count >= cfg.t_bss and (count - cfg.t_bss) % cfg.bss_shift == 0:
            snap, _ = backend.tick(ring.window(), slot, count - cfg.t_bss,
                                   count * cfg.stft.frame_period_s)
            if snap is not None:
                schedule.append((count, snap))
    return schedule, backend.log


def frontend_pass(samples, cfg: PipelineConfig, snapshot_schedule):
    """Run only the front end, replaying a precomputed snapshot schedule.

    Useful for sweeping front-end parameters without re-running the back
    end, which does not depend on them under the ideal scheduler.
    """
    n_samples, m = _input_geometry(samples, cfg, None)
    slot = SnapshotSlot(default_snapshot(cfg.n_sources, cfg.stft.n_bins, m))
    fe = _FrontEnd(cfg, m)
    schedule = sorted(snapshot_schedule, key=lambda item: item[0])
    next_pub = 0
    out = []
    for f_idx, X in enumerate(_frame_stream(samples, cfg, m)):
        while next_pub < len(schedule) and schedule[next_pub][0] <= f_idx:
            slot.publish(schedule[next_pub][1])
            next_pub += 1
        chunks = fe.process_frame(X, slot.read())
        if chunks is not None:
            out.append(chunks[0])
    chunks, tails = fe.flush()
    if chunks is not None:
        out.append(chunks[0])
    out.append(tails[0])
    samples_out = np.concatenate(out) if out else np.zeros(0)
    if n_samples is not None:
        if len(samples_out) >= n_samples:
            samples_out = samples_out[:n_samples]
        else:
            samples_out = np.concatenate(
                [samples_out, np.zeros(n_samples - len(samples_out))])
    return EnhanceResult(
        samples=samples_out,
        frontend_log=fe.log,
        backend_log=[],
        skipped_ticks=0,
        wpe_divergences=fe.divergences,
        config=cfg,
    )


def write_timing_log(path, result: EnhanceResult):
    """One JSON record per line: front-end blocks, then back-end ticks."""
    with open(path, "w") as fh:
        for rec in result.frontend_log:
            fh.write(json.dumps(rec) + "\n")
        for rec in result.backend_log:
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps({"kind": "summary",
                             "skipped_ticks": result.skipped_ticks,
                             "wpe_divergences": result.wpe_divergences,
                             **result.latency_summary()}) + "\n")
