"""Command-line entry points.

    duobeam enhance   --in mix.wav --steering st.stbl --target-az 0 --out s.wav
    duobeam simulate  --spec scene.yaml --seed 7 --out scenedir/
    duobeam eval baselines --scene scenedir/ --out reportdir/
    duobeam eval grid --t-bf 1,4,16 --alpha-bf 0.5,0.02 --scene scenedir/

Config files are YAML with the same keys as PipelineConfig.to_dict();
command-line flags override file values, which override the defaults.  The
effective configuration is echoed at INFO level (set DUOBEAM_LOG=info).
Exit codes: 0 success, 1 processing error, 2 usage error.
"""

import csv
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml
from scipy.io import wavfile

from . import report
from .evaluation import grid_search, run_baselines, si_sdr_segments
from .pipeline import PipelineConfig, run_stream, write_timing_log
from .scenesim import RenderedScene, SceneSpec, render
from .steering import SteeringTable, build_steering_table

log = logging.getLogger("duobeam")


def _setup_logging():
    level = os.environ.get("DUOBEAM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")


def read_wav(path):
    """Load a WAV file as float64 [n, M]; accepts PCM 16/24/32 and float."""
    rate, data = wavfile.read(path)
    x = np.asarray(data, dtype=np.float64)
    if np.issubdtype(data.dtype, np.integer):
        x = x / float(np.iinfo(data.dtype).max)
    if x.ndim == 1:
        x = x[:, None]
    return rate, x


def write_wav(path, rate, samples):
    """Write float32 WAV (mono [n] or multichannel [n, M])."""
    wavfile.write(path, rate, np.asarray(samples, dtype=np.float32))


def _load_config(config_path, overrides):
    base = {}
    if config_path:
        with open(config_path) as fh:
            base = yaml.safe_load(fh) or {}
    merged = PipelineConfig.from_dict(base) if base else PipelineConfig()
    d = merged.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        d[key] = value
    cfg = PipelineConfig.from_dict(d)
    log.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


@click.group()
def main():
    """Streaming multichannel speech enhancement."""
    _setup_logging()


@main.command()
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Multichannel input WAV.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Mono enhanced output WAV (32-bit float).")
@click.option("--steering", "steering_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Steering table (.stbl) covering the target azimuth.")
@click.option("--target-az", type=float, default=0.0, show_default=True,
              help="Target azimuth in degrees.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="YAML pipeline configuration.")
@click.option("--t-bf", type=int, default=None, help="Front-end block frames.")
@click.option("--alpha-bf", type=float, default=None)
@click.option("--alpha-bss", type=float, default=None)
@click.option("--alpha-wpe", type=float, default=None)
@click.option("--n-sources", type=int, default=None)
@click.option("--ref-mic", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--scheduler", type=click.Choice(["ideal", "realtime",
                                                "threaded"]), default=None)
@click.option("--deterministic", is_flag=True,
              help="Single-context replay mode (ideal scheduler).")
@click.option("--timing-log", "timing_path", type=click.Path(), default=None,
              help="Write the per-block timing log (JSON lines).")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render a timing figure next to the timing log.")
def enhance(in_path, out_path, steering_path, target_az, config_path, t_bf,
            alpha_bf, alpha_bss, alpha_wpe, n_sources, ref_mic, seed,
            scheduler, deterministic, timing_path, figures):
    """Enhance a multichannel WAV into a mono target estimate."""
    overrides = {"t_bf": t_bf, "alpha_bf": alpha_bf, "alpha_bss": alpha_bss,
                 "n_sources": n_sources, "ref_mic": ref_mic, "seed": seed,
                 "target_azimuth": target_az, "scheduler": scheduler}
    cfg = _load_config(config_path, overrides)
    if alpha_wpe is not None:
        cfg.wpe_front.alpha = alpha_wpe
    if deterministic:
        cfg.scheduler = "ideal"
    try:
        steering = SteeringTable.load(steering_path)
        rate, samples = read_wav(in_path)
        if rate != cfg.stft.sample_rate:
            raise ValueError(f"input rate {rate} != config rate "
                             f"{cfg.stft.sample_rate}")
        if steering.n_chan != samples.shape[1]:
            raise ValueError(
                f"steering table has {steering.n_chan} channels, input has "
                f"{samples.shape[1]}")
        result = run_stream(samples, cfg, steering)
        write_wav(out_path, rate, result.samples)
        summary = result.latency_summary()
        click.echo(f"wrote {out_path} ({len(result.samples) / rate:.2f} s), "
                   f"total latency {summary['total_latency_ms']:.1f} ms, "
                   f"skipped ticks {result.skipped_ticks}")
        if timing_path:
            write_timing_log(timing_path, result)
            if figures:
                fig_path = str(Path(timing_path).with_suffix(".png"))
                report.save_timing_figure(result, fig_path)
                click.echo(f"wrote {timing_path} and {fig_path}")
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command()
@click.option("--spec", "spec_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Scene description YAML.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(spec_path, seed, out_dir):
    """Render a scene into a directory (mixture, references, steering)."""
    try:
        with open(spec_path) as fh:
            spec = SceneSpec.from_dict(yaml.safe_load(fh))
        scene = render(spec, seed=seed)
        save_scene_dir(out_dir, scene)
        click.echo(f"rendered {spec.duration_s:.1f} s scene into {out_dir}")
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def save_scene_dir(out_dir, scene: RenderedScene):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sr = scene.spec.sample_rate
    write_wav(out / "mixture.wav", sr, scene.mixture)
    for s in range(scene.references.shape[0]):
        write_wav(out / f"reference_{s:02d}.wav", sr, scene.references[s])
    scene.steering.save(out / "steering.stbl")
    with open(out / "scene.yaml", "w") as fh:
        yaml.safe_dump({"seed": scene.seed, **scene.spec.to_dict()}, fh)


def load_scene_dir(scene_dir):
    """Reload a rendered scene directory (audio, references, steering)."""
    d = Path(scene_dir)
    with open(d / "scene.yaml") as fh:
        raw = yaml.safe_load(fh)
    seed = raw.pop("seed", 0)
    spec = SceneSpec.from_dict(raw)
    rate, mixture = read_wav(d / "mixture.wav")
    refs = []
    for s in range(len(spec.sources)):
        _, ref = read_wav(d / f"reference_{s:02d}.wav")
        refs.append(ref[:, 0])
    steering = SteeringTable.load(d / "steering.stbl")
    return RenderedScene(mixture=mixture, references=np.stack(refs),
                         steering=steering, spec=spec, seed=seed)


@main.group(name="eval")
def eval_group():
    """Score baselines or sweep front-end parameters on a rendered scene."""


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@eval_group.command()
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help="Report directory (defaults to the scene directory).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--segment-s", type=float, default=8.0, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def baselines(scene_dir, out_dir, config_path, segment_s, figures):
    """Run the baseline ladder and write baselines.csv (+ figures)."""
    try:
        scene = load_scene_dir(scene_dir)
        cfg = _load_config(config_path, {})
        results = run_baselines(scene, cfg, segment_s=segment_s)
        out = Path(out_dir or scene_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "baselines.csv",
                   ["method", "si_sdr_db", "compute_ms", "error"],
                   [[r.method, f"{r.mean_si_sdr_db:.3f}",
                     f"{r.mean_block_compute_ms:.3f}", r.error]
                    for r in results])
        _write_csv(out / "baseline_segments.csv",
                   ["method", "segment", "si_sdr_db"],
                   [[r.method, i, f"{v:.3f}"]
                    for r in results
                    for i, v in enumerate(r.segment_si_sdr_db)])
        for r in results:
            click.echo(f"{r.method:10s} {r.mean_si_sdr_db:8.2f} dB   "
                       f"{r.mean_block_compute_ms:7.2f} ms {r.error}")
        if figures:
            report.save_baseline_bars(results, out / "baselines.png")
            traces = {r.method: r.segment_si_sdr_db for r in results
                      if r.segment_si_sdr_db.size}
            if traces:
                report.save_segment_traces(traces, segment_s,
                                           out / "baseline_segments.png",
                                           scene.spec.move_times())
        click.echo(f"report written to {out}")
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@eval_group.command()
@click.option("--scene", "scene_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--t-bf", "t_bf_csv", default="1,2,4,8,16,32",
              show_default=True, help="Comma-separated block sizes.")
@click.option("--alpha-bf", "alpha_csv",
              default="0.5,0.2,0.1,0.05,0.02,0.01,0.005", show_default=True)
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--segment-s", type=float, default=8.0, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def grid(scene_dir, t_bf_csv, alpha_csv, out_dir, config_path, segment_s,
         figures):
    """Sweep (t_bf, alpha_bf) and write grid.csv (+ heatmap)."""
    try:
        scene = load_scene_dir(scene_dir)
        cfg = _load_config(config_path, {})
        t_bf_values = [int(v) for v in t_bf_csv.split(",") if v]
        alpha_values = [float(v) for v in alpha_csv.split(",") if v]
        result = grid_search(scene, cfg, t_bf_values, alpha_values,
                             segment_s=segment_s)
        out = Path(out_dir or scene_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "grid.csv",
                   ["t_bf", "alpha_bf", "si_sdr_db", "compute_ms"],
                   [[r["t_bf"], r["alpha_bf"], f"{r['si_sdr_db']:.3f}",
                     f"{r['compute_ms']:.3f}"] for r in result.rows])
        for row in result.rows:
            click.echo(f"t_bf={row['t_bf']:3d} alpha_bf={row['alpha_bf']:<6g} "
                       f"{row['si_sdr_db']:8.2f} dB")
        if figures:
            report.save_grid_heatmap(result, out / "grid.png")
        click.echo(f"report written to {out}")
    except Exception as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
