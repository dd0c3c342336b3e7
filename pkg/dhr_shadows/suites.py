"""
Experiment suites.

Each suite runs a fixed matrix of configurations derived from a base config,
writes a CSV table and an SVG plot into the output directory, and evaluates
its acceptance checks. Suites never raise on a failed check; the caller
decides what a failure means.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .config import Config, derive
from .errors import SuiteError
from .gbuffer import rasterize
from .metrics import (HYBRID_PASSES, linear_fit, measure_bandwidth, plot_bars, plot_series,
                      sweep_frame_size_vs_fps, write_table)
from .netsim import LinkConfig, lognormal_trace, save_latency_trace
from .pipeline import RenderServer, run_local, run_sim
from .raytrace import trace_ao
from .sampling import SamplerState
from .scene import Scene

logger = logging.getLogger(__name__)

LATENCY_DELAYS_MS = (0, 50, 100, 200)
AO_RADII = (0.1, 1.0, 2.0, 5.0)
AO_RAY_COUNTS = (8, 16, 32, 64)
SWEEP_BANDWIDTH_BPS = 8_000_000
SWEEP_SIZES = tuple(range(20000, 40001, 2500))
STATIC_AO_FRAMES = 32
TRACE_LENGTH = 1000

BANDWIDTH_RATIO_RANGE = (0.15, 0.40)
PREDICTION_MARGIN = 0.01
MIN_SSIM_AT_200MS = 0.80
MIN_SSIM_LOW_LATENCY = 0.87
MIN_SWEEP_R2 = 0.9
MAX_RAY_COUNT_GAP = 0.02

# Pass configurations for the frame metrics table.
FRAME_METRIC_RUNS = (
    ("none", {"shadows.mode": "none", "ao.enabled": False}),
    ("hard", {"shadows.mode": "hard", "ao.enabled": False}),
    ("soft", {"shadows.mode": "soft", "ao.enabled": False}),
    ("soft+ao", {"shadows.mode": "soft", "ao.enabled": True}),
    ("hard+ao", {"shadows.mode": "hard", "ao.enabled": True}),
    ("remote", {"shadows.mode": "soft", "ao.enabled": True, "remote.enabled": True}),
    ("soft+raw-ao", {"shadows.mode": "soft", "ao.enabled": True, "filter.enabled": False}),
)


@dataclass(frozen=True)
class SuiteCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteReport:
    """
    Result of one suite.

    Attributes:
        name: suite name
        columns: header of the summary table
        rows: summary table rows, as written to the CSV
        checks: acceptance checks evaluated on the rows
        files: every file written
    """

    name: str
    columns: Sequence[str]
    rows: List[Sequence] = field(default_factory=list)
    checks: List[SuiteCheck] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(SuiteCheck(name, bool(passed), detail))
        logger.info("%s: check %s %s (%s)", self.name, name, "passed" if passed else "FAILED", detail)

    def write(self, directory: Path) -> Path:
        path = directory / f"{self.name.replace('-', '_')}.csv"
        write_table(self.rows, self.columns, str(path))
        self.files.append(path)
        return path


def _svg(report: SuiteReport, directory: Path, suffix: str = "") -> Path:
    path = directory / f"{report.name.replace('-', '_')}{suffix}.svg"
    report.files.append(path)
    return path


def _reference_frames(config: Config, scene: Scene) -> List[np.ndarray]:
    """Frames of the transport-free pipeline, the SSIM reference for latency runs."""
    zero_latency = derive(config, {"remote.enabled": False, "output.save_frames": False})
    return run_local(zero_latency, scene, name="zero-latency").frames


def bandwidth_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """Delivered bits per second of the hybrid passes against the remote baseline on one run."""
    report = SuiteReport("bandwidth", ("pass", "delivered_bps"))
    result = run_sim(derive(config, {"remote.enabled": True}), scene, name="bandwidth")
    bandwidth = result.bandwidth
    for tag in HYBRID_PASSES + ("hybrid", "remote"):
        report.rows.append((tag, bandwidth.get(tag, 0.0)))
    ratio = bandwidth["hybrid"] / bandwidth["remote"] if bandwidth["remote"] > 0 else float("inf")
    report.rows.append(("ratio", ratio))
    report.write(directory)

    series = {}
    for tag in HYBRID_PASSES + ("color",):
        deliveries = [d for d in result.record.ledger if d.tag == tag]
        if deliveries:
            series[tag] = ([d.delivered_at / 1000.0 for d in deliveries],
                           list(np.cumsum([d.size for d in deliveries]) * 8 / 1e6))
    plot_series(series, str(_svg(report, directory)), "time (s)", "delivered (Mbit)", "Cumulative delivered data")

    low, high = BANDWIDTH_RATIO_RANGE
    report.check("hybrid/remote ratio", low <= ratio <= high, f"{ratio:.3f} in [{low}, {high}]")
    return report


def latency_sweep_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """Mean SSIM against the zero-latency render for each uplink delay, with and without prediction."""
    report = SuiteReport("latency-sweep", ("delay_ms", "prediction", "mean_ssim", "fps"))
    reference = _reference_frames(config, scene)
    means: Dict[bool, List[float]] = {True: [], False: []}
    for delay in LATENCY_DELAYS_MS:
        for prediction in (True, False):
            run_config = derive(config, {"network.uplink.one_way_delay_ms": float(delay),
                                         "prediction.enabled": prediction, "remote.enabled": False})
            label = f"delay{delay}_{'pred' if prediction else 'nopred'}"
            record = run_sim(run_config, scene, reference, name=label).record
            means[prediction].append(record.mean_ssim)
            report.rows.append((delay, int(prediction), record.mean_ssim, record.fps))
    report.write(directory)
    plot_series({"prediction": (LATENCY_DELAYS_MS, means[True]), "no prediction": (LATENCY_DELAYS_MS, means[False])},
                str(_svg(report, directory)), "uplink delay (ms)", "mean SSIM", "SSIM vs. latency")

    for delay, on, off in zip(LATENCY_DELAYS_MS, means[True], means[False]):
        if delay == 0:
            continue
        report.check(f"prediction helps at {delay} ms", on - off >= PREDICTION_MARGIN,
                     f"{on:.4f} vs. {off:.4f}")
    at_200 = means[True][LATENCY_DELAYS_MS.index(200)]
    report.check("SSIM at 200 ms with prediction", at_200 >= MIN_SSIM_AT_200MS, f"{at_200:.4f} >= {MIN_SSIM_AT_200MS}")
    return report


def size_vs_fps_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """Delivered fps of padded frames over an 8 Mbps downlink."""
    report = SuiteReport("size-vs-fps", ("size_bytes", "fps", "sent_frames", "delivered_frames", "packets"))
    downlink = config.network.downlink
    link = LinkConfig(downlink.one_way_delay_ms, downlink.jitter_ms, downlink.loss_prob, SWEEP_BANDWIDTH_BPS,
                      seed=config.seed)
    rows = sweep_frame_size_vs_fps(link, SWEEP_SIZES, config.build_trajectory(), config.transport.payload_capacity,
                                   config.transport.max_backlog_ms, config.transport.expiry_ms)
    for row in rows:
        report.rows.append((row.size_bytes, row.fps, row.sent_frames, row.delivered_frames, row.packets_per_frame))
    report.write(directory)
    sizes = [r.size_bytes for r in rows]
    fps = [r.fps for r in rows]
    plot_series({"delivered": (sizes, fps)}, str(_svg(report, directory)), "frame size (bytes)", "fps",
                "Frame size vs. fps", scatter=True)

    monotone = all(b <= a for a, b in zip(fps, fps[1:]))
    report.check("fps non-increasing in size", monotone, " ".join(f"{v:.2f}" for v in fps))
    slope, intercept, r2 = linear_fit(sizes, fps)
    report.check("linear fit", r2 >= MIN_SWEEP_R2, f"R^2 {r2:.3f}, slope {slope:.3g} fps/byte")
    return report


def _save_ao_png(factor: np.ndarray, filepath: Path) -> None:
    Image.fromarray(np.floor(np.clip(factor, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)).save(filepath)


def ao_params_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """Scene occlusion over hemisphere radius and filtered AO over ray count."""
    report = SuiteReport("ao-params", ("parameter", "value", "mean_occlusion_factor"))
    images = directory / "ao_params"
    images.mkdir(parents=True, exist_ok=True)

    camera = config.build_camera(scene)
    pose = config.build_trajectory().pose(0)
    frame_scene = scene.animated(config.animations(), pose.frame_id)
    gbuffer = rasterize(frame_scene, camera, pose)
    valid = gbuffer.valid
    sampler = SamplerState(config.seed, 0)
    by_radius = []
    for radius in AO_RADII:
        factor = trace_ao(gbuffer, frame_scene, config.ao.rays, radius, sampler).occlusion_factor()
        by_radius.append(float(factor[valid].mean()))
        report.rows.append(("radius", radius, by_radius[-1]))
        path = images / f"radius_{radius:g}.png"
        _save_ao_png(factor, path)
        report.files.append(path)

    static = derive(config, {"trajectory.kind": "static", "trajectory.ticks": STATIC_AO_FRAMES,
                             "shadows.mode": "none", "ao.enabled": True, "remote.enabled": False})
    trajectory = static.build_trajectory()
    filtered = {}
    for rays in AO_RAY_COUNTS:
        server = RenderServer(derive(static, {"ao.rays": rays}), scene, camera)
        for tick in range(trajectory.ticks):
            frame = server.render(trajectory.pose(tick))
        factor = frame.ao.occlusion_factor()
        filtered[rays] = factor
        report.rows.append(("rays", rays, float(factor[frame.gbuffer.valid].mean())))
        path = images / f"rays_{rays}.png"
        _save_ao_png(factor, path)
        report.files.append(path)
    report.write(directory)

    plot_series({"radius": (AO_RADII, by_radius)}, str(_svg(report, directory, "_radius")), "radius",
                "mean AO factor", "AO factor vs. hemisphere radius")
    plot_series({"rays": (AO_RAY_COUNTS, [r[2] for r in report.rows if r[0] == "rays"])},
                str(_svg(report, directory, "_rays")), "rays per pixel", "mean AO factor",
                f"Filtered AO after {trajectory.ticks} static frames")

    occlusion = [1.0 - v for v in by_radius]
    report.check("occlusion non-decreasing in radius", all(b >= a for a, b in zip(occlusion, occlusion[1:])),
                 " ".join(f"{v:.4f}" for v in occlusion))
    gap = float(np.abs(filtered[32] - filtered[64]).mean())
    report.check("32 vs. 64 rays", gap <= MAX_RAY_COUNT_GAP, f"mean |O32 - O64| {gap:.4f} <= {MAX_RAY_COUNT_GAP}")
    return report


def frame_metrics_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """Per-pass payload, packets, fps and frame time for each pass configuration."""
    report = SuiteReport("frame-metrics", ("config", "pass", "mean_compressed_bytes", "mean_packets",
                                           "delivered_fps", "mean_frame_time_ms"))
    payloads: Dict[str, float] = {}
    ao_payloads: Dict[str, float] = {}
    for label, changes in FRAME_METRIC_RUNS:
        record = run_sim(derive(config, {"remote.enabled": False, **changes}), scene,
                         name=f"frame_metrics_{label}").record
        passes = sorted({r.pass_name for r in record.rows})
        payloads[label] = 0.0
        for pass_name in passes:
            summary = record.pass_summary(pass_name)
            report.rows.append((label, pass_name, summary["mean_compressed_bytes"], summary["mean_packets"],
                                summary["delivered_fps"], summary["mean_frame_time_ms"]))
            if pass_name in HYBRID_PASSES:
                payloads[label] += summary["mean_compressed_bytes"]
            if pass_name == "ao":
                ao_payloads[label] = summary["mean_compressed_bytes"]
        if not passes:
            report.rows.append((label, "-", 0.0, 0.0, 0.0, 0.0))
    report.write(directory)
    plot_bars(payloads, str(_svg(report, directory)), "hybrid payload per frame (bytes)", "Payload per configuration")

    report.check("hard <= hard+ao payload", payloads["hard"] <= payloads["hard+ao"],
                 f"{payloads['hard']:.0f} vs. {payloads['hard+ao']:.0f} bytes")
    report.check("filtered AO compresses at least as well as raw", ao_payloads["soft+ao"] <= ao_payloads["soft+raw-ao"],
                 f"{ao_payloads['soft+ao']:.0f} vs. {ao_payloads['soft+raw-ao']:.0f} bytes")
    return report


def trace_replay_suite(config: Config, scene: Scene, directory: Path) -> SuiteReport:
    """SSIM with a replayed low-latency uplink trace against a constant 200 ms delay."""
    report = SuiteReport("trace-replay", ("run", "mean_ssim", "fps"))
    trace_path = config.network.trace
    if not trace_path:
        trace_path = str(directory / "latency_trace.txt")
        save_latency_trace(lognormal_trace(TRACE_LENGTH, seed=config.seed), trace_path)
        report.files.append(Path(trace_path))
    reference = _reference_frames(config, scene)
    runs = (
        ("trace", {"network.trace": trace_path, "network.trace_direction": "uplink",
                   "network.uplink.one_way_delay_ms": 0.0}),
        ("delay200", {"network.trace": None, "network.uplink.one_way_delay_ms": 200.0}),
    )
    records = {}
    for label, changes in runs:
        run_config = derive(config, {"remote.enabled": False, "prediction.enabled": True, **changes})
        records[label] = run_sim(run_config, scene, reference, name=f"trace_replay_{label}").record
        report.rows.append((label, records[label].mean_ssim, records[label].fps))
    report.write(directory)
    plot_series({label: (list(range(len(r.ssim_values))), r.ssim_values) for label, r in records.items()},
                str(_svg(report, directory)), "frame", "SSIM", "Per-frame SSIM vs. zero-latency render")

    trace_ssim = records["trace"].mean_ssim
    slow_ssim = records["delay200"].mean_ssim
    report.check("SSIM with trace", trace_ssim >= MIN_SSIM_LOW_LATENCY, f"{trace_ssim:.4f} >= {MIN_SSIM_LOW_LATENCY}")
    report.check("trace beats 200 ms", trace_ssim > slow_ssim, f"{trace_ssim:.4f} vs. {slow_ssim:.4f}")
    return report


SUITES: Dict[str, Callable[[Config, Scene, Path], SuiteReport]] = {
    "bandwidth": bandwidth_suite,
    "latency-sweep": latency_sweep_suite,
    "size-vs-fps": size_vs_fps_suite,
    "ao-params": ao_params_suite,
    "frame-metrics": frame_metrics_suite,
    "trace-replay": trace_replay_suite,
}


def run_suite(name: str, config: Config, output_dir: Optional[str] = None,
              scene: Optional[Scene] = None) -> SuiteReport:
    """
    Run one experiment suite.

    Args:
        name: one of SUITES
        config: base configuration every run is derived from
        output_dir: where tables and plots go, config.output.directory by default
        scene: prebuilt scene, built from the config when omitted

    Returns:
        SuiteReport with rows, checks and written files

    Raises:
        SuiteError: If the suite name is unknown
    """
    if name not in SUITES:
        raise SuiteError(f"Unknown suite '{name}'. Available: {', '.join(SUITES)}")
    directory = Path(output_dir or config.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    logger.info("running suite %s into %s", name, directory)
    return SUITES[name](config, scene or config.build_scene(), directory)
