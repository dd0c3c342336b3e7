"""
Metrics Module

This module provides the evaluation side of the renderer: SSIM on luma,
per-frame run records and their CSV form, bandwidth accounting from a
channel's delivery ledger, the frame-size vs. fps sweep and SVG plots.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from scipy import ndimage, stats

from .compose import FinalImage
from .errors import DimensionMismatchError
from .netsim import Delivery, LinkConfig, SimChannel
from .raytrace import AoBuffer
from .trajectory import Trajectory, standard_trajectory
from .transport import (PASS_AO, PASS_COLOR, PASS_NAMES, PASS_VISIBILITY, Datagram, FrameAssembler,
                        IdentityCodec, encode_frame, packetize)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("frame_id", "pass", "raw_bytes", "compressed_bytes", "packets", "delivered",
               "end_to_end_ms", "frame_time_ms")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
HYBRID_PASSES = (PASS_NAMES[PASS_VISIBILITY], PASS_NAMES[PASS_AO])
REMOTE_PASSES = (PASS_NAMES[PASS_COLOR],)


@dataclass(frozen=True)
class SsimParams:
    """Gaussian window (sigma 1.5, truncated to 11x11) with the usual stabilizing constants."""

    sigma: float = 1.5
    truncate: float = 3.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0

    def __post_init__(self):
        if min(self.sigma, self.truncate, self.k1, self.k2, self.data_range) <= 0:
            raise ValueError("SSIM constants must be positive")

    @property
    def radius(self) -> int:
        return int(self.truncate * self.sigma + 0.5)


def luma(image) -> np.ndarray:
    """Rec. 601 luma of an 8-bit RGB image (FinalImage or array), on the 0..255 scale."""
    rgb = image.rgb if isinstance(image, FinalImage) else np.asarray(image)
    if rgb.ndim == 2:
        return rgb.astype(np.float64)
    return rgb[..., :3].astype(np.float64) @ np.asarray(LUMA_WEIGHTS)


def ssim(a, b, params: Optional[SsimParams] = None) -> float:
    """
    Mean structural similarity between two images, computed on luma.

    Local statistics use a Gaussian window; the border where the window
    would leave the image is excluded from the mean.

    Raises:
        DimensionMismatchError: If the images differ in size
        ValueError: If the images are smaller than the window
    """
    params = params or SsimParams()
    x = luma(a)
    y = luma(b)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"cannot compare {x.shape} with {y.shape}")
    pad = params.radius
    if min(x.shape) <= 2 * pad:
        raise ValueError(f"images of {x.shape} are smaller than the {2 * pad + 1}px window")

    def blur(img):
        return ndimage.gaussian_filter(img, sigma=params.sigma, truncate=params.truncate, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    c1 = (params.k1 * params.data_range) ** 2
    c2 = (params.k2 * params.data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map[pad:-pad, pad:-pad].mean())


@dataclass
class FrameRow:
    """One frame of one pass as seen by the sender and, if it arrived, the client."""

    frame_id: int
    pass_name: str
    raw_bytes: int
    compressed_bytes: int
    packets: int
    delivered: bool = False
    end_to_end_ms: Optional[float] = None
    frame_time_ms: Optional[float] = None

    def to_csv_row(self) -> List[str]:
        def ms(value):
            return "" if value is None else f"{value:.3f}"
        return [str(self.frame_id), self.pass_name, str(self.raw_bytes), str(self.compressed_bytes),
                str(self.packets), "1" if self.delivered else "0", ms(self.end_to_end_ms), ms(self.frame_time_ms)]

    @classmethod
    def from_csv_row(cls, row: Mapping[str, str]) -> "FrameRow":
        def ms(value):
            return float(value) if value else None
        return cls(int(row["frame_id"]), row["pass"], int(row["raw_bytes"]), int(row["compressed_bytes"]),
                   int(row["packets"]), row["delivered"] == "1", ms(row["end_to_end_ms"]), ms(row["frame_time_ms"]))


@dataclass
class RunRecord:
    """
    Everything measured during one run.

    Attributes:
        name: run label
        rows: per-frame rows, one per (frame, pass) the server sent
        duration_s: virtual run length
        displayed_frames: frames the client composed
        ledger: downlink deliveries, tagged by pass name
        ssim_values: per-frame SSIM against a reference, when computed
    """

    name: str = "run"
    rows: List[FrameRow] = field(default_factory=list)
    duration_s: float = 0.0
    displayed_frames: int = 0
    ledger: List[Delivery] = field(default_factory=list)
    ssim_values: List[float] = field(default_factory=list)

    @property
    def fps(self) -> float:
        return self.displayed_frames / self.duration_s if self.duration_s > 0 else 0.0

    @property
    def mean_ssim(self) -> Optional[float]:
        return float(np.mean(self.ssim_values)) if self.ssim_values else None

    def rows_for(self, pass_name: str) -> List[FrameRow]:
        return [r for r in self.rows if r.pass_name == pass_name]

    def delivered_fps(self, pass_name: str) -> float:
        if self.duration_s <= 0:
            return 0.0
        return sum(r.delivered for r in self.rows_for(pass_name)) / self.duration_s

    def pass_summary(self, pass_name: str) -> Dict[str, float]:
        """Mean payload, packets and frame time per sent frame of one pass."""
        rows = self.rows_for(pass_name)
        times = [r.frame_time_ms for r in rows if r.frame_time_ms is not None]
        return {
            "frames": len(rows),
            "delivered": sum(r.delivered for r in rows),
            "mean_compressed_bytes": float(np.mean([r.compressed_bytes for r in rows])) if rows else 0.0,
            "mean_packets": float(np.mean([r.packets for r in rows])) if rows else 0.0,
            "delivered_fps": self.delivered_fps(pass_name),
            "mean_frame_time_ms": float(np.mean(times)) if times else 0.0,
        }

    def write_csv(self, filepath: str) -> None:
        """Write the per-frame rows with the fixed column order."""
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(row.to_csv_row())

    @classmethod
    def read_csv(cls, filepath: str, name: Optional[str] = None) -> "RunRecord":
        """
        Reload rows written by write_csv. Virtual duration is not stored and
        is left at 0.

        Raises:
            FileNotFoundError: If the CSV doesn't exist
            ValueError: If the header is not the run-record header
        """
        try:
            with open(filepath, "r", newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                    raise ValueError(f"{filepath}: not a run record (columns {reader.fieldnames})")
                rows = [FrameRow.from_csv_row(row) for row in reader]
        except FileNotFoundError:
            raise FileNotFoundError(f"Run record file '{filepath}' not found.") from None
        return cls(name or Path(filepath).stem, rows)


def measure_bandwidth(record: RunRecord, window_s: Optional[float] = None) -> Dict[str, float]:
    """
    Delivered bits per second per pass, plus hybrid, remote and total sums.

    Args:
        record: a completed run; its ledger is the only source of byte counts
        window_s: averaging window, the run's duration by default

    Raises:
        ValueError: If the window is not positive
    """
    window_s = record.duration_s if window_s is None else window_s
    if not window_s or window_s <= 0:
        raise ValueError(f"bandwidth window must be positive, got {window_s}")
    per_tag: Dict[str, int] = {}
    for delivery in record.ledger:
        tag = delivery.tag or "untagged"
        per_tag[tag] = per_tag.get(tag, 0) + delivery.size
    out = {tag: total * 8.0 / window_s for tag, total in sorted(per_tag.items())}
    out["hybrid"] = sum(out.get(p, 0.0) for p in HYBRID_PASSES)
    out["remote"] = sum(out.get(p, 0.0) for p in REMOTE_PASSES)
    out["total"] = sum(total for total in per_tag.values()) * 8.0 / window_s
    return out


@dataclass(frozen=True)
class SweepRow:
    size_bytes: int
    fps: float
    sent_frames: int
    delivered_frames: int
    packets_per_frame: int


def sweep_frame_size_vs_fps(link: LinkConfig, sizes: Sequence[int], trajectory: Optional[Trajectory] = None,
                            payload_capacity: int = 1200, max_backlog_ms: Optional[float] = None,
                            expiry_ms: float = 250.0) -> List[SweepRow]:
    """
    Delivered fps of padded frames of each size over a bandwidth-capped link.

    Each tick of the trajectory the sender offers one identity-coded frame of
    `size` bytes, skipping the tick while the link backlog exceeds
    `max_backlog_ms` (one tick by default). Delivered fps counts frames the
    receiver completed within the run.

    Raises:
        ValueError: If the link has no bandwidth cap
    """
    if link.bandwidth_bps is None:
        raise ValueError("frame-size sweep needs a bandwidth-capped link")
    trajectory = trajectory or standard_trajectory()
    backlog_limit = trajectory.tick_ms if max_backlog_ms is None else max_backlog_ms
    codec = IdentityCodec()
    end_ms = trajectory.ticks * trajectory.tick_ms
    rows = []
    for size in sizes:
        channel = SimChannel(link, name=f"sweep-{size}")
        assembler = FrameAssembler(expiry_ms)
        sent = delivered = packets = 0
        for tick in range(trajectory.ticks):
            now = trajectory.time_ms(tick)
            for data in channel.poll(now):
                if assembler.ingest(Datagram.from_bytes(data), now) is not None:
                    delivered += 1
            if channel.backlog_ms(now) > backlog_limit:
                continue
            frame = AoBuffer(np.zeros((1, size), dtype=np.uint8), 1, 1.0, trajectory.pose(tick))
            header, payload = encode_frame(frame, codec, payload_capacity)
            datagrams = packetize(header, payload, payload_capacity)
            for datagram in datagrams:
                channel.send(datagram.to_bytes(), now, tag=PASS_NAMES[PASS_AO])
            sent += 1
            packets = len(datagrams)
        for data in channel.poll(end_ms):
            if assembler.ingest(Datagram.from_bytes(data), end_ms) is not None:
                delivered += 1
        fps = delivered / trajectory.duration_s
        logger.info("sweep size %d: %d/%d frames delivered, %.1f fps", size, delivered, sent, fps)
        rows.append(SweepRow(int(size), fps, sent, delivered, packets))
    return rows


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares line through (xs, ys): (slope, intercept, R^2)."""
    result = stats.linregress(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    return float(result.slope), float(result.intercept), float(result.rvalue ** 2)


def write_table(rows: Sequence[Sequence], columns: Sequence[str], filepath: str) -> None:
    """Write a generic summary table (suite outputs) as CSV."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def plot_series(series: Mapping[str, Tuple[Sequence[float], Sequence[float]]], filepath: str,
                xlabel: str, ylabel: str, title: str = "", scatter: bool = False) -> None:
    """
    Save an SVG line (or scatter) plot with one series per configuration.

    The SVG carries no date and a fixed hash salt, so reruns are byte-identical.
    """
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "dhr-shadows", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for label, (xs, ys) in series.items():
            if scatter:
                ax.scatter(xs, ys, label=label, s=16)
            else:
                ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_reports(record: RunRecord, directory: str) -> List[Path]:
    """
    Write a run's CSV and an SVG of per-pass end-to-end latency.

    Returns:
        Paths written
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{record.name}.csv"
    svg_path = out / f"{record.name}_latency.svg"
    record.write_csv(str(csv_path))
    series = {}
    for pass_name in sorted({r.pass_name for r in record.rows}):
        delivered = [r for r in record.rows_for(pass_name) if r.delivered and r.end_to_end_ms is not None]
        series[pass_name] = ([r.frame_id for r in delivered], [r.end_to_end_ms for r in delivered])
    plot_series(series, str(svg_path), "frame", "end-to-end latency (ms)", record.name)
    return [csv_path, svg_path]


def plot_bars(values: Mapping[str, float], filepath: str, ylabel: str, title: str = "") -> None:
    """Save an SVG bar chart, one bar per label in insertion order."""
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "dhr-shadows", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        labels = list(values)
        ax.bar(range(len(labels)), [values[k] for k in labels])
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
