"""
Pipeline Module

This module provides the two ends of the distributed renderer and the loops
that drive them:

    RenderServer  traces shadows and AO for the latest camera pose, filters,
                  encodes and sends the passes
    ThinClient    rasterizes locally, reassembles server frames, predicts
                  late buffers by reprojection and composes the final image

run_sim interleaves both on one virtual clock over simulated links,
run_local skips transport entirely, run_reference renders a high-sample
oracle, and serve/run_client do the same over real UDP sockets.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .compose import FinalImage, compose_final, reproject_server_buffer, shade
from .config import Config
from .denoise import ShadowPlaneFilter, SvgfFilter
from .errors import DecodeError
from .gbuffer import CameraPose, GBuffer, compute_motion, rasterize
from .metrics import FrameRow, RunRecord, measure_bandwidth, ssim
from .netsim import Delivery, SimChannel, UdpChannel
from .raytrace import (AoBuffer, VisibilityBuffer, reference_ao, reference_visibility, trace_ao,
                       trace_visibility)
from .sampling import SamplerState
from .scene import Camera, Scene
from .transport import (PASS_AO, PASS_COLOR, PASS_NAMES, PASS_VISIBILITY, CameraMessage, Datagram,
                        FrameAssembler, decode_frame, encode_frame, packetize)

logger = logging.getLogger(__name__)

# Client G-buffers kept for validating reprojection of stale frames.
_RETAINED_GBUFFERS = 64


@dataclass
class ServerFrame:
    """Everything the server produced for one camera pose."""

    gbuffer: GBuffer
    visibility: Optional[VisibilityBuffer] = None
    ao: Optional[AoBuffer] = None
    color: Optional[FinalImage] = None

    def passes(self) -> List[Tuple[int, object]]:
        out = []
        if self.visibility is not None:
            out.append((PASS_VISIBILITY, self.visibility))
        if self.ao is not None:
            out.append((PASS_AO, self.ao))
        if self.color is not None:
            out.append((PASS_COLOR, self.color))
        return out


@dataclass
class EncodedPass:
    pass_id: int
    frame_id: int
    raw_bytes: int
    compressed_bytes: int
    datagrams: List[Datagram]

    @property
    def name(self) -> str:
        return PASS_NAMES[self.pass_id]


class RenderServer:
    """
    Server side: one render per new camera pose.

    The AO filter (and the optional shadow-plane filter) keeps history across
    frames, so frames must be rendered in pose order.
    """

    def __init__(self, config: Config, scene: Scene, camera: Camera):
        self.config = config
        self.scene = scene
        self.camera = camera
        self.animations = config.animations()
        self.codec = config.codec()
        self.ao_filter = SvgfFilter(config.filter_params()) if config.filter.enabled else None
        self.shadow_filter = ShadowPlaneFilter(config.filter_params()) if config.shadows.filter else None
        self.latest: Optional[CameraMessage] = None
        self.last_rendered: Optional[int] = None
        self._prev_pose: Optional[CameraPose] = None

    def receive(self, message: CameraMessage) -> None:
        """Keep the newest camera message; older or repeated ones are ignored."""
        if self.latest is None or message.frame_id > self.latest.frame_id:
            self.latest = message

    def pending_pose(self) -> Optional[CameraPose]:
        """Pose of the newest camera message not rendered yet."""
        if self.latest is None or self.latest.frame_id == self.last_rendered:
            return None
        return self.latest.pose

    def render(self, pose: CameraPose) -> ServerFrame:
        started = time.perf_counter()
        scene = self.scene.animated(self.animations, pose.frame_id)
        gbuffer = compute_motion(rasterize(scene, self.camera, pose), self._prev_pose or pose)
        sampler = SamplerState(self.config.seed, pose.frame_id)
        frame = ServerFrame(gbuffer)
        if self.config.shadows.mode != "none":
            frame.visibility = trace_visibility(gbuffer, scene, mode=self.config.shadows.mode, sampler=sampler)
            if self.shadow_filter is not None:
                frame.visibility = self.shadow_filter.filter(frame.visibility, gbuffer)
        if self.config.ao.enabled:
            frame.ao = trace_ao(gbuffer, scene, self.config.ao.rays, self.config.ao.radius, sampler)
            if self.ao_filter is not None:
                frame.ao = self.ao_filter.filter(frame.ao, gbuffer)
        if self.config.remote.enabled:
            frame.color = compose_final(gbuffer, frame.visibility, frame.ao, scene.lights,
                                        self.config.shading_params())
        self._prev_pose = pose
        self.last_rendered = pose.frame_id
        logger.debug("server rendered frame %d in %.0f ms", pose.frame_id, (time.perf_counter() - started) * 1e3)
        return frame

    def encode(self, frame: ServerFrame) -> List[EncodedPass]:
        capacity = self.config.transport.payload_capacity
        out = []
        for pass_id, buffer in frame.passes():
            header, payload = encode_frame(buffer, self.codec, capacity)
            out.append(EncodedPass(pass_id, header.frame_id, header.raw_size, header.compressed_size,
                                   packetize(header, payload, capacity)))
        return out


class ThinClient:
    """
    Client side: local rasterization plus the freshest server buffers.

    Received buffers are kept per pass; composition reprojects them into the
    current view when prediction is on, or uses them as they are otherwise.
    """

    def __init__(self, config: Config, scene: Scene, camera: Camera):
        self.config = config
        self.scene = scene
        self.camera = camera
        self.animations = config.animations()
        self.shading = config.shading_params()
        self.assembler = FrameAssembler(config.transport.expiry_ms)
        self.latest: Dict[int, object] = {}
        self.request_times: Dict[int, float] = {}
        self.gbuffers: "OrderedDict[int, GBuffer]" = OrderedDict()
        self.last_completion: Dict[int, float] = {}
        self.stale_drops = 0

    def camera_message(self, pose: CameraPose, now: float) -> CameraMessage:
        expiry = self.config.transport.expiry_ms
        self.request_times = {fid: t for fid, t in self.request_times.items() if now - t < expiry}
        self.request_times[pose.frame_id] = now
        return CameraMessage(pose.frame_id, pose, int(now))

    def rasterize(self, pose: CameraPose) -> GBuffer:
        scene = self.scene.animated(self.animations, pose.frame_id)
        gbuffer = rasterize(scene, self.camera, pose)
        self.gbuffers[pose.frame_id] = gbuffer
        while len(self.gbuffers) > _RETAINED_GBUFFERS:
            self.gbuffers.popitem(last=False)
        return gbuffer

    def accept(self, pass_id: int, buffer) -> bool:
        """Adopt a decoded buffer if it is newer than the one held for its pass."""
        held = self.latest.get(pass_id)
        if held is not None and held.frame_id >= buffer.frame_id:
            return False
        self.latest[pass_id] = buffer
        return True

    def ingest(self, data: bytes, now: float) -> List[Tuple[int, int, float, Optional[float]]]:
        """
        Feed one datagram.

        Returns:
            (pass_id, frame_id, end_to_end_ms, frame_time_ms) for every frame it completed
        """
        try:
            datagram = Datagram.from_bytes(data)
        except DecodeError as e:
            logger.warning("discarding malformed datagram: %s", e)
            return []
        completed = self.assembler.ingest(datagram, now)
        if completed is None:
            return []
        pass_id, frame_id = completed.key
        requested = self.request_times.get(frame_id)
        if requested is None or now - requested >= self.config.transport.expiry_ms:
            self.stale_drops += 1
            logger.debug("frame %d of %s arrived too long after its request", frame_id, PASS_NAMES[pass_id])
            return []
        try:
            buffer = decode_frame(completed.header, completed.payload)
        except DecodeError as e:
            logger.warning("dropping undecodable %s frame %d: %s", PASS_NAMES[pass_id], frame_id, e)
            return []
        self.accept(pass_id, buffer)
        previous = self.last_completion.get(pass_id)
        self.last_completion[pass_id] = now
        return [(pass_id, frame_id, now - requested, None if previous is None else now - previous)]

    def _predicted(self, pass_id: int, gbuffer: GBuffer):
        stale = self.latest.get(pass_id)
        if stale is None:
            return None
        if not self.config.prediction.enabled:
            return stale
        result = reproject_server_buffer(stale, gbuffer, self.gbuffers.get(stale.frame_id), self.shading)
        return result.buffer

    def compose(self, gbuffer: GBuffer) -> FinalImage:
        scene = self.scene.animated(self.animations, gbuffer.frame_id)
        return compose_final(gbuffer, self._predicted(PASS_VISIBILITY, gbuffer), self._predicted(PASS_AO, gbuffer),
                             scene.lights, self.shading)


@dataclass
class SimResult:
    """
    Attributes:
        record: per-frame rows, ledger and SSIM values
        frames: the client's composed frames (RGB uint8), one per tick
        remote_frames: color frames received from the remote baseline, by tick
    """

    record: RunRecord
    frames: List[np.ndarray] = field(default_factory=list)
    remote_frames: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def bandwidth(self) -> Dict[str, float]:
        return measure_bandwidth(self.record)


def _pass_tag(data: bytes) -> Optional[str]:
    try:
        return PASS_NAMES[Datagram.from_bytes(data).pass_id]
    except (DecodeError, KeyError):
        return None


def _setup(config: Config, scene: Optional[Scene]):
    scene = scene or config.build_scene()
    camera = config.build_camera(scene)
    return scene, camera, config.build_trajectory()


def _frame_dir(config: Config, name: str) -> Optional[Path]:
    if not config.output.save_frames:
        return None
    directory = Path(config.output.directory) / f"{name}_frames"
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _display(result: SimResult, image: FinalImage, tick: int, reference: Optional[Sequence[np.ndarray]],
             frame_dir: Optional[Path]) -> None:
    result.frames.append(image.rgb)
    result.record.displayed_frames += 1
    if reference is not None:
        result.record.ssim_values.append(ssim(image.rgb, reference[tick]))
    if frame_dir is not None:
        image.save_png(str(frame_dir / f"frame_{tick:05d}.png"))


def _backlog_limit(config: Config, channel: SimChannel, tick_ms: float) -> Optional[float]:
    """transport.max_backlog_ms, or one tick on a bandwidth-capped link."""
    if config.transport.max_backlog_ms is not None:
        return config.transport.max_backlog_ms
    return tick_ms if channel.config.bandwidth_bps is not None else None


def run_sim(config: Config, scene: Optional[Scene] = None, reference: Optional[Sequence[np.ndarray]] = None,
            name: str = "sim") -> SimResult:
    """
    Run server and client on one virtual clock over simulated links.

    Each tick the client sends its camera, the server renders the newest pose
    it has received and sends every pass (skipping passes while the downlink
    backlog exceeds transport.max_backlog_ms, one tick by default on a
    bandwidth-capped link), then the client reassembles
    what arrived and composes the frame for the current pose.

    Args:
        config: validated configuration
        scene: prebuilt scene, built from the config when omitted
        reference: frames to compute per-tick SSIM against
        name: label for the run record

    Returns:
        SimResult; identical inputs give identical results
    """
    scene, camera, trajectory = _setup(config, scene)
    server = RenderServer(config, scene, camera)
    client = ThinClient(config, scene, camera)
    uplink = SimChannel(config.link_config("uplink"), "uplink")
    downlink = SimChannel(config.link_config("downlink"), "downlink")
    remote = SimChannel(config.link_config("remote"), "remote") if config.remote.enabled else None
    backlog_limits = {name: _backlog_limit(config, channel, trajectory.tick_ms)
                      for name, channel in (("downlink", downlink), ("remote", remote)) if channel is not None}
    result = SimResult(RunRecord(name=name, duration_s=trajectory.duration_s))
    rows: Dict[Tuple[int, int], FrameRow] = {}
    frame_dir = _frame_dir(config, name)
    started = time.perf_counter()

    for tick in range(trajectory.ticks):
        now = trajectory.time_ms(tick)
        pose = trajectory.pose(tick)
        uplink.send(client.camera_message(pose, now).to_bytes(), now, tag="camera")

        for data in uplink.poll(now):
            server.receive(CameraMessage.from_bytes(data))
        server_pose = server.pending_pose()
        if server_pose is not None:
            for encoded in server.encode(server.render(server_pose)):
                channel = remote if encoded.pass_id == PASS_COLOR else downlink
                limit = backlog_limits[channel.name]
                if limit is not None and channel.backlog_ms(now) > limit:
                    logger.debug("skipping %s frame %d: link backlog %.1f ms", encoded.name, encoded.frame_id,
                                 channel.backlog_ms(now))
                    continue
                for datagram in encoded.datagrams:
                    channel.send(datagram.to_bytes(), now, tag=encoded.name)
                row = FrameRow(encoded.frame_id, encoded.name, encoded.raw_bytes, encoded.compressed_bytes,
                               len(encoded.datagrams))
                rows[(encoded.pass_id, encoded.frame_id)] = row
                result.record.rows.append(row)

        for channel in (downlink, remote):
            if channel is None:
                continue
            for data in channel.poll(now):
                for pass_id, frame_id, latency, frame_time in client.ingest(data, now):
                    row = rows[(pass_id, frame_id)]
                    row.delivered = True
                    row.end_to_end_ms = latency
                    row.frame_time_ms = frame_time
                    if pass_id == PASS_COLOR:
                        result.remote_frames[tick] = client.latest[PASS_COLOR].rgb

        image = client.compose(client.rasterize(pose))
        _display(result, image, tick, reference, frame_dir)

    result.record.ledger = sorted(downlink.deliveries + (remote.deliveries if remote else []))
    logger.info("%s: %d ticks, %d frames sent, %d dropped, %.1f s wall", name, trajectory.ticks,
                len(result.record.rows), client.assembler.dropped_count + client.stale_drops,
                time.perf_counter() - started)
    return result


def run_local(config: Config, scene: Optional[Scene] = None, reference: Optional[Sequence[np.ndarray]] = None,
              name: str = "local") -> SimResult:
    """
    The same renderer without transport: each tick's server buffers go
    straight to the client. Matches run_sim over a zero-latency lossless link.
    """
    scene, camera, trajectory = _setup(config, scene)
    server = RenderServer(config, scene, camera)
    client = ThinClient(config, scene, camera)
    result = SimResult(RunRecord(name=name, duration_s=trajectory.duration_s))
    frame_dir = _frame_dir(config, name)
    for tick in range(trajectory.ticks):
        pose = trajectory.pose(tick)
        frame = server.render(pose)
        for pass_id, buffer in frame.passes():
            client.accept(pass_id, buffer)
        image = client.compose(client.rasterize(pose))
        _display(result, image, tick, reference, frame_dir)
    return result


def run_reference(config: Config, spp: Optional[int] = None, scene: Optional[Scene] = None,
                  ticks: Optional[Sequence[int]] = None) -> List[FinalImage]:
    """
    Offline oracle: fractional area-light visibility and AO from `spp`
    samples per pixel, no transport and no filtering.

    With spp = 1 and the same seed this reproduces the server's unfiltered
    single-frame output.

    Raises:
        ValueError: If spp < 1
    """
    spp = config.output.reference_spp if spp is None else spp
    if spp < 1:
        raise ValueError(f"spp must be >= 1, got {spp}")
    scene, camera, trajectory = _setup(config, scene)
    animations = config.animations()
    shading = config.shading_params()
    images = []
    for tick in (range(trajectory.ticks) if ticks is None else ticks):
        pose = trajectory.pose(tick)
        frame_scene = scene.animated(animations, tick)
        gbuffer = rasterize(frame_scene, camera, pose)
        sampler = SamplerState(config.seed, tick)
        if config.shadows.mode == "none":
            visibility = np.ones(gbuffer.shape + (len(frame_scene.lights),))
        else:
            visibility = reference_visibility(gbuffer, frame_scene, config.shadows.mode, spp, sampler)
        if config.ao.enabled:
            occlusion = reference_ao(gbuffer, frame_scene, config.ao.rays, config.ao.radius, spp, sampler)
        else:
            occlusion = np.ones(gbuffer.shape)
        images.append(shade(gbuffer, visibility, occlusion, frame_scene.lights, shading))
    logger.info("reference: %d frames at %d spp", len(images), spp)
    return images


def serve(config: Config, max_frames: Optional[int] = None, idle_timeout_s: float = 10.0,
          scene: Optional[Scene] = None) -> int:
    """
    Serve camera requests over UDP until idle for `idle_timeout_s` or
    `max_frames` frames have been rendered.

    Returns:
        Number of frames rendered
    """
    scene = scene or config.build_scene()
    server = RenderServer(config, scene, config.build_camera(scene))
    rendered = 0
    with UdpChannel((config.network.host, config.network.server_port), name="server") as channel:
        last_activity = time.monotonic()
        while max_frames is None or rendered < max_frames:
            for data in channel.poll():
                try:
                    server.receive(CameraMessage.from_bytes(data))
                except DecodeError as e:
                    logger.warning("ignoring malformed camera message: %s", e)
                last_activity = time.monotonic()
            pose = server.pending_pose()
            if pose is None:
                if time.monotonic() - last_activity > idle_timeout_s:
                    logger.info("server idle for %.0f s, stopping", idle_timeout_s)
                    break
                time.sleep(0.001)
                continue
            for encoded in server.encode(server.render(pose)):
                for datagram in encoded.datagrams:
                    channel.send(datagram.to_bytes(), tag=encoded.name)
            rendered += 1
    return rendered


def run_client(config: Config, scene: Optional[Scene] = None, name: str = "client") -> SimResult:
    """
    Drive the trajectory in wall-clock time against a server started with serve().

    Timings in the record are wall-clock and therefore not reproducible.
    """
    scene, camera, trajectory = _setup(config, scene)
    client = ThinClient(config, scene, camera)
    result = SimResult(RunRecord(name=name, duration_s=trajectory.duration_s))
    frame_dir = _frame_dir(config, name)
    server_address = (config.network.host, config.network.server_port)
    with UdpChannel((config.network.host, config.network.client_port), remote=server_address,
                    name="client") as channel:
        start = UdpChannel.clock_ms()
        for tick in range(trajectory.ticks):
            deadline = start + trajectory.time_ms(tick)
            while UdpChannel.clock_ms() < deadline:
                time.sleep(0.0005)
            now = UdpChannel.clock_ms() - start
            pose = trajectory.pose(tick)
            channel.send(client.camera_message(pose, now).to_bytes())
            for data in channel.poll():
                result.record.ledger.append(Delivery(now, now, len(data), _pass_tag(data)))
                for pass_id, frame_id, latency, frame_time in client.ingest(data, now):
                    result.record.rows.append(FrameRow(frame_id, PASS_NAMES[pass_id], 0, 0, 0, True,
                                                       latency, frame_time))
            image = client.compose(client.rasterize(pose))
            _display(result, image, tick, None, frame_dir)
        result.record.duration_s = (UdpChannel.clock_ms() - start) / 1000.0
    return result
