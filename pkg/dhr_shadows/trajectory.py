"""
Scripted camera trajectories.

A trajectory is a list of keyframes on an integer tick axis. Positions are
interpolated linearly and orientations by spherical interpolation, so every
tick maps to exactly one CameraPose whose frame_id is the tick.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .gbuffer import CameraPose
from .scene import look_at_rotation

DEFAULT_TICKS = 300
DEFAULT_TICK_RATE = 60.0

# Standard box-room fly-through: eye positions as fractions of the run, all
# looking at the room's centre.
STANDARD_TARGET = (0.0, 1.0, -1.5)
STANDARD_PATH = (
    (0.0, (-2.5, 2.0, 3.6)),
    (1.0 / 3.0, (0.0, 2.2, 3.0)),
    (2.0 / 3.0, (2.5, 1.8, 2.2)),
    (1.0, (1.0, 1.6, 1.2)),
)

# Orientation rows (right, up, forward) form a left-handed basis; negating
# forward gives a proper rotation for interpolation.
_HANDEDNESS = np.diag([1.0, 1.0, -1.0])


@dataclass(frozen=True)
class Keyframe:
    tick: int
    position: Tuple[float, float, float]
    target: Tuple[float, float, float]

    def to_dict(self) -> Dict:
        return {"tick": self.tick, "position": list(self.position), "target": list(self.target)}


class Trajectory:
    """
    Camera path over ticks.

    Attributes:
        keyframes: keyframes with strictly increasing ticks
        tick_rate: ticks per second of virtual time
        ticks: number of ticks in a run (0 .. ticks - 1)
    """

    def __init__(self, keyframes: Sequence[Keyframe], tick_rate: float = DEFAULT_TICK_RATE,
                 ticks: int = None):
        if not keyframes:
            raise ValueError("a trajectory needs at least one keyframe")
        ticks_seen = [k.tick for k in keyframes]
        if any(b <= a for a, b in zip(ticks_seen, ticks_seen[1:])):
            raise ValueError(f"keyframe ticks must be strictly increasing, got {ticks_seen}")
        if tick_rate <= 0:
            raise ValueError(f"tick_rate must be positive, got {tick_rate}")
        self.keyframes = list(keyframes)
        self.tick_rate = float(tick_rate)
        self.ticks = int(ticks if ticks is not None else keyframes[-1].tick + 1)
        if self.ticks < 1:
            raise ValueError(f"ticks must be >= 1, got {self.ticks}")

        self._key_ticks = np.array(ticks_seen, dtype=np.float64)
        self._positions = np.array([k.position for k in keyframes], dtype=np.float64)
        matrices = [(_HANDEDNESS @ look_at_rotation(k.position, k.target)).T for k in keyframes]
        self._slerp = Slerp(self._key_ticks, Rotation.from_matrix(matrices)) if len(keyframes) > 1 else None
        self._first = matrices[0]

    @property
    def tick_ms(self) -> float:
        return 1000.0 / self.tick_rate

    @property
    def duration_s(self) -> float:
        return self.ticks / self.tick_rate

    def time_ms(self, tick: int) -> float:
        return tick * self.tick_ms

    def pose(self, tick: int) -> CameraPose:
        """Pose at `tick`, clamped to the first/last keyframe outside their range."""
        t = float(np.clip(tick, self._key_ticks[0], self._key_ticks[-1]))
        position = np.array([np.interp(t, self._key_ticks, self._positions[:, axis]) for axis in range(3)])
        if self._slerp is None:
            matrix = self._first
        else:
            matrix = self._slerp([t]).as_matrix()[0]
        return CameraPose(tick, position, _HANDEDNESS @ matrix.T)

    def poses(self) -> List[CameraPose]:
        return [self.pose(tick) for tick in range(self.ticks)]

    def to_dict(self) -> Dict:
        return {"tick_rate": self.tick_rate, "ticks": self.ticks,
                "keyframes": [k.to_dict() for k in self.keyframes]}

    @classmethod
    def from_dict(cls, data: Dict) -> "Trajectory":
        keyframes = [Keyframe(int(k["tick"]), tuple(k["position"]), tuple(k["target"])) for k in data["keyframes"]]
        return cls(keyframes, data.get("tick_rate", DEFAULT_TICK_RATE), data.get("ticks"))


def standard_trajectory(ticks: int = DEFAULT_TICKS, tick_rate: float = DEFAULT_TICK_RATE) -> Trajectory:
    """The box-room fly-through used by every benchmark suite."""
    last = max(ticks - 1, 1)
    keyframes = []
    for fraction, position in STANDARD_PATH:
        tick = int(round(fraction * last))
        # Very short runs collapse neighbouring keyframes onto one tick.
        if not keyframes or tick > keyframes[-1].tick:
            keyframes.append(Keyframe(tick, position, STANDARD_TARGET))
    return Trajectory(keyframes, tick_rate, ticks)


def static_trajectory(position, target, ticks: int = DEFAULT_TICKS,
                      tick_rate: float = DEFAULT_TICK_RATE) -> Trajectory:
    """A camera that never moves."""
    return Trajectory([Keyframe(0, tuple(map(float, position)), tuple(map(float, target)))], tick_rate, ticks)
