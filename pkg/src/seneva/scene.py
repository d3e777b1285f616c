"""Scene types, target-centric normalization and the scene file format.

Scene file layout (JSON lines, UTF-8, one record per line):

    line 1   {"record": "header", "format": "seneva-scenes", "version": 1,
              "H": int, "T": int, "step_seconds": float, "n_scenes": int}
    line 2+  {"record": "scene", "index": int,
              "target":    {"agent_id": str, "n_states": H,
                            "states": [[x, y, heading, vx, vy], ...]},
              "neighbors": {"count": n, "tracks": [<track>, ...]},
              "map":       {"count": p, "polylines":
                            [{"n_vectors": m,
                              "vectors": [[hx, hy, tx, ty], ...]}, ...]},
              "future":    null | {"n_points": T, "points": [[x, y], ...]},
              "meta":      {"geometry": str, "ood": bool,
                            "mode": int | null, "params": {str: float}}}

Every list carries its length explicitly and the reader checks it.  Units are
meters, radians and meters per second.  Keys are written in the order above,
floats with ``repr`` precision, so writing is byte-deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from seneva.errors import InvalidInput, SceneFileError

FORMAT_NAME = "seneva-scenes"
FORMAT_VERSION = 1
CHAIN_TOL = 1e-6


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]."""
    r = np.remainder(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    r = np.where(r <= -np.pi, r + 2.0 * np.pi, r)
    if np.ndim(r) == 0:
        return float(r)
    return r


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class MotionState:
    x: float
    y: float
    heading: float
    vx: float
    vy: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.heading, self.vx, self.vy)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInput(f"non-finite motion state {vals}")
        if not -math.pi < self.heading <= math.pi:
            raise InvalidInput(f"heading {self.heading} outside (-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.vx, self.vy])


@dataclass
class AgentTrack:
    """History of one agent; ``states`` is an ``(H, 5)`` array of
    ``[x, y, heading, vx, vy]`` rows at uniform time steps."""

    agent_id: str
    states: np.ndarray

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != 5:
            raise InvalidInput(f"track {self.agent_id!r}: states must be (H, 5), got {self.states.shape}")
        if len(self.states) == 0:
            raise InvalidInput(f"track {self.agent_id!r}: empty track")
        if not np.all(np.isfinite(self.states)):
            raise InvalidInput(f"track {self.agent_id!r}: non-finite states")
        h = self.states[:, 2]
        if np.any(h <= -np.pi) or np.any(h > np.pi):
            raise InvalidInput(f"track {self.agent_id!r}: heading outside (-pi, pi]")

    @classmethod
    def from_states(cls, agent_id: str, states: Sequence[MotionState]) -> "AgentTrack":
        return cls(agent_id, np.stack([s.as_array() for s in states]))

    def __len__(self) -> int:
        return len(self.states)

    def state(self, i: int) -> MotionState:
        return MotionState(*(float(v) for v in self.states[i]))

    @property
    def last(self) -> MotionState:
        return self.state(-1)


@dataclass
class MapPolyline:
    """Chained vectors ``(N, 4)``: each row is ``[head_x, head_y, tail_x, tail_y]``."""

    vectors: np.ndarray
    check_chain: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 4:
            raise InvalidInput(f"polyline vectors must be (N, 4), got {self.vectors.shape}")
        if len(self.vectors) == 0:
            raise InvalidInput("polyline has no vectors")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInput("polyline has non-finite coordinates")
        if self.check_chain and len(self.vectors) > 1:
            gap = np.abs(self.vectors[:-1, 2:] - self.vectors[1:, :2]).max()
            if gap > CHAIN_TOL:
                raise InvalidInput(f"polyline vectors do not chain (gap {gap:.3g} m)")

    @classmethod
    def from_points(cls, points) -> "MapPolyline":
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) < 2:
            raise InvalidInput("need at least two points to form a polyline")
        return cls(np.concatenate([pts[:-1], pts[1:]], axis=1))

    def __len__(self) -> int:
        return len(self.vectors)

    def split(self, max_vectors: int) -> list["MapPolyline"]:
        """Split into consecutive chunks of at most ``max_vectors`` vectors."""
        if max_vectors < 1:
            raise InvalidInput("max_vectors must be >= 1")
        return [
            MapPolyline(self.vectors[i : i + max_vectors], check_chain=False)
            for i in range(0, len(self.vectors), max_vectors)
        ]


@dataclass
class SceneMeta:
    geometry: str = "unknown"
    ood: bool = False
    mode: int | None = None
    params: dict[str, float] = field(default_factory=dict)


@dataclass
class Scene:
    target: AgentTrack
    neighbors: list[AgentTrack] = field(default_factory=list)
    map: list[MapPolyline] = field(default_factory=list)
    future: np.ndarray | None = None
    meta: SceneMeta = field(default_factory=SceneMeta)

    def __post_init__(self) -> None:
        if self.future is not None:
            self.future = np.asarray(self.future, dtype=np.float64)
            if self.future.ndim != 2 or self.future.shape[1] != 2:
                raise InvalidInput(f"future must be (T, 2), got {self.future.shape}")
            if not np.all(np.isfinite(self.future)):
                raise InvalidInput("future has non-finite points")

    @property
    def history_length(self) -> int:
        return len(self.target)

    def validate(self, H: int, T: int | None = None) -> None:
        """Check horizon invariants; ``T`` is only checked when a future is present."""
        if len(self.target) != H:
            raise InvalidInput(f"target track length {len(self.target)} != H={H}")
        for nb in self.neighbors:
            if len(nb) != H:
                raise InvalidInput(f"neighbor {nb.agent_id!r} track length {len(nb)} != H={H}")
        if self.future is not None and T is not None and len(self.future) != T:
            raise InvalidInput(f"future length {len(self.future)} != T={T}")


@dataclass(frozen=True)
class Pose2:
    """Target frame: world origin of the frame and its heading."""

    origin: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0

    def __post_init__(self) -> None:
        if not -math.pi < self.heading <= math.pi:
            raise InvalidInput(f"pose heading {self.heading} outside (-pi, pi]")

    @property
    def is_identity(self) -> bool:
        return self.origin == (0.0, 0.0) and self.heading == 0.0


# --------------------------------------------------------------------------
# rigid transforms


def _transform_points(points: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - shift) @ rot


def _transform_track(track: AgentTrack, theta: float, origin: np.ndarray) -> AgentTrack:
    # row vectors: p' = R(-theta) (p - o)  ==  (p - o) @ R(theta)
    rot = _rot(theta)
    s = track.states.copy()
    s[:, 0:2] = _transform_points(s[:, 0:2], rot, origin)
    s[:, 3:5] = s[:, 3:5] @ rot
    s[:, 2] = wrap_angle(s[:, 2] - theta)
    return AgentTrack(track.agent_id, s)


def transform_scene(scene: Scene, pose: Pose2) -> Scene:
    """Express ``scene`` in the frame described by ``pose``."""
    origin = np.asarray(pose.origin, dtype=np.float64)
    theta = pose.heading
    rot = _rot(theta)
    polylines = []
    for pl in scene.map:
        v = pl.vectors
        heads = _transform_points(v[:, 0:2], rot, origin)
        tails = _transform_points(v[:, 2:4], rot, origin)
        polylines.append(MapPolyline(np.concatenate([heads, tails], axis=1), check_chain=pl.check_chain))
    future = None if scene.future is None else _transform_points(scene.future, rot, origin)
    return Scene(
        target=_transform_track(scene.target, theta, origin),
        neighbors=[_transform_track(n, theta, origin) for n in scene.neighbors],
        map=polylines,
        future=future,
        meta=scene.meta,
    )


def to_target_frame(scene: Scene) -> tuple[Scene, Pose2]:
    """Move the scene so that the target's last state sits at the origin
    heading along +x.  The heading field (not the velocity) defines the
    frame, so stationary targets normalize deterministically."""
    if len(scene.target) == 0:
        raise InvalidInput("empty target track")
    last = scene.target.states[-1]
    pose = Pose2((float(last[0]), float(last[1])), float(last[2]))
    if pose.is_identity:
        return scene, pose
    return transform_scene(scene, pose), pose


def from_target_frame(points, pose: Pose2) -> np.ndarray:
    """Map target-frame points (``(..., 2)``) back to the world frame."""
    pts = np.asarray(points, dtype=np.float64)
    if pose.is_identity:
        return pts.copy()
    rot = _rot(pose.heading)
    return pts @ rot.T + np.asarray(pose.origin)


def positions_to_displacements(positions, anchor=(0.0, 0.0)) -> np.ndarray:
    """Per-step displacements with ``positions[-1]`` replaced by ``anchor``."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or len(pos) < 1:
        raise InvalidInput("positions must be a non-empty (T, 2) array")
    prev = np.concatenate([np.asarray(anchor, dtype=np.float64)[None], pos[:-1]], axis=0)
    return pos - prev


def displacements_to_positions(displacements, anchor=(0.0, 0.0)) -> np.ndarray:
    return np.asarray(anchor, dtype=np.float64) + np.cumsum(np.asarray(displacements, dtype=np.float64), axis=0)


# --------------------------------------------------------------------------
# scene files


@dataclass(frozen=True)
class SceneFileHeader:
    H: int
    T: int
    step_seconds: float


def _track_record(track: AgentTrack) -> dict:
    return {"agent_id": track.agent_id, "n_states": len(track), "states": track.states.tolist()}


def scene_to_record(scene: Scene, index: int) -> dict:
    return {
        "record": "scene",
        "index": index,
        "target": _track_record(scene.target),
        "neighbors": {"count": len(scene.neighbors), "tracks": [_track_record(n) for n in scene.neighbors]},
        "map": {
            "count": len(scene.map),
            "polylines": [{"n_vectors": len(p), "vectors": p.vectors.tolist()} for p in scene.map],
        },
        "future": None
        if scene.future is None
        else {"n_points": len(scene.future), "points": scene.future.tolist()},
        "meta": {
            "geometry": scene.meta.geometry,
            "ood": bool(scene.meta.ood),
            "mode": scene.meta.mode,
            "params": {k: float(v) for k, v in scene.meta.params.items()},
        },
    }


def save_scene_file(path, scenes: Iterable[Scene], header: SceneFileHeader) -> None:
    scenes = list(scenes)
    lines = [
        json.dumps(
            {
                "record": "header",
                "format": FORMAT_NAME,
                "version": FORMAT_VERSION,
                "H": header.H,
                "T": header.T,
                "step_seconds": header.step_seconds,
                "n_scenes": len(scenes),
            }
        )
    ]
    for i, sc in enumerate(scenes):
        sc.validate(header.H, header.T)
        lines.append(json.dumps(scene_to_record(sc, i)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _need(rec: dict, key: str, line: int):
    if key not in rec:
        raise SceneFileError(f"missing field {key!r}", line)
    return rec[key]


def _parse_track(rec: dict, where: str, H: int, line: int) -> AgentTrack:
    n = _need(rec, "n_states", line)
    states = _need(rec, "states", line)
    if len(states) != n:
        raise SceneFileError(f"{where}.states: declared n_states={n} but found {len(states)}", line)
    if n != H:
        raise SceneFileError(f"{where}.n_states={n} differs from header H={H}", line)
    try:
        return AgentTrack(str(_need(rec, "agent_id", line)), np.asarray(states, dtype=np.float64))
    except (InvalidInput, ValueError) as exc:
        raise SceneFileError(f"{where}: {exc}", line) from exc


def record_to_scene(rec: dict, header: SceneFileHeader, line: int) -> Scene:
    target = _parse_track(_need(rec, "target", line), "target", header.H, line)
    nb = _need(rec, "neighbors", line)
    tracks = _need(nb, "tracks", line)
    if len(tracks) != _need(nb, "count", line):
        raise SceneFileError(f"neighbors: declared count={nb['count']} but found {len(tracks)}", line)
    neighbors = [_parse_track(t, f"neighbors[{i}]", header.H, line) for i, t in enumerate(tracks)]
    mp = _need(rec, "map", line)
    pls = _need(mp, "polylines", line)
    if len(pls) != _need(mp, "count", line):
        raise SceneFileError(f"map: declared count={mp['count']} but found {len(pls)}", line)
    polylines = []
    for i, p in enumerate(pls):
        vecs = _need(p, "vectors", line)
        if len(vecs) != _need(p, "n_vectors", line):
            raise SceneFileError(f"map.polylines[{i}]: declared n_vectors={p['n_vectors']} but found {len(vecs)}", line)
        try:
            polylines.append(MapPolyline(np.asarray(vecs, dtype=np.float64)))
        except (InvalidInput, ValueError) as exc:
            raise SceneFileError(f"map.polylines[{i}]: {exc}", line) from exc
    fut = rec.get("future")
    future = None
    if fut is not None:
        pts = _need(fut, "points", line)
        n = _need(fut, "n_points", line)
        if len(pts) != n:
            raise SceneFileError(f"future: declared n_points={n} but found {len(pts)}", line)
        if n != header.T:
            raise SceneFileError(f"future length {n} differs from header T={header.T}", line)
        future = np.asarray(pts, dtype=np.float64)
    m = rec.get("meta") or {}
    meta = SceneMeta(
        geometry=str(m.get("geometry", "unknown")),
        ood=bool(m.get("ood", False)),
        mode=m.get("mode"),
        params={k: float(v) for k, v in (m.get("params") or {}).items()},
    )
    try:
        return Scene(target, neighbors, polylines, future, meta)
    except InvalidInput as exc:
        raise SceneFileError(str(exc), line) from exc


def load_scene_file(path) -> tuple[list[Scene], SceneFileHeader]:
    """Parse a scene file; returns the scenes and the header (H, T, step)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise SceneFileError("empty file (no header record)", 1)
    records = []
    for no, ln in lines:
        try:
            records.append((no, json.loads(ln)))
        except json.JSONDecodeError as exc:
            raise SceneFileError(f"malformed JSON: {exc.msg}", no) from exc
    no, head = records[0]
    if head.get("record") != "header" or head.get("format") != FORMAT_NAME:
        raise SceneFileError("first record must be a seneva-scenes header", no)
    if head.get("version") != FORMAT_VERSION:
        raise SceneFileError(f"unsupported format version {head.get('version')}", no)
    header = SceneFileHeader(int(_need(head, "H", no)), int(_need(head, "T", no)), float(_need(head, "step_seconds", no)))
    if header.H < 1 or header.T < 1 or header.step_seconds <= 0:
        raise SceneFileError("header H, T must be >= 1 and step_seconds > 0", no)
    scenes = []
    for no, rec in records[1:]:
        if rec.get("record") != "scene":
            raise SceneFileError(f"unexpected record type {rec.get('record')!r}", no)
        scenes.append(record_to_scene(rec, header, no))
    declared = head.get("n_scenes")
    if declared is not None and declared != len(scenes):
        raise SceneFileError(f"header declares n_scenes={declared} but file has {len(scenes)}", records[0][0])
    return scenes, header
