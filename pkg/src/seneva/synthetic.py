"""Deterministic multimodal toy scenes.

Three road geometries are available, each drawn in a local frame where the
target's last observed state sits at the origin heading along +x:

* ``fork``: a straight approach that splits into 2 or 3 parallel branches.
* ``arc_choice``: a roundabout-like circle of radius ``radius``; the agent
  either keeps circling (left), exits along a mirrored arc (right), or, with
  three modes, leaves along the tangent.
* ``merge``: an on-ramp; the agent merges into the main lane at speed, keeps
  the ramp while braking to half speed, or (three modes) merges while
  braking.

All modes share the approach, so the history cannot disambiguate them.  Each
scene is placed in the world with a random rigid transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from seneva.errors import InvalidConfig
from seneva.scene import AgentTrack, MapPolyline, Pose2, Scene, SceneMeta, transform_scene, wrap_angle

GEOMETRIES = ("fork", "arc_choice", "merge")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "fork": {"fork_start": 2.0, "transition": 12.0},
    "arc_choice": {"radius": 20.0},
    "merge": {"lane_offset": 3.5, "merge_length": 15.0},
}

# parameter overrides used for the OOD split when none are configured
DEFAULT_OOD: dict[str, dict[str, float]] = {
    "fork": {"transition": 6.0},
    "arc_choice": {"radius": 30.0},
    "merge": {"lane_offset": 5.0},
}

# extra lateral margin on fork branches so cluster centroids clear the
# requested separation even with noise
FORK_MARGIN = 1.1
LANE_SPACING = 2.0
WORLD_SHIFT = 50.0


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_scenes: int = 1000
    H: int = 6
    T: int = 15
    step_seconds: float = 0.2
    geometry: str = "fork"
    mode_count: int = 2
    mode_separation: float = 8.0
    speed_range: tuple[float, float] = (6.0, 10.0)
    noise_std: float = 0.05
    max_neighbors: int = 2
    geometry_params: dict[str, float] = field(default_factory=dict)
    ood_params: dict[str, float] = field(default_factory=dict)

    def params(self) -> dict[str, float]:
        p = dict(DEFAULT_PARAMS[self.geometry])
        p.update(self.geometry_params)
        return p

    def ood_geometry(self) -> dict[str, float]:
        p = self.params()
        p.update(self.ood_params)
        return p

    def validate(self) -> None:
        if self.geometry not in GEOMETRIES:
            raise InvalidConfig(f"geometry must be one of {GEOMETRIES}, got {self.geometry!r}")
        if self.mode_count not in (2, 3):
            raise InvalidConfig("mode_count must be 2 or 3")
        if not self.mode_separation > 0:
            raise InvalidConfig("mode_separation must be > 0")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be >= 0")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise InvalidConfig(f"invalid speed_range {self.speed_range}")
        if self.n_scenes < 0 or self.H < 1 or self.T < 1 or self.step_seconds <= 0:
            raise InvalidConfig("n_scenes >= 0, H >= 1, T >= 1 and step_seconds > 0 required")
        if self.max_neighbors < 0:
            raise InvalidConfig("max_neighbors must be >= 0")
        known = set(DEFAULT_PARAMS[self.geometry])
        for name, group in (("geometry_params", self.geometry_params), ("ood_params", self.ood_params)):
            unknown = set(group) - known
            if unknown:
                raise InvalidConfig(f"{name}: unknown keys {sorted(unknown)} for geometry {self.geometry!r}")
        for params in (self.params(),) + ((self.ood_geometry(),) if self.ood_params else ()):
            gap = min_endpoint_separation(self, params)
            if gap < self.mode_separation:
                raise InvalidConfig(
                    f"geometry {self.geometry} {params} separates mode endpoints by only "
                    f"{gap:.2f} m < mode_separation={self.mode_separation}"
                )


# --------------------------------------------------------------------------
# canonical geometry (local frame)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _mode_speed_factor(geometry: str, mode: int) -> float:
    if geometry == "merge" and mode in (1, 2):
        return 0.5
    return 1.0


def _mode_curve(geometry: str, params: dict[str, float], mode: int, mode_count: int, sep: float, length: float):
    """Dense forward polyline (s >= 0) of one mode, starting at the origin."""
    if geometry == "fork":
        offsets = [-0.5, 0.5] if mode_count == 2 else [-1.0, 0.0, 1.0]
        off = offsets[mode] * sep * FORK_MARGIN
        x = np.linspace(0.0, length, int(length / 0.05) + 1)
        y = off * _smoothstep((x - params["fork_start"]) / params["transition"])
        return np.stack([x, y], axis=1)
    if geometry == "arc_choice":
        r = params["radius"]
        s = np.linspace(0.0, length, int(length / 0.05) + 1)
        if mode == 2:
            return np.stack([s, np.zeros_like(s)], axis=1)
        sign = 1.0 if mode == 0 else -1.0
        return np.stack([r * np.sin(s / r), sign * r * (1.0 - np.cos(s / r))], axis=1)
    if geometry == "merge":
        x = np.linspace(0.0, length, int(length / 0.05) + 1)
        if mode == 1:
            return np.stack([x, np.zeros_like(x)], axis=1)
        y = params["lane_offset"] * _smoothstep(x / params["merge_length"])
        return np.stack([x, y], axis=1)
    raise InvalidConfig(f"unknown geometry {geometry!r}")


def _approach_curve(geometry: str, params: dict[str, float], length: float):
    """Dense backward polyline (s <= 0) shared by all modes, ending at the origin."""
    s = np.linspace(-length, 0.0, int(length / 0.05) + 1)
    if geometry == "arc_choice":
        r = params["radius"]
        return np.stack([r * np.sin(s / r), r * (1.0 - np.cos(s / r))], axis=1)
    return np.stack([s, np.zeros_like(s)], axis=1)


def _resample(curve: np.ndarray, arc: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return np.stack([np.interp(arc, cum, curve[:, 0]), np.interp(arc, cum, curve[:, 1])], axis=1)


def canonical_future(cfg: GeneratorConfig, params: dict[str, float], mode: int, speed: float) -> np.ndarray:
    """Noise-free ``(T, 2)`` future of ``mode`` in the target frame."""
    ds = speed * _mode_speed_factor(cfg.geometry, mode) * cfg.step_seconds
    arc = ds * np.arange(1, cfg.T + 1)
    curve = _mode_curve(cfg.geometry, params, mode, cfg.mode_count, cfg.mode_separation, arc[-1] * 1.5 + 5.0)
    return _resample(curve, arc)


def canonical_history(cfg: GeneratorConfig, params: dict[str, float], speed: float) -> np.ndarray:
    """``(H, 5)`` history states ending at the origin with heading 0."""
    ds = speed * cfg.step_seconds
    length = ds * (cfg.H - 1) + 1.0
    curve = _approach_curve(cfg.geometry, params, length)
    # arc measured from the start of the approach curve
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    total = seg.sum()
    arc = total - ds * np.arange(cfg.H - 1, -1, -1)
    pos = _resample(curve, arc)
    if cfg.geometry == "arc_choice":
        heading = np.arctan2(pos[:, 0], params["radius"] - pos[:, 1])
    else:
        heading = np.zeros(cfg.H)
    pos[-1] = 0.0
    heading[-1] = 0.0
    vel = speed * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return np.concatenate([pos, heading[:, None], vel], axis=1)


def canonical_endpoints(cfg: GeneratorConfig, params: dict[str, float], speed: float) -> np.ndarray:
    return np.stack([canonical_future(cfg, params, m, speed)[-1] for m in range(cfg.mode_count)])


def min_endpoint_separation(cfg: GeneratorConfig, params: dict[str, float]) -> float:
    gaps = []
    for speed in np.linspace(cfg.speed_range[0], cfg.speed_range[1], 5):
        ends = canonical_endpoints(cfg, params, float(speed))
        for i in range(len(ends)):
            for j in range(i + 1, len(ends)):
                gaps.append(float(np.linalg.norm(ends[i] - ends[j])))
    return min(gaps)


def _lane_polylines(cfg: GeneratorConfig, params: dict[str, float]) -> list[MapPolyline]:
    reach = cfg.speed_range[1] * cfg.step_seconds * (cfg.T + cfg.H) + 10.0
    lanes = [_approach_curve(cfg.geometry, params, reach)]
    for m in range(cfg.mode_count):
        lanes.append(_mode_curve(cfg.geometry, params, m, cfg.mode_count, cfg.mode_separation, reach))
    polylines = []
    for lane in lanes:
        seg = np.linalg.norm(np.diff(lane, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        arc = np.linspace(0.0, cum[-1], max(2, int(round(cum[-1] / LANE_SPACING)) + 1))
        polylines.append(MapPolyline.from_points(_resample(lane, arc)))
    return polylines


def _neighbor(cfg: GeneratorConfig, rng: np.random.Generator, idx: int) -> AgentTrack:
    lateral = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 6.0)
    start = rng.uniform(-20.0, 20.0)
    speed = rng.uniform(*cfg.speed_range)
    t = np.arange(cfg.H) - (cfg.H - 1)
    x = start + speed * cfg.step_seconds * t
    y = np.full(cfg.H, lateral)
    zeros = np.zeros(cfg.H)
    return AgentTrack(f"nb{idx}", np.stack([x, y, zeros, np.full(cfg.H, speed), zeros], axis=1))


def _clipped_noise(rng: np.random.Generator, n: int, std: float) -> np.ndarray:
    # norm clipped at 2 std so per-step displacement noise stays below 4 std
    if std == 0:
        return np.zeros((n, 2))
    eps = rng.normal(0.0, std, size=(n, 2))
    norm = np.linalg.norm(eps, axis=1, keepdims=True)
    return eps * np.minimum(1.0, 2.0 * std / np.maximum(norm, 1e-300))


def _make_scene(cfg: GeneratorConfig, params: dict[str, float], mode: int, rng: np.random.Generator, ood: bool) -> Scene:
    speed = float(rng.uniform(*cfg.speed_range))
    history = canonical_history(cfg, params, speed)
    future = canonical_future(cfg, params, mode, speed) + _clipped_noise(rng, cfg.T, cfg.noise_std)
    n_nb = int(rng.integers(0, cfg.max_neighbors + 1))
    neighbors = [_neighbor(cfg, rng, i) for i in range(n_nb)]
    local = Scene(
        target=AgentTrack("target", history),
        neighbors=neighbors,
        map=_lane_polylines(cfg, params),
        future=future,
        meta=SceneMeta(cfg.geometry, ood, mode, dict(params)),
    )
    # place in the world: the inverse of a pose is the pose of the local frame
    theta = float(rng.uniform(-math.pi, math.pi))
    origin = rng.uniform(-WORLD_SHIFT, WORLD_SHIFT, size=2)
    c, s = math.cos(theta), math.sin(theta)
    inv_origin = -np.array([c * origin[0] + s * origin[1], -s * origin[0] + c * origin[1]])
    return transform_scene(local, Pose2(tuple(float(v) for v in inv_origin), wrap_angle(-theta)))


def _generate(cfg: GeneratorConfig, params: dict[str, float], split: int, ood: bool) -> list[Scene]:
    order_rng = np.random.default_rng([cfg.seed, split, 0])
    modes = order_rng.permutation(np.arange(cfg.n_scenes) % cfg.mode_count)
    return [
        _make_scene(cfg, params, int(modes[i]), np.random.default_rng([cfg.seed, split, 1, i]), ood)
        for i in range(cfg.n_scenes)
    ]


def generate_dataset(cfg: GeneratorConfig) -> list[Scene]:
    """In-distribution scenes, each following exactly one mode."""
    cfg.validate()
    return _generate(cfg, cfg.params(), split=0, ood=False)


def generate_ood_split(cfg: GeneratorConfig) -> list[Scene]:
    """Scenes with ``ood_params`` overriding the base geometry, tagged ood."""
    cfg.validate()
    base, ood = cfg.params(), cfg.ood_geometry()
    if not cfg.ood_params or ood == base:
        raise InvalidConfig("ood_params must change at least one geometry parameter")
    return _generate(cfg, ood, split=1, ood=True)


def split_counts(n_total: int, ood_frac: float) -> tuple[int, int]:
    if not 0.0 <= ood_frac < 1.0:
        raise InvalidConfig("ood_frac must lie in [0, 1)")
    n_ood = int(round(n_total * ood_frac))
    return n_total - n_ood, n_ood


def make_splits(cfg: GeneratorConfig, ood_frac: float) -> tuple[list[Scene], list[Scene]]:
    """Split ``cfg.n_scenes`` into ID and OOD sets according to ``ood_frac``."""
    n_id, n_ood = split_counts(cfg.n_scenes, ood_frac)
    id_scenes = generate_dataset(replace(cfg, n_scenes=n_id))
    ood_scenes = generate_ood_split(replace(cfg, n_scenes=n_ood)) if n_ood else []
    return id_scenes, ood_scenes
