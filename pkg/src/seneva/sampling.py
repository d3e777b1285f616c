"""Destination sampling: cumulative endpoint Gaussians, a dense candidate
grid, greedy circular NMS and backward completion of intermediate waypoints.

Geometry here is plain numpy in the target frame; only
:func:`endpoint_distributions` touches the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from seneva.errors import InvalidInput, NumericalFailure
from seneva.model import MixtureModel, prepare_batch
from seneva.scene import Scene, from_target_frame

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EndpointDistribution:
    """Cumulative position Gaussians of the selected components.

    ``means[c, t]`` and ``covs[c, t]`` describe the position after ``t + 1``
    steps as the sum of the decoded per-step displacement Gaussians.
    """

    means: np.ndarray  # (C, T, 2)
    covs: np.ndarray  # (C, T, 2, 2)
    weights: np.ndarray  # (C,), sums to 1
    components: np.ndarray  # (C,), indices into the model's K components

    @classmethod
    def from_steps(cls, step_means, step_covs, weights, components=None) -> "EndpointDistribution":
        step_means = np.asarray(step_means, dtype=float)
        step_covs = np.asarray(step_covs, dtype=float)
        w = np.asarray(weights, dtype=float)
        if components is None:
            components = np.arange(len(w))
        return cls(np.cumsum(step_means, axis=1), np.cumsum(step_covs, axis=1), w / w.sum(), np.asarray(components))

    @property
    def T(self) -> int:
        return self.means.shape[1]

    def log_density(self, points: np.ndarray, t: int = -1) -> np.ndarray:
        """Per-component ``log(w_c N(p; mean_ct, cov_ct))`` -> ``(C, P)``."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.log(self.weights)[:, None] + gaussian2_log_pdf(pts[None], self.means[:, t, None], self.covs[:, t, None])

    def density(self, points: np.ndarray, t: int = -1) -> np.ndarray:
        ld = self.log_density(points, t)
        m = ld.max(0)
        return np.exp(m) * np.exp(ld - m).sum(0)


def gaussian2_log_pdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Bivariate normal log-density with broadcasting over leading axes."""
    a, b, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * d - b * b
    dx = x[..., 0] - mean[..., 0]
    dy = x[..., 1] - mean[..., 1]
    maha = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -LOG_2PI - 0.5 * np.log(det) - 0.5 * maha


@torch.no_grad()
def endpoint_distributions(model: MixtureModel, x: torch.Tensor, top_c: int = 6) -> list[EndpointDistribution]:
    """Endpoint mixtures for a batch of context features ``(B, d_x)``.

    The top ``top_c`` components by assignment weight are rolled forward
    along their mean latent paths; decoded step Gaussians are summed.
    """
    K = model.mixture_cfg.K
    if not 1 <= top_c <= K:
        raise InvalidInput(f"top_c={top_c} must lie in [1, K={K}]")
    nets = model.nets
    _, pi = nets.assignment_forward(x)
    _, v = nets.prior_rollout(x, feed="mean")  # (B, K, T, d_v)
    dec = nets.decode_step(v, x[:, None, None, :])
    mu = dec.mean.numpy()
    cov = dec.covariance.numpy()
    pi = pi.numpy()
    out = []
    for b in range(x.shape[0]):
        # stable order: weight descending, then component index
        sel = np.lexsort((np.arange(K), -pi[b]))[:top_c]
        out.append(EndpointDistribution.from_steps(mu[b, sel], cov[b, sel], pi[b, sel], sel))
    return out


def endpoint_distribution(model: MixtureModel, x: torch.Tensor, top_c: int = 6) -> EndpointDistribution:
    """Single-scene form of :func:`endpoint_distributions` (``x``: ``(d_x,)``)."""
    return endpoint_distributions(model, x.reshape(1, -1), top_c)[0]


# --------------------------------------------------------------------------
# candidates


@dataclass(frozen=True)
class Candidate:
    position: tuple[float, float]
    score: float


@dataclass
class Candidates:
    """Array form of a candidate list."""

    positions: np.ndarray  # (G, 2)
    scores: np.ndarray  # (G,)

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self):
        for p, s in zip(self.positions, self.scores):
            yield Candidate((float(p[0]), float(p[1])), float(s))

    @classmethod
    def from_list(cls, cands: Iterable[Candidate]) -> "Candidates":
        cands = list(cands)
        pos = np.array([c.position for c in cands], dtype=float).reshape(-1, 2)
        return cls(pos, np.array([c.score for c in cands], dtype=float))


def grid_axis(lo: float, hi: float, resolution: float) -> np.ndarray:
    """Points spaced by ``resolution`` covering ``[lo, hi]``, centred on the interval."""
    n = int(math.ceil((hi - lo) / resolution - 1e-9)) + 1
    return 0.5 * (lo + hi) + resolution * (np.arange(n) - 0.5 * (n - 1))


def dense_grid(dist: EndpointDistribution, resolution: float = 0.5, n_sigma: float = 2.0) -> Candidates:
    """Grid over the union of ``mean +- n_sigma * std`` boxes (final step),
    each point scored by the endpoint mixture density."""
    if resolution <= 0:
        raise InvalidInput("resolution must be > 0")
    mean = dist.means[:, -1]
    std = np.sqrt(np.diagonal(dist.covs[:, -1], axis1=-2, axis2=-1))
    lo = (mean - n_sigma * std).min(0)
    hi = (mean + n_sigma * std).max(0)
    gx, gy = grid_axis(lo[0], hi[0], resolution), grid_axis(lo[1], hi[1], resolution)
    xx, yy = np.meshgrid(gx, gy, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], -1)
    return Candidates(pts, dist.density(pts))


def circle_iou(a, b, r: float):
    """Area IoU of two radius-``r`` circles centred at ``a`` and ``b``.

    ``a``/``b`` may be arrays of points ``(..., 2)``; broadcasting applies.
    """
    if r <= 0:
        raise InvalidInput("radius must be > 0")
    d = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), axis=-1)
    dc = np.minimum(d, 2.0 * r)
    inter = 2.0 * r * r * np.arccos(dc / (2.0 * r)) - 0.5 * dc * np.sqrt(np.maximum(4.0 * r * r - dc * dc, 0.0))
    iou = inter / (2.0 * math.pi * r * r - inter)
    iou = np.where(d >= 2.0 * r, 0.0, np.where(d == 0.0, 1.0, np.clip(iou, 0.0, 1.0)))
    return float(iou) if iou.ndim == 0 else iou


def nms_order(positions: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Score descending; ties by lower x, then lower y."""
    return np.lexsort((positions[:, 1], positions[:, 0], -scores))


def nms_select(
    candidates: Candidates | Sequence[Candidate],
    r: float = 1.4,
    iou_threshold: float = 0.0,
    M: int = 6,
) -> list[Candidate]:
    """Greedy destination sampling.

    Repeatedly emits the best remaining candidate and drops every remaining
    candidate whose circle IoU with it is strictly above ``iou_threshold``.
    Stops after ``M`` picks or when candidates run out.
    """
    if not isinstance(candidates, Candidates):
        candidates = Candidates.from_list(candidates)
    if len(candidates) == 0:
        raise InvalidInput("nms_select needs at least one candidate")
    if M < 1:
        raise InvalidInput("M must be >= 1")
    order = nms_order(candidates.positions, candidates.scores)
    pos = candidates.positions[order]
    scores = candidates.scores[order]
    alive = np.ones(len(order), dtype=bool)
    picked: list[Candidate] = []
    i = 0
    while len(picked) < M:
        while i < len(order) and not alive[i]:
            i += 1
        if i >= len(order):
            break
        picked.append(Candidate((float(pos[i, 0]), float(pos[i, 1])), float(scores[i])))
        alive[i] = False
        rest = np.flatnonzero(alive)
        if len(rest):
            alive[rest[circle_iou(pos[rest], pos[i], r) > iou_threshold]] = False
    return picked


# --------------------------------------------------------------------------
# completion


def complete_trajectory(candidate, dist: EndpointDistribution, c: int) -> np.ndarray:
    """Waypoints ``(T, 2)`` ending at ``candidate`` for selected component ``c``.

    The candidate's whitened offset ``u = L_T^{-1} (y - mean_T)`` is shared by
    every step: ``y_t = mean_t + L_t u``.  ``L`` is the lower Cholesky factor.
    """
    y = np.asarray(candidate.position if isinstance(candidate, Candidate) else candidate, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidInput("candidate position is not finite")
    try:
        L = np.linalg.cholesky(dist.covs[c])  # (T, 2, 2)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("endpoint covariance is not positive definite") from exc
    u = np.linalg.solve(L[-1], y - dist.means[c, -1])
    path = dist.means[c] + L @ u
    path[-1] = y
    return path


def best_component(dist: EndpointDistribution, point) -> int:
    """Selected-component index with the largest weighted density at ``point``."""
    return int(np.argmax(dist.log_density(np.asarray(point, dtype=float))[:, 0]))


# --------------------------------------------------------------------------
# end-to-end


@dataclass
class PredictionSet:
    trajectories: np.ndarray  # (M, T, 2), world frame
    scores: np.ndarray  # (M,)
    component_of: np.ndarray  # (M,), model component indices
    exhausted: bool = False  # fewer than M candidates survived

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class SamplerConfig:
    M: int = 6
    radius: float = 1.4
    iou_threshold: float = 0.0
    resolution: float = 0.5
    n_sigma: float = 2.0
    top_c: int = 6

    def validate(self) -> None:
        if self.M < 1 or self.top_c < 1:
            raise InvalidInput("M and top_c must be >= 1")
        if self.radius <= 0 or self.resolution <= 0 or self.n_sigma <= 0:
            raise InvalidInput("radius, resolution and n_sigma must be > 0")
        if not 0.0 <= self.iou_threshold < 1.0:
            raise InvalidInput("iou_threshold must lie in [0, 1)")


def sample_from_distribution(dist: EndpointDistribution, cfg: SamplerConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Grid, NMS and completion in the target frame."""
    picks = nms_select(dense_grid(dist, cfg.resolution, cfg.n_sigma), cfg.radius, cfg.iou_threshold, cfg.M)
    trajs, scores, comps = [], [], []
    for cand in picks:
        c = best_component(dist, cand.position)
        trajs.append(complete_trajectory(cand, dist, c))
        scores.append(cand.score)
        comps.append(int(dist.components[c]))
    return np.stack(trajs), np.array(scores), np.array(comps), len(picks) < cfg.M


@torch.no_grad()
def predict(scenes: list[Scene], model: MixtureModel, cfg: SamplerConfig | None = None, chunk: int = 256) -> list[PredictionSet]:
    """Predict ``M`` world-frame trajectories for each scene."""
    cfg = cfg or SamplerConfig()
    cfg.validate()
    mc = model.mixture_cfg
    top_c = min(cfg.top_c, mc.K)
    out: list[PredictionSet] = []
    for lo in range(0, len(scenes), chunk):
        part = scenes[lo : lo + chunk]
        batch = prepare_batch(part, model.encoder_cfg, mc.H, mc.T)
        x = model(batch.enc)
        for dist, pose in zip(endpoint_distributions(model, x, top_c), batch.poses):
            trajs, scores, comps, exhausted = sample_from_distribution(dist, cfg)
            world = from_target_frame(trajs.reshape(-1, 2), pose).reshape(trajs.shape)
            out.append(PredictionSet(world, scores, comps, exhausted))
    return out


def predict_top_m(scene: Scene, model: MixtureModel, M: int = 6, r: float = 1.4, iou_threshold: float = 0.0, resolution: float = 0.5) -> PredictionSet:
    """Single-scene prediction with the usual sampling knobs."""
    return predict([scene], model, SamplerConfig(M=M, radius=r, iou_threshold=iou_threshold, resolution=resolution))[0]
