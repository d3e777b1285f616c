"""Entropy-based uncertainty, ID/OOD comparison, displacement metrics and
log-density heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from seneva.errors import InvalidInput
from seneva.model import MixtureModel, prepare_batch
from seneva.sampling import EndpointDistribution, gaussian2_log_pdf
from seneva.scene import Pose2, Scene

LOG_2PI_E = math.log(2.0 * math.pi) + 1.0


# --------------------------------------------------------------------------
# entropy


def gaussian_entropy(chol, dim: int | None = None):
    """Differential entropy from a Cholesky factor ``(..., d, d)``.

    Uses only the log of the factor's diagonal:
    ``0.5 * d * log(2 pi e) + sum(log diag L)``.
    """
    t = torch.as_tensor(chol)
    d = dim or t.shape[-1]
    if t.shape[-1] != d or t.shape[-2] != d:
        raise InvalidInput(f"factor shape {tuple(t.shape[-2:])} does not match dim={d}")
    log_diag = torch.log(torch.diagonal(t, dim1=-2, dim2=-1))
    out = 0.5 * d * LOG_2PI_E + log_diag.sum(-1)
    return float(out) if out.ndim == 0 and not isinstance(chol, torch.Tensor) else out


@dataclass
class EntropyReport:
    term_s: float
    term_v: float
    term_z: float

    @property
    def total(self) -> float:
        return self.term_s + self.term_v + self.term_z


@torch.no_grad()
def total_entropy(model: MixtureModel, x: torch.Tensor, n_mc: int = 16, generator: torch.Generator | None = None) -> list[EntropyReport]:
    """Expected-entropy decomposition for a batch of context features.

    For each Monte-Carlo draw a component is picked uniformly and a latent
    path is sampled from its prior; the decoded-step and prior-step entropies
    along that path are summed over time.  The same draws (component and
    noise) are shared by every scene in the batch, so identical scenes get
    identical reports.
    """
    if n_mc < 1:
        raise InvalidInput("n_mc must be >= 1")
    mc = model.mixture_cfg
    nets = model.nets
    B, K, T, dv = x.shape[0], mc.K, mc.T, mc.d_v
    z = torch.randint(K, (n_mc,), generator=generator)
    eps = torch.randn(n_mc, T, dv, dtype=x.dtype, generator=generator)
    xr = x.unsqueeze(0).expand(n_mc, B, -1).reshape(n_mc * B, -1)
    eps_full = eps[:, None, None].expand(n_mc, B, K, T, dv).reshape(n_mc * B, K, T, dv)
    prior, v = nets.prior_rollout(xr, feed="sample", eps=eps_full)
    idx = z.repeat_interleave(B)
    rows = torch.arange(n_mc * B)
    v_k = v[rows, idx]  # (n_mc*B, T, dv)
    prior_log_std = prior.log_std[rows, idx]
    term_v = (prior_log_std.sum(-1) + 0.5 * dv * LOG_2PI_E).sum(-1)
    dec = nets.decode_step(v_k, xr.unsqueeze(1))
    term_s = (dec.log_diag.sum(-1) + LOG_2PI_E).sum(-1)
    term_s = term_s.view(n_mc, B).mean(0)
    term_v = term_v.view(n_mc, B).mean(0)
    term_z = math.log(K)
    return [EntropyReport(float(s), float(v_), term_z) for s, v_ in zip(term_s, term_v)]


@torch.no_grad()
def scene_entropies(model: MixtureModel, scenes: list[Scene], n_mc: int = 16, seed: int = 0, chunk: int = 256) -> list[EntropyReport]:
    """:func:`total_entropy` for raw scenes; every chunk reuses the seed's draws."""
    mc = model.mixture_cfg
    out: list[EntropyReport] = []
    for lo in range(0, len(scenes), chunk):
        batch = prepare_batch(scenes[lo : lo + chunk], model.encoder_cfg, mc.H, mc.T)
        gen = torch.Generator().manual_seed(seed)
        out.extend(total_entropy(model, model(batch.enc), n_mc, gen))
    return out


@dataclass
class EntropyGroup:
    geometry: str
    ood: bool
    n: int
    mean: float
    std: float


@dataclass
class OODReport:
    groups: list[EntropyGroup]
    change_percent: dict[str, float]  # per geometry, (OOD - ID) / |ID| * 100
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = ["geometry\tsplit\tn\tmean\tstd"]
        for g in self.groups:
            out.append(f"{g.geometry}\t{'OOD' if g.ood else 'ID'}\t{g.n}\t{g.mean:.6f}\t{g.std:.6f}")
        for geo, pct in self.change_percent.items():
            out.append(f"# {geo}: ID->OOD change {pct:+.3f}%")
        out.extend(f"# note: {n}" for n in self.notes)
        return out


def ood_report(scenes: list[Scene], model: MixtureModel, n_mc: int = 16, seed: int = 0) -> OODReport:
    """Mean and (population) standard deviation of total entropy per
    geometry and ID/OOD flag, plus the relative ID->OOD change."""
    totals = np.array([r.total for r in scene_entropies(model, scenes, n_mc, seed)])
    keys = [(s.meta.geometry, bool(s.meta.ood)) for s in scenes]
    geometries = sorted({g for g, _ in keys})
    groups, change, notes = [], {}, []
    for geo in geometries:
        stats = {}
        for flag in (False, True):
            vals = totals[[i for i, k in enumerate(keys) if k == (geo, flag)]]
            if len(vals) == 0:
                notes.append(f"{geo} has no {'OOD' if flag else 'ID'} scenes")
                continue
            stats[flag] = float(vals.mean())
            groups.append(EntropyGroup(geo, flag, len(vals), float(vals.mean()), float(vals.std())))
        if len(stats) == 2:
            change[geo] = 100.0 * (stats[True] - stats[False]) / abs(stats[False])
    return OODReport(groups, change, notes)


# --------------------------------------------------------------------------
# displacement metrics


def _check(preds, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.ndim != 3 or p.shape[0] < 1 or p.shape[2] != 2:
        raise InvalidInput(f"predictions must be (M>=1, T, 2), got {p.shape}")
    if g.shape != p.shape[1:]:
        raise InvalidInput(f"ground truth shape {g.shape} does not match predictions {p.shape[1:]}")
    return p, g


def min_ade(preds, gt) -> float:
    p, g = _check(preds, gt)
    return float(np.linalg.norm(p - g, axis=-1).mean(-1).min())


def min_fde(preds, gt) -> float:
    p, g = _check(preds, gt)
    return float(np.linalg.norm(p[:, -1] - g[-1], axis=-1).min())


def threshold_lon(speed: float) -> float:
    """Longitudinal miss threshold (m) as a function of speed (m/s)."""
    if speed < 1.4:
        return 1.0
    if speed <= 11.0:
        return 1.0 + (speed - 1.4) / (11.0 - 1.4)
    return 2.0


LATERAL_THRESHOLD = 1.0
ENDPOINT_RADIUS = 2.0


def miss_interaction(preds, gt, yaw: float, speed: float) -> bool:
    """Miss iff no endpoint is within the speed-dependent longitudinal and
    the 1 m lateral tolerance, measured in the frame of the final yaw."""
    p, g = _check(preds, gt)
    d = p[:, -1] - g[-1]
    c, s = math.cos(yaw), math.sin(yaw)
    lon = d[:, 0] * c + d[:, 1] * s
    lat = -d[:, 0] * s + d[:, 1] * c
    hit = (np.abs(lon) <= threshold_lon(speed)) & (np.abs(lat) <= LATERAL_THRESHOLD)
    return not bool(hit.any())


def miss_argoverse(preds, gt) -> bool:
    """Miss iff every endpoint is more than 2 m from the ground-truth endpoint."""
    p, g = _check(preds, gt)
    return bool((np.linalg.norm(p[:, -1] - g[-1], axis=-1) > ENDPOINT_RADIUS).all())


def final_yaw_speed(gt, step_seconds: float, anchor=None) -> tuple[float, float]:
    """Heading and speed at the last ground-truth step, from its final displacement."""
    g = np.asarray(gt, dtype=float)
    prev = g[-2] if len(g) > 1 else np.asarray(anchor if anchor is not None else g[-1], dtype=float)
    d = g[-1] - prev
    return math.atan2(d[1], d[0]), float(np.hypot(*d)) / step_seconds


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    n_scenes: int
    k_used: int
    mr_variant: str = "argoverse"

    def lines(self) -> list[str]:
        return [
            f"n_scenes={self.n_scenes}",
            f"k_used={self.k_used}",
            f"min_ade={self.min_ade:.6f}",
            f"min_fde={self.min_fde:.6f}",
            f"miss_rate={self.miss_rate:.6f}",
            f"mr_variant={self.mr_variant}",
        ]


def evaluate_predictions(
    predictions: list[np.ndarray],
    truths: list[np.ndarray],
    mr: str = "argoverse",
    step_seconds: float | None = None,
    anchors: list | None = None,
) -> MetricsReport:
    """Average minADE/minFDE and miss rate over scenes.

    ``anchors`` (the last observed positions) are only used by the
    INTERACTION-style rule when the future has a single step.
    """
    if len(predictions) != len(truths):
        raise InvalidInput("predictions and ground truths differ in count")
    if mr not in ("argoverse", "interaction"):
        raise InvalidInput(f"unknown miss-rate variant {mr!r}")
    if mr == "interaction" and step_seconds is None:
        raise InvalidInput("the interaction miss rate needs step_seconds")
    if not predictions:
        return MetricsReport(0.0, 0.0, 0.0, 0, 0, mr)
    ade, fde, miss = [], [], []
    for i, (p, g) in enumerate(zip(predictions, truths)):
        ade.append(min_ade(p, g))
        fde.append(min_fde(p, g))
        if mr == "argoverse":
            miss.append(miss_argoverse(p, g))
        else:
            yaw, speed = final_yaw_speed(g, step_seconds, None if anchors is None else anchors[i])
            miss.append(miss_interaction(p, g, yaw, speed))
    k_used = max(len(p) for p in predictions)
    return MetricsReport(float(np.mean(ade)), float(np.mean(fde)), float(np.mean(miss)), len(predictions), k_used, mr)


def constant_velocity(scene: Scene, T: int, step_seconds: float | None = None) -> np.ndarray:
    """Constant-velocity extrapolation ``(T, 2)`` of the target's last step."""
    s = scene.target.states
    if len(s) >= 2:
        step = s[-1, :2] - s[-2, :2]
    elif step_seconds is not None:
        step = s[-1, 3:5] * step_seconds
    else:
        raise InvalidInput("constant velocity needs two history states or step_seconds")
    return s[-1, :2] + np.arange(1, T + 1)[:, None] * step


# --------------------------------------------------------------------------
# heatmap


@dataclass
class Heatmap:
    region: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    resolution: float
    xs: np.ndarray  # cell centres (nx,)
    ys: np.ndarray  # cell centres (ny,)
    values: np.ndarray  # (ny, nx) log-density

    def lines(self) -> list[str]:
        x0, x1, y0, y1 = self.region
        out = [f"# region {x0!r} {x1!r} {y0!r} {y1!r} resolution {self.resolution!r} nx {len(self.xs)} ny {len(self.ys)}"]
        out.extend(",".join(repr(float(v)) for v in row) for row in self.values)
        return out


def cell_centres(lo: float, hi: float, resolution: float) -> np.ndarray:
    n = max(1, int(math.ceil((hi - lo) / resolution - 1e-9)))
    return lo + resolution * (np.arange(n) + 0.5)


def heatmap(dist: EndpointDistribution, region, resolution: float = 0.5, pose: Pose2 | None = None) -> Heatmap:
    """Log of the largest (over time) mixture density of the cumulative
    position Gaussians at each cell centre.

    With ``pose`` the region is in world coordinates; cell centres are mapped
    into the target frame before evaluation.
    """
    if resolution <= 0:
        raise InvalidInput("resolution must be > 0")
    x0, x1, y0, y1 = (float(v) for v in region)
    if not (x1 > x0 and y1 > y0):
        raise InvalidInput("heatmap region must have xmax > xmin and ymax > ymin")
    xs, ys = cell_centres(x0, x1, resolution), cell_centres(y0, y1, resolution)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], -1)
    if pose is not None:
        c, s = math.cos(pose.heading), math.sin(pose.heading)
        pts = (pts - np.asarray(pose.origin)) @ np.array([[c, -s], [s, c]])
    # (C, T, P) weighted log densities
    ld = np.log(dist.weights)[:, None, None] + gaussian2_log_pdf(pts[None, None], dist.means[:, :, None], dist.covs[:, :, None])
    m = ld.max(0)
    per_t = m + np.log(np.exp(ld - m).sum(0))
    return Heatmap((x0, x1, y0, y1), resolution, xs, ys, per_t.max(0).reshape(len(ys), len(xs)))


def auto_region(dist: EndpointDistribution, margin: float = 3.0) -> tuple[float, float, float, float]:
    """Target-frame box around all cumulative means, padded by 2 std and ``margin``."""
    std = np.sqrt(np.diagonal(dist.covs, axis1=-2, axis2=-1))
    lo = (dist.means - 2 * std).reshape(-1, 2).min(0)
    hi = (dist.means + 2 * std).reshape(-1, 2).max(0)
    lo = np.minimum(lo, 0.0) - margin
    hi = np.maximum(hi, 0.0) + margin
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])
