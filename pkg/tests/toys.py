"""Small model and data builders shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
import torch

from seneva.encoder import EncoderConfig
from seneva.mixture import MixtureConfig
from seneva.model import DTYPE, MixtureModel, prepare_batch
from seneva.scene import AgentTrack, MapPolyline, Scene
from seneva.synthetic import GeneratorConfig, generate_dataset
from seneva.training import TrainConfig

# about 1 m per step so the toy loss stays O(10)
GRAD_GEN = GeneratorConfig(
    n_scenes=2,
    H=3,
    T=3,
    max_neighbors=1,
    step_seconds=0.5,
    mode_separation=1.0,
    speed_range=(2.0, 3.0),
    geometry_params={"fork_start": 0.5, "transition": 2.0},
)
TOY_ENCODER = EncoderConfig(d_model=16, subgraph_depth=1, n_levels=1, n_heads=2, max_vectors=5)


def toy_mixture(**kw) -> MixtureConfig:
    base = dict(K=2, d_v=2, d_x=8, T=3, H=3, mlp_hidden=8)
    base.update(kw)
    return MixtureConfig(**base)


def grad_toy(decoder_layers: int = 1, seed: int = 1):
    """(model, batch, train config) at gradient-check scale."""
    scenes = generate_dataset(GRAD_GEN)
    model = MixtureModel(toy_mixture(decoder_layers=decoder_layers), TOY_ENCODER, seed=seed)
    batch = prepare_batch(scenes, TOY_ENCODER, GRAD_GEN.H, GRAD_GEN.T, need_future=True)
    return model, batch, TrainConfig(n_mc=2)


def straight_scene(H: int = 2, T: int = 1, speed: float = 1.0, future_offset=(0.0, 0.0), n_neighbors: int = 0) -> Scene:
    """Target driving along +x, ending at the origin; one straight polyline."""
    states = np.array([[(i - H + 1) * speed, 0.0, 0.0, speed, 0.0] for i in range(H)])
    neighbors = [
        AgentTrack(f"n{j}", states + np.array([0.0, 3.0 * (j + 1), 0.0, 0.0, 0.0])) for j in range(n_neighbors)
    ]
    future = np.array([[speed * (t + 1), 0.0] for t in range(T)]) + np.asarray(future_offset)
    lane = MapPolyline.from_points(np.array([[-5.0, 0.0], [0.0, 0.0], [5.0, 0.0]]))
    return Scene(AgentTrack("target", states), neighbors, [lane], future)


def tiny_model(K: int = 2, d_v: int = 1, T: int = 1, H: int = 2, seed: int = 0, **kw) -> MixtureModel:
    enc = EncoderConfig(d_model=8, subgraph_depth=1, n_levels=1, n_heads=2, max_vectors=5)
    return MixtureModel(MixtureConfig(K=K, d_v=d_v, d_x=4, T=T, H=H, mlp_hidden=8, **kw), enc, seed=seed)


def perturb(model: torch.nn.Module, scale: float, seed: int) -> None:
    """Add ``scale``-sized Gaussian noise to every parameter."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def quantile_eps(n: int, shape=(), dtype=DTYPE) -> torch.Tensor:
    """Midpoint normal quantiles: a deterministic rule for E[f(eps)]."""
    u = (torch.arange(n, dtype=dtype) + 0.5) / n
    e = math.sqrt(2.0) * torch.erfinv(2.0 * u - 1.0)
    return e.reshape(n, *([1] * len(shape))).expand(n, *shape).clone()


def set_prior(nets, k, init_mean, init_log_std, step_log_std, drift=0.0):
    """Input-independent prior for component ``k``: the step-1 Gaussian is
    fixed and each later step is ``N(v_prev + drift, exp(step_log_std)^2)``."""
    dv = nets.cfg.d_v
    with torch.no_grad():
        out = nets.prior_init["out"]
        out.weight[k].zero_()
        out.bias[k, :dv] = torch.as_tensor(init_mean, dtype=DTYPE)
        out.bias[k, dv:] = init_log_std
        rec = nets.prior_recur["out"]
        rec.weight[k].zero_()
        rec.bias[k, :dv] = drift
        rec.bias[k, dv:] = step_log_std


def set_posterior(nets, mean, log_std):
    """Posterior steps independent of everything: ``N(mean, exp(log_std)^2)``."""
    dv = nets.cfg.d_v
    with torch.no_grad():
        head = nets.posterior["out"]
        head.weight.zero_()
        head.bias[:dv] = mean
        head.bias[dv:] = log_std


def set_decoder(nets, mean_weight, mean_bias, log_diag, offdiag=0.0):
    """Linear decoder (``decoder_layers=0``) with mean ``W v + b`` and a
    constant Cholesky factor."""
    lin = nets.decoder[-1]
    dv = nets.cfg.d_v
    with torch.no_grad():
        lin.weight.zero_()
        lin.weight[0:2, :dv] = torch.as_tensor(mean_weight, dtype=DTYPE)
        lin.bias[0:2] = torch.as_tensor(mean_bias, dtype=DTYPE)
        lin.bias[2:4] = torch.as_tensor(log_diag, dtype=DTYPE)
        lin.bias[4] = offdiag
