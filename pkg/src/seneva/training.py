"""Variational objective, assignment loss and the optimization loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from seneva.checkpoint import Checkpoint, TrainState, checkpoint_from_model, model_from_checkpoint
from seneva.encoder import EncoderConfig
from seneva.errors import InfiniteDivergence, InvalidConfig, InvalidInput, NumericalFailure
from seneva.mixture import GaussianDiag, MixtureConfig, responsibilities, target_weights
from seneva.model import DTYPE, MixtureModel, SceneBatch, prepare_batch
from seneva.scene import Scene

log = logging.getLogger(__name__)

FOCAL_LOG_FLOOR = -30.0


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-4
    decay_step: int = 5
    decay_rate: float = 0.3
    alpha: float = 1.0
    gamma_focal: float = 2.0
    n_mc: int = 4
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 0.0  # max global grad norm; 0 disables

    def validate(self) -> None:
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        for name in ("batch_size", "decay_step", "n_mc"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"train.{name} must be >= 1")
        if not (self.lr > 0 and 0 < self.decay_rate <= 1):
            raise InvalidConfig("lr must be > 0 and decay_rate in (0, 1]")
        if self.alpha < 0 or self.gamma_focal < 0 or self.grad_clip < 0:
            raise InvalidConfig("alpha, gamma_focal and grad_clip must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch`` (step decay)."""
        return self.lr * self.decay_rate ** (epoch // self.decay_step)


# --------------------------------------------------------------------------
# closed forms


def kl_diag(q: GaussianDiag, p: GaussianDiag) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise InvalidInput(f"kl_diag width mismatch {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    t = ((q.mean - p.mean) * torch.exp(-p.log_std)).square()
    return 0.5 * (var_ratio + t - 1.0).sum(-1) - (q.log_std - p.log_std).sum(-1)


def _kl_categorical_unchecked(q: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    log_q = torch.log(q.clamp_min(torch.finfo(q.dtype).tiny))
    return torch.where(q > 0, q * (log_q - log_p), torch.zeros_like(q)).sum(-1)


def kl_categorical(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) over the last axis with ``0 log 0 = 0``."""
    if q.shape[-1] != p.shape[-1]:
        raise InvalidInput(f"kl_categorical size mismatch {q.shape[-1]} vs {p.shape[-1]}")
    if torch.any((p <= 0) & (q > 0)):
        raise InfiniteDivergence("reference probability is zero where q is positive")
    log_p = torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))
    return _kl_categorical_unchecked(q, log_p)


def focal_loss(pi_hat: torch.Tensor, target: torch.Tensor, gamma: float, log_pi_hat: torch.Tensor | None = None) -> torch.Tensor:
    """``-sum_k (1 - pi_k)^gamma * target_k * log pi_k`` over the last axis.

    ``log_pi_hat`` may be passed to avoid re-taking the log of ``pi_hat``.
    Log-probabilities are floored at -30.
    """
    if pi_hat.shape != target.shape:
        raise InvalidInput("focal_loss: pi_hat and target shapes differ")
    if log_pi_hat is None:
        log_pi_hat = torch.log(pi_hat.clamp_min(0.0))
    if log.isEnabledFor(logging.DEBUG) and torch.any((log_pi_hat < FOCAL_LOG_FLOOR) & (target > 0)):
        log.debug("focal_loss: clamped log pi_hat at %s", FOCAL_LOG_FLOOR)
    log_pi_hat = log_pi_hat.clamp_min(FOCAL_LOG_FLOOR)
    weight = (1.0 - pi_hat).clamp_min(0.0) ** gamma
    return -(weight * target * log_pi_hat).sum(-1)


# --------------------------------------------------------------------------
# objective


@dataclass
class PosteriorSamples:
    """Per-batch Monte-Carlo quantities shared by all loss terms."""

    x: torch.Tensor
    v: torch.Tensor  # (N, B, T, d_v)
    log_lik: torch.Tensor  # (N, B)
    log_prior: torch.Tensor  # (N, B, K)
    log_q: torch.Tensor  # (N, B)
    kl_steps: torch.Tensor  # (N, B, K)
    weights: torch.Tensor  # (N, B, K)


def draw_posterior(
    model: MixtureModel,
    batch: SceneBatch,
    n_mc: int = 4,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> PosteriorSamples:
    if batch.s_f is None:
        raise InvalidInput("batch has no futures")
    if n_mc < 1 and eps is None:
        raise InvalidInput("n_mc must be >= 1")
    nets = model.nets
    x = model(batch.enc)
    q, v = nets.posterior_rollout(x, batch.s_f, n=n_mc, eps=eps, generator=generator)
    prior = nets.prior_along(v, x)  # (N, B, K, T, d_v)
    q_k = GaussianDiag(q.mean.unsqueeze(2), q.log_std.unsqueeze(2))
    log_prior = prior.log_prob(v.unsqueeze(2)).sum(-1)
    return PosteriorSamples(
        x=x,
        v=v,
        log_lik=nets.log_lik_future(batch.s_f, v, x),
        log_prior=log_prior,
        log_q=q.log_prob(v).sum(-1),
        kl_steps=kl_diag(q_k, prior).sum(-1),
        weights=responsibilities(log_prior),
    )


def elbo_terms(ps: PosteriorSamples) -> dict[str, torch.Tensor]:
    """Per-scene ELBO terms (shape ``(B,)``)."""
    K = ps.weights.shape[-1]
    term1 = ps.log_lik.mean(0)
    term2 = (ps.weights * ps.kl_steps).sum(-1).mean(0)
    log_uniform = torch.full_like(ps.weights, -math.log(K))
    term3 = _kl_categorical_unchecked(ps.weights, log_uniform).mean(0)
    return {"term1": term1, "term2": term2, "term3": term3, "elbo": term1 - term2 - term3}


def elbo(
    model: MixtureModel,
    batch: SceneBatch,
    n_mc: int = 4,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Batch-mean ELBO and its term breakdown."""
    terms = elbo_terms(draw_posterior(model, batch, n_mc, generator, eps))
    means = {k: v.mean() for k, v in terms.items()}
    return means["elbo"], {k: float(v.detach()) for k, v in means.items()}


def total_loss(
    model: MixtureModel,
    batch: SceneBatch,
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    targets: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """``-ELBO + alpha * focal`` with gradient-stopped assignment targets.

    The same posterior samples feed the ELBO and the assignment targets.
    Pass ``targets`` to hold the targets fixed (used by gradient checks).
    """
    loss, terms, focal = _loss_terms(model, batch, cfg, generator, eps, targets)
    breakdown = {k: float(v.detach().mean()) for k, v in terms.items()}
    breakdown.update(focal=float(focal.detach()), assignment=float(cfg.alpha * focal.detach()), total=float(loss.detach()))
    return loss, breakdown


def _loss_terms(model, batch, cfg, generator=None, eps=None, targets=None):
    ps = draw_posterior(model, batch, cfg.n_mc, generator, eps)
    terms = elbo_terms(ps)
    if targets is None:
        targets = target_weights(ps.log_lik.detach(), ps.log_prior.detach(), ps.log_q.detach())
    log_pi, pi = model.nets.assignment_forward(ps.x)
    focal = focal_loss(pi, targets, cfg.gamma_focal, log_pi).mean()
    loss = -terms["elbo"].mean() + cfg.alpha * focal
    return loss, terms, focal


# --------------------------------------------------------------------------
# training loop


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]))


def train(
    scenes: list[Scene],
    train_cfg: TrainConfig,
    mixture_cfg: MixtureConfig,
    encoder_cfg: EncoderConfig,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Fit the model with Adam and a step learning-rate decay.

    Epoch ``e`` draws its shuffling and Monte-Carlo noise from streams seeded
    by ``(seed, e)``, so a resumed run matches an uninterrupted one.
    """
    train_cfg.validate()
    if not scenes:
        raise InvalidInput("training set is empty")
    data = prepare_batch(scenes, encoder_cfg, mixture_cfg.H, mixture_cfg.T, need_future=True)
    if resume is not None:
        model = model_from_checkpoint(resume)
        start = resume.train_state.epoch if resume.train_state else 0
    else:
        model = MixtureModel(mixture_cfg, encoder_cfg, seed=train_cfg.seed)
        start = 0
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=train_cfg.betas)
    if resume is not None and resume.train_state is not None:
        resume.train_state.load_into(opt, model)
    metrics: list[dict] = []
    n = len(data)
    for epoch in range(start, train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        gen = epoch_generator(train_cfg.seed, epoch)
        sums: dict[str, float] = {}
        for bi, lo in enumerate(range(0, n, train_cfg.batch_size)):
            sub = data.index(perm[lo : lo + train_cfg.batch_size])
            loss, br = total_loss(model, sub, train_cfg, generator=gen)
            if not torch.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at epoch {epoch + 1}, batch {bi}", batch_index=bi)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if train_cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            for k, v in br.items():
                sums[k] = sums.get(k, 0.0) + v * len(sub)
        rec = {"epoch": epoch + 1, "lr": lr}
        rec.update({k: sums[k] / n for k in ("total", "elbo", "term1", "term2", "term3", "focal")})
        metrics.append(rec)
        log.info("epoch %d lr %.3g total %.4f elbo %.4f focal %.4f", epoch + 1, lr, rec["total"], rec["elbo"], rec["focal"])
        if on_epoch is not None:
            on_epoch(rec)
    state = TrainState.from_optimizer(max(start, train_cfg.epochs), opt, model)
    return checkpoint_from_model(model, train_cfg, state), metrics


# --------------------------------------------------------------------------
# gradient verification


class _LossWrapper(nn.Module):
    def __init__(self, model: MixtureModel, batch: SceneBatch, cfg: TrainConfig, eps: torch.Tensor, targets: torch.Tensor) -> None:
        super().__init__()
        self.model = model
        self._args = (batch, cfg, eps, targets)

    def forward(self) -> torch.Tensor:
        batch, cfg, eps, targets = self._args
        return _loss_terms(self.model, batch, cfg, eps=eps, targets=targets)[0]


def finite_difference_check(
    module: nn.Module,
    fn: Callable[[], torch.Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    chunk: int = 256,
) -> tuple[float, dict[str, float]]:
    """Compare autograd gradients of ``fn`` with central differences.

    ``fn`` must evaluate the scalar through ``module``'s parameters.  All
    trainable entries are perturbed; evaluations are vectorized with
    ``torch.func.vmap``.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Returns the maximum and a per-parameter breakdown.
    """
    names = [n for n, p in module.named_parameters() if p.requires_grad]
    if not names:
        return 0.0, {}
    params = dict(module.named_parameters())
    module.zero_grad(set_to_none=True)
    fn().backward()
    analytic = torch.cat([params[n].grad.reshape(-1) if params[n].grad is not None else torch.zeros(params[n].numel(), dtype=params[n].dtype) for n in names])
    module.zero_grad(set_to_none=True)

    base = torch.cat([params[n].detach().reshape(-1) for n in names])
    shapes = [params[n].shape for n in names]
    sizes = [params[n].numel() for n in names]
    frozen = {n: p.detach() for n, p in params.items() if n not in names}

    def evaluate(flat: torch.Tensor) -> torch.Tensor:
        pieces = torch.split(flat, sizes)
        d = {n: t.view(s) for n, t, s in zip(names, pieces, shapes)}
        d.update(frozen)
        return torch.func.functional_call(module, d, ())

    batched = torch.func.vmap(evaluate)
    numeric = torch.empty_like(base)
    with torch.no_grad():
        for lo in range(0, base.numel(), chunk):
            idx = torch.arange(lo, min(lo + chunk, base.numel()))
            rows = base.unsqueeze(0).repeat(len(idx), 1)
            rows[torch.arange(len(idx)), idx] += step
            f_plus = batched(rows)
            rows[torch.arange(len(idx)), idx] -= 2 * step
            f_minus = batched(rows)
            numeric[idx] = (f_plus - f_minus) / (2 * step)
    rel = (analytic - numeric).abs() / torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(base, floor))
    per_param = {n: float(r.max()) for n, r in zip(names, torch.split(rel, sizes))}
    return float(rel.max()), per_param


def grad_check(
    model: MixtureModel,
    batch: SceneBatch,
    cfg: TrainConfig,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences of the
    total loss, over every trainable parameter.  Monte-Carlo noise and the
    assignment targets are frozen so the loss is a deterministic function.

    Frozen parameters (``requires_grad=False``) are skipped; with none left
    the result is 0.  ``floor`` bounds the denominator of the relative error:
    at ``step=1e-5`` central differences carry ~1e-10 of round-off on an O(10)
    loss, so smaller gradient entries are compared in absolute terms.
    """
    mc = model.mixture_cfg
    g = torch.Generator().manual_seed(seed)
    eps = torch.randn(cfg.n_mc, len(batch), mc.T, mc.d_v, dtype=DTYPE, generator=g)
    with torch.no_grad():
        ps = draw_posterior(model, batch, eps=eps)
        targets = target_weights(ps.log_lik, ps.log_prior, ps.log_q)
    wrapper = _LossWrapper(model, batch, cfg, eps, targets)
    err, _ = finite_difference_check(wrapper, wrapper.forward, step=step, floor=floor)
    return err
