"""Sequential latent mixture: component priors, displacement decoder,
variational posterior, responsibilities and the assignment network.

Shapes used throughout::

    x        (B, d_x)          context features
    s_f      (B, T, 2)         future displacements (target frame)
    v        (N, B, T, d_v)    latent paths, N Monte-Carlo samples
    prior    (N, B, K, T, d_v) per-component prior step parameters

The K component networks are stored as stacked weight tensors so that all
components are evaluated in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from seneva.errors import InvalidConfig, InvalidInput

LOG_STD_MIN = -7.0
LOG_STD_MAX = 4.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MixtureConfig:
    K: int = 6
    d_v: int = 8
    d_x: int = 64
    T: int = 15
    H: int = 6
    hidden: int = 0  # recurrent width; 0 means 2 * d_v
    mlp_hidden: int = 64
    decoder_layers: int = 1  # hidden layers of the decoder MLP; 0 is linear
    prior_spread: float = 0.05  # std of the initial step-1 prior means across components
    drift_spread: float = 0.3  # std of the initial per-step prior drift across components

    @property
    def recurrent_width(self) -> int:
        return self.hidden or 2 * self.d_v

    def validate(self) -> None:
        if self.K < 1 or self.d_v < 1 or self.d_x < 1 or self.T < 1 or self.H < 1:
            raise InvalidConfig("K, d_v, d_x, T and H must all be >= 1")
        if self.hidden < 0 or self.mlp_hidden < 1 or self.decoder_layers < 0:
            raise InvalidConfig("invalid mixture network widths")
        if self.prior_spread < 0 or self.drift_spread < 0:
            raise InvalidConfig("prior_spread and drift_spread must be >= 0")


@dataclass
class GaussianDiag:
    mean: torch.Tensor
    log_std: torch.Tensor

    def log_prob(self, v: torch.Tensor) -> torch.Tensor:
        z = (v - self.mean) * torch.exp(-self.log_std)
        return (-0.5 * z.square() - self.log_std - 0.5 * LOG_2PI).sum(-1)

    def entropy(self) -> torch.Tensor:
        return (self.log_std + 0.5 * (LOG_2PI + 1.0)).sum(-1)


@dataclass
class Gaussian2Full:
    """Bivariate Gaussian with Cholesky factor ``[[l11, 0], [l21, l22]]``;
    the diagonal is stored as logs so the covariance is always PD."""

    mean: torch.Tensor  # (..., 2)
    log_diag: torch.Tensor  # (..., 2)
    offdiag: torch.Tensor  # (...)

    @property
    def chol(self) -> torch.Tensor:
        d = torch.exp(self.log_diag)
        zero = torch.zeros_like(self.offdiag)
        row0 = torch.stack([d[..., 0], zero], -1)
        row1 = torch.stack([self.offdiag, d[..., 1]], -1)
        return torch.stack([row0, row1], -2)

    @property
    def covariance(self) -> torch.Tensor:
        L = self.chol
        return L @ L.transpose(-1, -2)

    def log_prob(self, s: torch.Tensor) -> torch.Tensor:
        d = s - self.mean
        l11, l22 = torch.exp(self.log_diag[..., 0]), torch.exp(self.log_diag[..., 1])
        z1 = d[..., 0] / l11
        z2 = (d[..., 1] - self.offdiag * z1) / l22
        return -LOG_2PI - self.log_diag.sum(-1) - 0.5 * (z1.square() + z2.square())

    def entropy(self) -> torch.Tensor:
        return self.log_diag.sum(-1) + (LOG_2PI + 1.0)


def _clamp_log_std(t: torch.Tensor) -> torch.Tensor:
    return t.clamp(LOG_STD_MIN, LOG_STD_MAX)


class StackedLinear(nn.Module):
    """K independent linear maps applied to inputs of shape ``(..., K, in)``."""

    def __init__(self, K: int, d_in: int, d_out: int) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(K, d_in, d_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(K, d_out).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("...ki,kio->...ko", x, self.weight) + self.bias


class StackedLSTMCell(nn.Module):
    """K independent LSTM cells (input, forget, cell, output gates)."""

    def __init__(self, K: int, d_in: int, d_hidden: int) -> None:
        super().__init__()
        self.d_hidden = d_hidden
        self.gates = StackedLinear(K, d_in + d_hidden, 4 * d_hidden)

    def forward(self, inp: torch.Tensor, state: tuple[torch.Tensor, torch.Tensor]):
        h, c = state
        i, f, g, o = self.gates(torch.cat([inp, h], -1)).chunk(4, -1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def _mlp(d_in: int, d_hidden: int, d_out: int, layers: int = 1) -> nn.Sequential:
    mods: list[nn.Module] = []
    d = d_in
    for _ in range(layers):
        mods += [nn.Linear(d, d_hidden), nn.SiLU()]
        d = d_hidden
    mods.append(nn.Linear(d, d_out))
    return nn.Sequential(*mods)


class ComponentNetworks(nn.Module):
    """All learned pieces downstream of the context feature.

    Parameter groups: ``prior_init`` and ``prior_recur`` (component priors),
    ``decoder``, ``posterior`` and ``assignment``.
    """

    def __init__(self, cfg: MixtureConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        K, dv, dx, hr, mh = cfg.K, cfg.d_v, cfg.d_x, cfg.recurrent_width, cfg.mlp_hidden
        self.prior_init = nn.ModuleDict({"hidden": StackedLinear(K, dx, mh), "out": StackedLinear(K, mh, 2 * dv)})
        self.prior_recur = nn.ModuleDict({"cell": StackedLSTMCell(K, dv + dx, hr), "out": StackedLinear(K, hr, 2 * dv)})
        self.decoder = _mlp(dv + dx, mh, 5, cfg.decoder_layers)
        self.posterior = nn.ModuleDict(
            {
                "summary": StackedLSTMCell(1, 2, hr),
                "cell": StackedLSTMCell(1, dv + dx + hr + 2, hr),
                "out": nn.Linear(hr, 2 * dv),
            }
        )
        self.assignment = _mlp(dx, mh, K, 1)
        # recurrent prior starts as a random walk around the initial step
        nn.init.zeros_(self.prior_recur["out"].weight)
        nn.init.zeros_(self.prior_recur["out"].bias)
        # components start as jittered copies of one network
        with torch.no_grad():
            for mod in [*self.prior_init.values(), *self.prior_recur.values()]:
                for p in mod.parameters():
                    p.copy_(p[:1].expand_as(p))
            self.prior_init["out"].bias[:, :dv].add_(torch.randn(K, dv) * cfg.prior_spread)
            self.prior_recur["out"].bias[:, :dv].add_(torch.randn(K, dv) * cfg.drift_spread)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "prior_init": list(self.prior_init.parameters()),
            "prior_recur": list(self.prior_recur.parameters()),
            "decoder": list(self.decoder.parameters()),
            "posterior": list(self.posterior.parameters()),
            "assignment": list(self.assignment.parameters()),
        }

    def parameter_counts(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in ps) for k, ps in self.parameter_groups().items()}

    # ---------------------------------------------------------------- prior

    def _prior_first(self, x: torch.Tensor) -> GaussianDiag:
        """Step-1 prior of every component: ``(..., K, d_v)``."""
        K, dv = self.cfg.K, self.cfg.d_v
        xk = x.unsqueeze(-2).expand(*x.shape[:-1], K, x.shape[-1])
        out = self.prior_init["out"](F.silu(self.prior_init["hidden"](xk)))
        return GaussianDiag(out[..., :dv], _clamp_log_std(out[..., dv:]))

    def _prior_step(self, v_prev: torch.Tensor, x: torch.Tensor, state):
        """One recurrent prior step for all components; ``v_prev``: ``(..., K, d_v)``."""
        dv = self.cfg.d_v
        xk = x.unsqueeze(-2).expand(*v_prev.shape[:-1], x.shape[-1])
        h, c = self.prior_recur["cell"](torch.cat([v_prev, xk], -1), state)
        out = self.prior_recur["out"](h)
        mean = v_prev + out[..., :dv]
        return GaussianDiag(mean, _clamp_log_std(out[..., dv:])), (h, c)

    def _zero_state(self, shape, like: torch.Tensor):
        z = like.new_zeros(*shape, self.cfg.recurrent_width)
        return z, z

    def prior_along(self, v: torch.Tensor, x: torch.Tensor) -> GaussianDiag:
        """Prior step distributions of all K components conditioned on the
        given path ``v`` (``(N, B, T, d_v)``); returns ``(N, B, K, T, d_v)``."""
        N, B, T, dv = v.shape
        K = self.cfg.K
        xb = x.unsqueeze(0).expand(N, *x.shape)
        first = self._prior_first(xb)
        means, log_stds = [first.mean], [first.log_std]
        state = self._zero_state((N, B, K), v)
        for t in range(1, T):
            v_prev = v[:, :, t - 1].unsqueeze(2).expand(N, B, K, dv)
            step, state = self._prior_step(v_prev, xb, state)
            means.append(step.mean)
            log_stds.append(step.log_std)
        return GaussianDiag(torch.stack(means, -2), torch.stack(log_stds, -2))

    def prior_rollout(
        self,
        x: torch.Tensor,
        k: int | None = None,
        T: int | None = None,
        feed: str = "mean",
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[GaussianDiag, torch.Tensor]:
        """Roll the component priors forward.

        Returns step distributions ``(B, K, T, d_v)`` and the fed path (the
        per-step means for ``feed="mean"``, reparameterized samples for
        ``feed="sample"``).  With ``k`` given only that component is returned
        (``(B, T, d_v)``).
        """
        if k is not None and not 0 <= k < self.cfg.K:
            raise InvalidInput(f"component index {k} outside [0, {self.cfg.K})")
        if feed not in ("mean", "sample"):
            raise InvalidInput(f"feed must be 'mean' or 'sample', got {feed!r}")
        T = T or self.cfg.T
        B, K, dv = x.shape[0], self.cfg.K, self.cfg.d_v
        if feed == "sample" and eps is None:
            eps = torch.randn(B, K, T, dv, dtype=x.dtype, generator=generator)
        step = self._prior_first(x)
        state = self._zero_state((B, K), x)
        means, log_stds, path = [], [], []
        for t in range(T):
            if t > 0:
                step, state = self._prior_step(path[-1], x, state)
            v_t = step.mean if feed == "mean" else step.mean + torch.exp(step.log_std) * eps[:, :, t]
            means.append(step.mean)
            log_stds.append(step.log_std)
            path.append(v_t)
        dist = GaussianDiag(torch.stack(means, -2), torch.stack(log_stds, -2))
        v = torch.stack(path, -2)
        if k is not None:
            return GaussianDiag(dist.mean[:, k], dist.log_std[:, k]), v[:, k]
        return dist, v

    def log_prior_v(self, v: torch.Tensor, x: torch.Tensor, k: int | None = None) -> torch.Tensor:
        """``log p(v | x, z=k)``: ``(N, B, K)`` or ``(N, B)`` for a given ``k``."""
        prior = self.prior_along(v, x)
        lp = prior.log_prob(v.unsqueeze(2)).sum(-1)
        if k is None:
            return lp
        if not 0 <= k < self.cfg.K:
            raise InvalidInput(f"component index {k} outside [0, {self.cfg.K})")
        return lp[..., k]

    # -------------------------------------------------------------- decoder

    def decode_step(self, v: torch.Tensor, x: torch.Tensor) -> Gaussian2Full:
        """Displacement distribution given latent ``v`` (``(..., d_v)``) and
        ``x`` broadcastable to ``(..., d_x)``."""
        if v.shape[-1] != self.cfg.d_v or x.shape[-1] != self.cfg.d_x:
            raise InvalidInput("decode_step: latent/context widths do not match the config")
        x = x.expand(*v.shape[:-1], x.shape[-1])
        out = self.decoder(torch.cat([v, x], -1))
        return Gaussian2Full(out[..., 0:2], _clamp_log_std(out[..., 2:4]), out[..., 4])

    def decode_path(self, v: torch.Tensor, x: torch.Tensor) -> Gaussian2Full:
        """Decode a path ``(..., B, T, d_v)`` with ``x`` of shape ``(B, d_x)``."""
        return self.decode_step(v, x.unsqueeze(-2))

    def log_lik_future(self, s_f: torch.Tensor, v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """``sum_t log N(s_t; decoder(v_t, x))``, shape ``(N, B)``."""
        if s_f.shape[-2] != v.shape[-2]:
            raise InvalidInput(f"future length {s_f.shape[-2]} != latent length {v.shape[-2]}")
        return self.decode_path(v, x).log_prob(s_f).sum(-1)

    # ------------------------------------------------------------ posterior

    def posterior_rollout(
        self,
        x: torch.Tensor,
        s_f: torch.Tensor,
        n: int = 1,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[GaussianDiag, torch.Tensor]:
        """Recurrent posterior ``q(v | x, s_f)``.

        The future is summarized by a forward pass of the summary cell; the
        step cell then emits ``q(v_t | v_{t-1}, x, s_f)`` with samples drawn
        as ``mean + std * eps``.  Returns step distributions and samples,
        both ``(N, B, T, d_v)``.
        """
        B, T, _ = s_f.shape
        if T != self.cfg.T:
            raise InvalidInput(f"future length {T} != T={self.cfg.T}")
        dv = self.cfg.d_v
        if eps is None:
            eps = torch.randn(n, B, T, dv, dtype=x.dtype, generator=generator)
        N = eps.shape[0]
        summ = self.posterior["summary"]
        state = self._zero_state((B, 1), x)
        for t in range(T):
            state = summ(s_f[:, t].unsqueeze(1), state)
        summary = state[0][:, 0]
        cell, head = self.posterior["cell"], self.posterior["out"]
        ctx = torch.cat([x, summary], -1).unsqueeze(0).expand(N, B, -1)
        state = self._zero_state((N, B, 1), x)
        v_prev = x.new_zeros(N, B, dv)
        means, log_stds, samples = [], [], []
        for t in range(T):
            inp = torch.cat([v_prev, ctx, s_f[:, t].unsqueeze(0).expand(N, B, 2)], -1)
            state = cell(inp.unsqueeze(2), state)
            out = head(state[0][:, :, 0])
            mean, log_std = out[..., :dv], _clamp_log_std(out[..., dv:])
            v_prev = mean + torch.exp(log_std) * eps[:, :, t]
            means.append(mean)
            log_stds.append(log_std)
            samples.append(v_prev)
        return GaussianDiag(torch.stack(means, 2), torch.stack(log_stds, 2)), torch.stack(samples, 2)

    # ---------------------------------------------------------- assignments

    def z_posterior(self, v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Responsibilities ``q(z | v, x)`` under the uniform prior: ``(N, B, K)``."""
        return responsibilities(self.log_prior_v(v, x))

    def assignment_forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Assignment network: normalized log-weights and weights ``(B, K)``."""
        log_pi = F.log_softmax(self.assignment(x), -1)
        return log_pi, torch.exp(log_pi)

    def assignment_target(
        self,
        s_f: torch.Tensor,
        x: torch.Tensor,
        n_mc: int = 4,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Bayes-rule target weights ``p(z | x, s_f)``, gradient-stopped."""
        if n_mc < 1 and eps is None:
            raise InvalidInput("n_mc must be >= 1")
        with torch.no_grad():
            q, v = self.posterior_rollout(x, s_f, n=n_mc, eps=eps, generator=generator)
            log_q = q.log_prob(v).sum(-1)
            return target_weights(self.log_lik_future(s_f, v, x), self.log_prior_v(v, x), log_q)


def responsibilities(log_prior_v: torch.Tensor, log_pz: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over components of ``log p(z=k) + log p(v | x, z=k)``."""
    logits = log_prior_v if log_pz is None else log_prior_v + log_pz
    return torch.softmax(logits, -1)


def target_weights(log_lik: torch.Tensor, log_prior: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Normalize importance-weighted estimates of ``log p(s_f | x, z=k)``.

    ``log_lik``/``log_q``: ``(N, B)``; ``log_prior``: ``(N, B, K)``.
    """
    log_w = log_lik.unsqueeze(-1) + log_prior - log_q.unsqueeze(-1)
    log_marg = torch.logsumexp(log_w, 0) - math.log(log_w.shape[0])
    return torch.softmax(log_marg, -1).detach()
