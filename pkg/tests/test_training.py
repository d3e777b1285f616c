import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seneva.checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint, model_from_checkpoint, save_checkpoint
from seneva.errors import CheckpointError, InfiniteDivergence, InvalidConfig, InvalidInput, NumericalFailure
from seneva.mixture import GaussianDiag
from seneva.model import DTYPE, MixtureModel, prepare_batch
from seneva.synthetic import GeneratorConfig, generate_dataset
from seneva.training import (
    TrainConfig,
    draw_posterior,
    elbo,
    elbo_terms,
    focal_loss,
    grad_check,
    kl_categorical,
    kl_diag,
    total_loss,
    train,
)

from toys import GRAD_GEN, TOY_ENCODER, grad_toy, perturb, set_posterior, set_prior, tiny_model, toy_mixture


def diag(mean, var):
    m = torch.as_tensor(mean, dtype=DTYPE).reshape(-1)
    return GaussianDiag(m, 0.5 * torch.log(torch.as_tensor(var, dtype=DTYPE)).reshape(-1))


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


class TestClosedForms:
    def test_kl_diag_examples(self):
        assert float(kl_diag(diag(0.3, 2.0), diag(0.3, 2.0))) == 0.0
        assert abs(float(kl_diag(diag(1.0, 1.0), diag(0.0, 1.0))) - 0.5) < 1e-12
        ref = 0.5 * (4 - 1 - math.log(4))
        assert abs(float(kl_diag(diag(0.0, 4.0), diag(0.0, 1.0))) - ref) < 1e-12 and abs(ref - 0.8069) < 1e-4

    def test_kl_diag_width_mismatch(self):
        with pytest.raises(InvalidInput):
            kl_diag(diag([0, 0], [1, 1]), diag(0, 1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_kl_diag_matches_torch_distributions(self, seed):
        g = torch.Generator().manual_seed(seed)
        q = GaussianDiag(torch.randn(5, 3, generator=g, dtype=DTYPE), torch.randn(5, 3, generator=g, dtype=DTYPE))
        p = GaussianDiag(torch.randn(5, 3, generator=g, dtype=DTYPE), torch.randn(5, 3, generator=g, dtype=DTYPE))
        ref = torch.distributions.kl_divergence(
            torch.distributions.Normal(q.mean, q.log_std.exp()), torch.distributions.Normal(p.mean, p.log_std.exp())
        ).sum(-1)
        assert torch.allclose(kl_diag(q, p), ref, atol=1e-12)
        assert (kl_diag(q, p) >= 0).all()

    def test_kl_categorical_examples(self):
        u = t([1 / 6] * 6)
        assert float(kl_categorical(u, u)) == 0.0
        assert abs(float(kl_categorical(t([1, 0, 0, 0, 0, 0]), u)) - math.log(6)) < 1e-12
        ref = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert abs(float(kl_categorical(t([0.5, 0.5]), t([0.25, 0.75]))) - ref) < 1e-12 and abs(ref - 0.1438) < 1e-4

    def test_kl_categorical_zero_reference(self):
        with pytest.raises(InfiniteDivergence):
            kl_categorical(t([0.5, 0.5]), t([1.0, 0.0]))
        assert float(kl_categorical(t([1.0, 0.0]), t([0.5, 0.5]))) == math.log(2)

    def test_focal_examples(self):
        target, pi = t([1.0, 0.0]), t([0.5, 0.5])
        assert abs(float(focal_loss(pi, target, 0.0)) - math.log(2)) < 1e-12
        assert abs(float(focal_loss(pi, target, 2.0)) - 0.25 * math.log(2)) < 1e-12
        assert abs(0.25 * math.log(2) - 0.1733) < 1e-4
        assert float(focal_loss(target, target, 2.0)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 8))
    def test_focal_gamma0_is_cross_entropy(self, seed, K):
        rng = np.random.default_rng(seed)
        pi, target = t(rng.dirichlet(np.ones(K))), t(rng.dirichlet(np.ones(K)))
        ce = -(target * torch.log(pi)).sum()
        assert abs(float(focal_loss(pi, target, 0.0)) - float(ce)) <= 1e-12

    def test_focal_log_floor(self):
        val = focal_loss(t([1.0, 0.0]), t([0.0, 1.0]), 0.0)
        assert float(val) == 30.0


def toy_batch(n=6, T=3, seed=1):
    gen = replace(GRAD_GEN, n_scenes=n, T=T, seed=seed, geometry_params={"fork_start": 0.0, "transition": 0.5})
    return prepare_batch(generate_dataset(gen), TOY_ENCODER, gen.H, T, need_future=True)


class TestObjective:
    def test_degenerate_model_elbo_is_term1(self):
        m = MixtureModel(toy_mixture(K=3, T=1), TOY_ENCODER, seed=0)
        for k in range(3):
            set_prior(m.nets, k, [0.2, -0.1], -0.5, 0.0)
        set_posterior(m.nets, torch.tensor([0.2, -0.1], dtype=DTYPE), -0.5)
        value, br = elbo(m, toy_batch(T=1), n_mc=3, generator=torch.Generator().manual_seed(0))
        assert abs(br["term2"]) < 1e-12 and abs(br["term3"]) < 1e-12
        assert abs(br["elbo"] - br["term1"]) < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.0, 1.0))
    def test_kl_terms_nonnegative(self, seed, scale):
        m = MixtureModel(toy_mixture(), TOY_ENCODER, seed=seed)
        perturb(m, scale, seed)
        with torch.no_grad():
            terms = elbo_terms(draw_posterior(m, toy_batch(), 3, torch.Generator().manual_seed(seed)))
        assert (terms["term2"] >= 0).all() and (terms["term3"] >= -1e-15).all()
        assert (terms["elbo"] <= terms["term1"] + 1e-12).all()

    def test_alpha_zero_and_linearity(self):
        m, batch, cfg = grad_toy()
        loss0, b0 = total_loss(m, batch, replace(cfg, alpha=0.0), generator=torch.Generator().manual_seed(3))
        assert float(loss0.detach()) == -b0["elbo"] and b0["total"] == -b0["elbo"]
        _, b1 = total_loss(m, batch, replace(cfg, alpha=1.0), generator=torch.Generator().manual_seed(3))
        _, b2 = total_loss(m, batch, replace(cfg, alpha=2.0), generator=torch.Generator().manual_seed(3))
        assert abs(b1["total"] - (-b1["elbo"] + b1["focal"])) < 1e-12
        assert abs(b2["assignment"] - 2 * b1["assignment"]) < 1e-12

    def test_missing_future(self):
        m, batch, cfg = grad_toy()
        batch.s_f = None
        with pytest.raises(InvalidInput):
            total_loss(m, batch, cfg)


class TestGradCheck:
    def test_full_toy(self):
        m, batch, cfg = grad_toy()
        assert grad_check(m, batch, cfg) <= 1e-4

    def test_linear_decoder_only(self):
        m, batch, cfg = grad_toy(decoder_layers=0)
        for name, p in m.named_parameters():
            p.requires_grad_(name.startswith("nets.decoder"))
        assert grad_check(m, batch, cfg) <= 1e-6

    def test_all_frozen_is_zero(self):
        m, batch, cfg = grad_toy()
        for p in m.parameters():
            p.requires_grad_(False)
        assert grad_check(m, batch, cfg) == 0.0


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.decay_step, cfg.decay_rate, cfg.alpha, cfg.gamma_focal, cfg.n_mc) == (
            20, 64, 1e-4, 5, 0.3, 1.0, 2.0, 4,
        )

    def test_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(0) == cfg.lr_at(4) == 1e-4
        assert abs(cfg.lr_at(5) - 3e-5) < 1e-18 and abs(cfg.lr_at(10) - 9e-6) < 1e-18

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"lr": 0.0}, {"n_mc": 0}, {"epochs": -1}, {"decay_rate": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            TrainConfig(**kw).validate()


def small_run(scenes, epochs, **kw):
    cfg = TrainConfig(epochs=epochs, batch_size=4, lr=1e-3, n_mc=2, seed=5, **kw)
    return train(scenes, cfg, toy_mixture(), TOY_ENCODER)


class TestTrain:
    scenes = generate_dataset(replace(GRAD_GEN, n_scenes=10, seed=4))

    def test_zero_epochs_is_initialization(self):
        ckpt, metrics = small_run(self.scenes, 0)
        init = checkpoint_from_model(MixtureModel(toy_mixture(), TOY_ENCODER, seed=5))
        assert metrics == []
        assert ckpt.params.keys() == init.params.keys()
        assert all(np.array_equal(ckpt.params[k], init.params[k]) for k in init.params)

    def test_metrics_records(self):
        _, metrics = small_run(self.scenes, 2)
        assert [m["epoch"] for m in metrics] == [1, 2]
        assert set(metrics[0]) == {"epoch", "lr", "total", "elbo", "term1", "term2", "term3", "focal"}

    def test_same_seed_same_bytes(self):
        a, _ = small_run(self.scenes, 2)
        b, _ = small_run(self.scenes, 2)
        assert a.to_bytes() == b.to_bytes()

    def test_resume_matches_uninterrupted(self):
        full, m_full = small_run(self.scenes, 3)
        part, m_part = small_run(self.scenes, 1)
        cfg = TrainConfig(epochs=3, batch_size=4, lr=1e-3, n_mc=2, seed=5)
        rest, m_rest = train(self.scenes, cfg, toy_mixture(), TOY_ENCODER, resume=Checkpoint.from_bytes(part.to_bytes()))
        assert [m["epoch"] for m in m_rest] == [2, 3]
        assert m_part + m_rest == m_full
        assert rest.to_bytes() == full.to_bytes()

    def test_nan_aborts_with_batch_index(self, monkeypatch):
        import seneva.training as tr

        calls = {"n": 0}
        orig = tr.total_loss

        def poisoned(*a, **k):
            loss, br = orig(*a, **k)
            calls["n"] += 1
            return (loss * float("nan"), br) if calls["n"] == 2 else (loss, br)

        monkeypatch.setattr(tr, "total_loss", poisoned)
        with pytest.raises(NumericalFailure, match="batch 1") as err:
            small_run(self.scenes, 1)
        assert err.value.batch_index == 1

    def test_empty_dataset(self):
        with pytest.raises(InvalidInput):
            small_run([], 1)

    def test_fork_progress(self):
        """Smoothed loss of a 50-epoch K=2 run on 500 fork scenes ends below epoch 1."""
        from seneva.experiments import TOY_MIXTURE, TOY_TRAIN
        from seneva.encoder import EncoderConfig

        gen = GeneratorConfig(seed=7, n_scenes=500, geometry="fork", mode_count=2)
        enc = EncoderConfig(d_model=32, subgraph_depth=2, n_levels=1, n_heads=2)
        _, metrics = train(generate_dataset(gen), replace(TOY_TRAIN, seed=7), replace(TOY_MIXTURE, K=2, T=gen.T, H=gen.H, d_x=32), enc)
        totals = np.array([m["total"] for m in metrics])
        smoothed = np.convolve(totals, np.ones(5) / 5, mode="valid")
        print(f"fork progress: epoch-1 total {totals[0]:.4f}, final smoothed {smoothed[-1]:.4f}")
        assert len(totals) == 50 and smoothed[-1] < totals[0]


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        m = tiny_model()
        perturb(m, 0.1, 0)
        ck = checkpoint_from_model(m)
        save_checkpoint(tmp_path / "a", ck)
        again = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", again)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        back = model_from_checkpoint(again)
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_rejects_bad_files(self, tmp_path):
        data = checkpoint_from_model(tiny_model()).to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"nope" + data[4:])
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(data[: len(data) // 2])
        import struct

        from seneva.checkpoint import MAGIC

        bumped = data[: len(MAGIC)] + struct.pack("<I", 999) + data[len(MAGIC) + 4 :]
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(bumped)
