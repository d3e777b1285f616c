"""End-to-end toy experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace


from seneva.checkpoint import model_from_checkpoint
from seneva.encoder import EncoderConfig
from seneva.evaluation import MetricsReport, constant_velocity, evaluate_predictions, ood_report, OODReport
from seneva.mixture import MixtureConfig
from seneva.sampling import SamplerConfig, predict
from seneva.synthetic import GeneratorConfig, generate_dataset, generate_ood_split, split_counts
from seneva.training import TrainConfig, train

log = logging.getLogger(__name__)

# Toy training schedule: the full-scale learning rate (1e-4, x0.3 every 5
# epochs) leaves a few hundred updates on 2k scenes, so the toy runs use a
# larger rate and a slower decay.
TOY_TRAIN = TrainConfig(epochs=50, batch_size=64, lr=1e-3, decay_step=10, decay_rate=0.5, n_mc=4)

# Toy mixture: a two-dimensional latent and a linear decoder.  With d_v=8 and
# a hidden decoder layer the responsibilities over T*d_v latent coordinates go
# one-hot early and a single component absorbs both branches.
TOY_MIXTURE = MixtureConfig(d_v=2, decoder_layers=0)


@dataclass
class ForkResult:
    K: int
    model: MetricsReport
    baseline: MetricsReport
    metrics_log: list[dict]
    seconds: float

    @property
    def fde_reduction(self) -> float:
        """Relative minFDE improvement over constant velocity."""
        return 1.0 - self.model.min_fde / self.baseline.min_fde


def fork_data(seed: int = 7, n_scenes: int = 2000, test_frac: float = 0.2):
    gen = GeneratorConfig(seed=seed, n_scenes=n_scenes, geometry="fork", mode_count=2)
    scenes = generate_dataset(gen)
    n_train, _ = split_counts(n_scenes, test_frac)
    return gen, scenes[:n_train], scenes[n_train:]


def run_fork(
    K: int,
    seed: int = 7,
    n_scenes: int = 2000,
    train_cfg: TrainConfig = TOY_TRAIN,
    encoder_cfg: EncoderConfig | None = None,
    mixture_cfg: MixtureConfig | None = None,
    test_frac: float = 0.2,
    M: int = 6,
) -> ForkResult:
    """Train on the fork toy and score ``M`` sampled trajectories per test scene."""
    gen, train_set, test_set = fork_data(seed, n_scenes, test_frac)
    enc = encoder_cfg or EncoderConfig()
    mix = replace(mixture_cfg or TOY_MIXTURE, K=K, T=gen.T, H=gen.H)
    t0 = time.perf_counter()
    ckpt, metrics = train(train_set, replace(train_cfg, seed=seed), mix, enc)
    model = model_from_checkpoint(ckpt)
    preds = predict(test_set, model, SamplerConfig(M=M))
    truths = [s.future for s in test_set]
    report = evaluate_predictions([p.trajectories for p in preds], truths, mr="argoverse")
    cv = [constant_velocity(s, gen.T)[None] for s in test_set]
    baseline = evaluate_predictions(cv, truths, mr="argoverse")
    return ForkResult(K, report, baseline, metrics, time.perf_counter() - t0)


def arc_ood(
    seed: int,
    n_scenes: int = 1000,
    ood_frac: float = 0.35,
    train_cfg: TrainConfig = TOY_TRAIN,
    n_mc: int = 32,
    ood_radius: float = 30.0,
) -> OODReport:
    """Train on arc-choice scenes of one radius and compare entropies on a
    held-out ID split against scenes of an unseen radius."""
    n_id, n_ood = split_counts(n_scenes, ood_frac)
    gen = GeneratorConfig(seed=seed, n_scenes=n_id, geometry="arc_choice", mode_count=2, ood_params={"radius": ood_radius})
    id_scenes = generate_dataset(gen)
    ood_scenes = generate_ood_split(replace(gen, n_scenes=n_ood))
    n_train = int(round(0.8 * n_id))
    ckpt, _ = train(id_scenes[:n_train], replace(train_cfg, seed=seed), replace(TOY_MIXTURE, K=2, T=gen.T, H=gen.H), EncoderConfig())
    model = model_from_checkpoint(ckpt)
    return ood_report(id_scenes[n_train:] + ood_scenes, model, n_mc=n_mc, seed=seed)
