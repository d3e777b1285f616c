"""The full model (encoder + component networks) and scene batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from seneva.encoder import ContextEncoder, EncoderBatch, EncoderConfig, collate, featurize
from seneva.errors import InvalidInput
from seneva.mixture import ComponentNetworks, MixtureConfig
from seneva.scene import Pose2, Scene, positions_to_displacements, to_target_frame

DTYPE = torch.float64


class MixtureModel(nn.Module):
    def __init__(self, mixture: MixtureConfig, encoder: EncoderConfig, seed: int = 0) -> None:
        super().__init__()
        mixture.validate()
        encoder.validate()
        self.mixture_cfg = mixture
        self.encoder_cfg = encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = ContextEncoder(encoder, d_x=mixture.d_x)
            self.nets = ComponentNetworks(mixture)
        self.to(DTYPE)

    def forward(self, batch: EncoderBatch) -> torch.Tensor:
        return self.encoder(batch)

    def parameter_counts(self) -> dict[str, int]:
        counts = {"encoder": sum(p.numel() for p in self.encoder.parameters())}
        counts.update(self.nets.parameter_counts())
        counts["total"] = sum(counts.values())
        return counts


@dataclass
class SceneBatch:
    """Encoder inputs plus target-frame futures (as displacements)."""

    enc: EncoderBatch
    s_f: torch.Tensor | None  # (B, T, 2)
    poses: list[Pose2]

    def __len__(self) -> int:
        return len(self.enc)

    def index(self, idx) -> "SceneBatch":
        idx_list = idx.tolist() if isinstance(idx, (torch.Tensor, np.ndarray)) else list(idx)
        return SceneBatch(
            self.enc.index(torch.as_tensor(idx_list)),
            None if self.s_f is None else self.s_f[idx_list],
            [self.poses[i] for i in idx_list],
        )


def prepare_batch(scenes: list[Scene], encoder_cfg: EncoderConfig, H: int, T: int, need_future: bool = False) -> SceneBatch:
    """Normalize, validate and vectorize scenes into one padded batch."""
    feats, futures, poses = [], [], []
    for i, sc in enumerate(scenes):
        try:
            sc.validate(H, T)
        except InvalidInput as exc:
            raise InvalidInput(f"scene {i}: {exc}") from exc
        norm, pose = to_target_frame(sc)
        feats.append(featurize(norm, encoder_cfg))
        poses.append(pose)
        if norm.future is None:
            if need_future:
                raise InvalidInput(f"scene {i} has no future")
        else:
            futures.append(positions_to_displacements(norm.future))
    s_f = None
    if futures and len(futures) == len(scenes):
        s_f = torch.as_tensor(np.stack(futures), dtype=DTYPE)
    return SceneBatch(collate(feats, dtype=DTYPE), s_f, poses)
