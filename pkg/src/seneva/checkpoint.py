"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"SENEVACK"
    bytes 8..11    uint32 format version
    bytes 12..19   uint64 header length L
    bytes 20..20+L UTF-8 JSON header (sorted keys, no whitespace)
    rest           float64 little-endian tensor data, concatenated in header order

The header holds the mixture and encoder configs, the training config (if
any), the training state scalars, and for every tensor its name, shape and
element offset into the data block.  Optimizer moments are stored as tensors
named ``adam.exp_avg/<param>`` and ``adam.exp_avg_sq/<param>``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import torch

from seneva.encoder import EncoderConfig
from seneva.errors import CheckpointError
from seneva.mixture import MixtureConfig

if TYPE_CHECKING:
    from seneva.model import MixtureModel

MAGIC = b"SENEVACK"
VERSION = 1


@dataclass
class TrainState:
    epoch: int
    adam_step: int
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_optimizer(cls, epoch: int, opt: torch.optim.Optimizer, model: "MixtureModel") -> "TrainState":
        step = 0
        avg, avg_sq = {}, {}
        for name, p in model.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            step = int(st["step"])
            avg[name] = st["exp_avg"].detach().cpu().numpy().astype("<f8")
            avg_sq[name] = st["exp_avg_sq"].detach().cpu().numpy().astype("<f8")
        return cls(epoch, step, avg, avg_sq)

    def load_into(self, opt: torch.optim.Optimizer, model: "MixtureModel") -> None:
        for name, p in model.named_parameters():
            if name not in self.exp_avg:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(self.adam_step)),
                "exp_avg": torch.as_tensor(self.exp_avg[name].copy(), dtype=p.dtype),
                "exp_avg_sq": torch.as_tensor(self.exp_avg_sq[name].copy(), dtype=p.dtype),
            }


@dataclass
class Checkpoint:
    mixture: MixtureConfig
    encoder: EncoderConfig
    params: dict[str, np.ndarray]
    train_config: dict[str, Any] | None = None
    train_state: TrainState | None = None

    def to_bytes(self) -> bytes:
        tensors: list[tuple[str, np.ndarray]] = list(self.params.items())
        state_hdr = None
        if self.train_state is not None:
            ts = self.train_state
            tensors += [(f"adam.exp_avg/{k}", v) for k, v in ts.exp_avg.items()]
            tensors += [(f"adam.exp_avg_sq/{k}", v) for k, v in ts.exp_avg_sq.items()]
            state_hdr = {"epoch": ts.epoch, "adam_step": ts.adam_step}
        entries, blobs, offset = [], [], 0
        for name, arr in tensors:
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.size
        header = {
            "version": VERSION,
            "mixture": dataclasses.asdict(self.mixture),
            "encoder": dataclasses.asdict(self.encoder),
            "train_config": self.train_config,
            "train_state": state_hdr,
            "tensors": entries,
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hdr)) + hdr + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(data) < 20:
            raise CheckpointError("truncated checkpoint header")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
        try:
            header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if (len(data) - 20 - hlen) % 8:
            raise CheckpointError("truncated checkpoint body")
        body = np.frombuffer(data, dtype="<f8", offset=20 + hlen)
        arrays: dict[str, np.ndarray] = {}
        for e in header["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            if e["offset"] + count > body.size:
                raise CheckpointError(f"tensor {e['name']} extends past end of file")
            arrays[e["name"]] = body[e["offset"] : e["offset"] + count].reshape(e["shape"]).copy()
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        state = None
        if header.get("train_state") is not None:
            sh = header["train_state"]
            state = TrainState(
                sh["epoch"],
                sh["adam_step"],
                {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.exp_avg/")},
                {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam.exp_avg_sq/")},
            )
        return cls(
            MixtureConfig(**header["mixture"]),
            EncoderConfig(**header["encoder"]),
            params,
            header.get("train_config"),
            state,
        )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def checkpoint_from_model(model: "MixtureModel", train_cfg=None, state: TrainState | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().astype("<f8") for k, v in model.state_dict().items()}
    tc = None
    if train_cfg is not None:
        tc = dataclasses.asdict(train_cfg)
        tc["betas"] = list(tc["betas"])
    return Checkpoint(model.mixture_cfg, model.encoder_cfg, params, tc, state)


def model_from_checkpoint(ckpt: Checkpoint) -> "MixtureModel":
    from seneva.model import MixtureModel

    model = MixtureModel(ckpt.mixture, ckpt.encoder)
    expected = model.state_dict()
    missing = set(expected) - set(ckpt.params)
    extra = set(ckpt.params) - set(expected)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in ckpt.params.items()})
    return model
