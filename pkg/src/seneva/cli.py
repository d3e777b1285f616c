"""Command-line interface.

Exit codes: 0 success, 1 I/O error, 2 configuration or validation error,
3 numerical failure.  Every command writes into the directory given by
``--out`` and echoes the effective configuration there as
``effective_config.ini``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from seneva.checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from seneva.config import RunConfig, load_run_config
from seneva.errors import CheckpointError, InfiniteDivergence, InvalidConfig, InvalidInput, NumericalFailure, SceneFileError
from seneva.evaluation import auto_region, evaluate_predictions, heatmap, ood_report
from seneva.model import MixtureModel, prepare_batch
from seneva.sampling import endpoint_distributions, predict
from seneva.scene import SceneFileHeader, load_scene_file, save_scene_file
from seneva.synthetic import DEFAULT_OOD, make_splits
from seneva.training import train

log = logging.getLogger("seneva")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
PRED_FORMAT = "seneva-predictions"


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.apply_seed(args.seed)
    return cfg


def _override(cfg: RunConfig, pairs) -> None:
    """Apply ``(section, key, value)`` triples whose value is not None."""
    for section, key, value in pairs:
        if value is not None:
            cfg.set(section, key, value)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: RunConfig, out: Path) -> None:
    (out / "effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")


def _load_model(path) -> tuple[MixtureModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    return model_from_checkpoint(ckpt), ckpt


def _check_horizons(header: SceneFileHeader, ckpt: Checkpoint, path) -> None:
    mc = ckpt.mixture
    if (header.H, header.T) != (mc.H, mc.T):
        raise InvalidConfig(f"horizon mismatch: {path} has H={header.H}, T={header.T} but the checkpoint expects H={mc.H}, T={mc.T}")


def write_predictions(path, preds, T: int) -> None:
    lines = [json.dumps({"record": "header", "format": PRED_FORMAT, "version": 1, "T": T, "n_scenes": len(preds)})]
    for i, p in enumerate(preds):
        lines.append(
            json.dumps(
                {
                    "record": "prediction",
                    "index": i,
                    "n_trajectories": len(p),
                    "trajectories": p.trajectories.tolist(),
                    "scores": p.scores.tolist(),
                    "components": p.component_of.tolist(),
                    "exhausted": bool(p.exhausted),
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path) -> tuple[list[np.ndarray], int]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise InvalidInput(f"{path}: empty predictions file")
    try:
        recs = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: malformed JSON ({exc.msg})") from exc
    head = recs[0]
    if head.get("format") != PRED_FORMAT:
        raise InvalidInput(f"{path}: not a predictions file")
    T = int(head["T"])
    out = []
    for i, r in enumerate(recs[1:], start=2):
        traj = np.asarray(r["trajectories"], dtype=float)
        if traj.ndim != 3 or traj.shape[1] != T or len(traj) != r["n_trajectories"]:
            raise InvalidInput(f"{path}: line {i}: trajectories do not match n_trajectories/T")
        out.append(traj)
    return out, T


# --------------------------------------------------------------------------
# commands


def cmd_make_data(args) -> int:
    cfg = _config(args)
    _override(
        cfg,
        [
            ("generator", "n_scenes", args.n),
            ("generator", "geometry", args.geometry),
            ("generator", "mode_count", args.modes),
            ("data", "ood_frac", args.ood_frac),
        ],
    )
    gen = cfg.generator
    if cfg.data.ood_frac > 0 and not gen.ood_params and gen.geometry in DEFAULT_OOD:
        gen.ood_params = dict(DEFAULT_OOD[gen.geometry])
    cfg.validate()
    out = _outdir(args)
    id_scenes, ood_scenes = make_splits(gen, cfg.data.ood_frac)
    header = SceneFileHeader(gen.H, gen.T, gen.step_seconds)
    save_scene_file(out / "scenes_id.jsonl", id_scenes, header)
    save_scene_file(out / "scenes_ood.jsonl", ood_scenes, header)
    _echo(cfg, out)
    print(f"wrote {len(id_scenes)} ID and {len(ood_scenes)} OOD scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _override(
        cfg,
        [
            ("train", "epochs", args.epochs),
            ("train", "batch_size", args.batch_size),
            ("train", "lr", args.lr),
            ("train", "n_mc", args.n_mc),
            ("train", "alpha", args.alpha),
            ("train", "gamma_focal", args.gamma),
            ("mixture", "K", args.K),
        ],
    )
    scenes, header = load_scene_file(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        cfg.mixture, cfg.encoder = resume.mixture, resume.encoder
        _check_horizons(header, resume, args.data)
    cfg.mixture.H, cfg.mixture.T = header.H, header.T
    cfg.validate()
    tc = cfg.train
    print(
        f"train: {len(scenes)} scenes, epochs {tc.epochs}, lr {tc.lr:g}, batch {tc.batch_size}, "
        f"decay {tc.decay_rate:g}/{tc.decay_step} epochs, alpha {tc.alpha:g}, gamma {tc.gamma_focal:g}, "
        f"n_mc {tc.n_mc}, K {cfg.mixture.K}, seed {tc.seed}"
    )
    out = _outdir(args)
    _echo(cfg, out)
    metrics_path = out / "metrics.jsonl"
    if resume is None or not metrics_path.exists():
        metrics_path.write_text("", encoding="utf-8")

    def on_epoch(rec: dict) -> None:
        keep = {k: rec[k] for k in ("epoch", "lr", "total", "term1", "term2", "term3", "focal")}
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(keep) + "\n")

    ckpt, metrics = train(scenes, tc, cfg.mixture, cfg.encoder, resume=resume, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.bin", ckpt)
    print(f"wrote checkpoint after epoch {ckpt.train_state.epoch} to {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    _override(
        cfg,
        [
            ("sampler", "M", args.m),
            ("sampler", "radius", args.radius),
            ("sampler", "iou_threshold", args.iou),
            ("sampler", "resolution", args.resolution),
        ],
    )
    model, ckpt = _load_model(args.checkpoint)
    scenes, header = load_scene_file(args.scenes)
    _check_horizons(header, ckpt, args.scenes)
    cfg.mixture, cfg.encoder = ckpt.mixture, ckpt.encoder
    cfg.validate()
    out = _outdir(args)
    preds = predict(scenes, model, cfg.sampler)
    write_predictions(out / "predictions.jsonl", preds, header.T)
    _echo(cfg, out)
    short = sum(p.exhausted for p in preds)
    print(f"wrote {len(preds)} prediction sets to {out / 'predictions.jsonl'}" + (f" ({short} with fewer than M)" if short else ""))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    _override(cfg, [("eval", "mr", args.mr), ("sampler", "M", args.m)])
    scenes, header = load_scene_file(args.scenes)
    if args.predictions:
        preds, T = read_predictions(args.predictions)
        if T != header.T:
            raise InvalidConfig(f"horizon mismatch: {args.predictions} has T={T} but {args.scenes} has T={header.T}")
    elif args.checkpoint:
        model, ckpt = _load_model(args.checkpoint)
        _check_horizons(header, ckpt, args.scenes)
        cfg.mixture, cfg.encoder = ckpt.mixture, ckpt.encoder
        cfg.validate()
        preds = [p.trajectories for p in predict(scenes, model, cfg.sampler)]
    else:
        raise InvalidConfig("evaluate needs --predictions or --checkpoint")
    cfg.validate()
    if len(preds) != len(scenes):
        raise InvalidInput(f"{len(preds)} prediction sets for {len(scenes)} scenes")
    if any(s.future is None for s in scenes):
        raise InvalidInput("evaluate needs scenes with ground-truth futures")
    anchors = [s.target.states[-1, :2] for s in scenes]
    report = evaluate_predictions(preds, [s.future for s in scenes], cfg.eval.mr, header.step_seconds, anchors)
    out = _outdir(args)
    text = "\n".join(report.lines()) + "\n"
    (out / "metrics.txt").write_text(text, encoding="utf-8")
    _echo(cfg, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_uq_report(args) -> int:
    cfg = _config(args)
    _override(cfg, [("eval", "entropy_mc", args.n_mc)])
    model, ckpt = _load_model(args.checkpoint)
    scenes = []
    for path in args.scenes:
        part, header = load_scene_file(path)
        _check_horizons(header, ckpt, path)
        scenes.extend(part)
    cfg.mixture, cfg.encoder = ckpt.mixture, ckpt.encoder
    cfg.validate()
    if not scenes:
        raise InvalidInput("uq-report: no scenes")
    report = ood_report(scenes, model, n_mc=cfg.eval.entropy_mc, seed=cfg.eval.seed)
    if not any(g.ood for g in report.groups):
        report.notes.append("dataset contains no OOD scenes; ID rows only")
    out = _outdir(args)
    text = "\n".join(report.lines()) + "\n"
    (out / "uq_report.tsv").write_text(text, encoding="utf-8")
    _echo(cfg, out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg = _config(args)
    _override(cfg, [("eval", "heatmap_resolution", args.resolution)])
    model, ckpt = _load_model(args.checkpoint)
    scenes, header = load_scene_file(args.scenes)
    _check_horizons(header, ckpt, args.scenes)
    cfg.mixture, cfg.encoder = ckpt.mixture, ckpt.encoder
    cfg.validate()
    if not 0 <= args.index < len(scenes):
        raise InvalidInput(f"--index {args.index} outside [0, {len(scenes)})")
    mc = ckpt.mixture
    batch = prepare_batch([scenes[args.index]], model.encoder_cfg, mc.H, mc.T)
    with torch.no_grad():
        dist = endpoint_distributions(model, model(batch.enc), min(cfg.sampler.top_c, mc.K))[0]
    pose = batch.poses[0]
    if args.region:
        try:
            region = tuple(float(v) for v in args.region.split(","))
        except ValueError as exc:
            raise InvalidConfig(f"--region: {exc}") from exc
        if len(region) != 4:
            raise InvalidConfig("--region needs xmin,xmax,ymin,ymax")
        hm = heatmap(dist, region, cfg.eval.heatmap_resolution, pose=pose)
    else:
        hm = heatmap(dist, auto_region(dist), cfg.eval.heatmap_resolution)
    out = _outdir(args)
    (out / f"heatmap_{args.index}.txt").write_text("\n".join(hm.lines()) + "\n", encoding="utf-8")
    _echo(cfg, out)
    if args.png:
        _render(hm, out / f"heatmap_{args.index}.png")
    print(f"wrote {len(hm.ys)}x{len(hm.xs)} heatmap to {out}")
    return EXIT_OK


def _render(hm, path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise InvalidConfig("--png needs matplotlib (pip install seneva[plot])") from exc
    x0, x1, y0, y1 = hm.region
    fig, ax = plt.subplots(figsize=(6, 6 * (y1 - y0) / (x1 - x0) + 0.5))
    im = ax.imshow(hm.values, origin="lower", extent=(x0, x1, y0, y1), cmap="magma", vmin=np.percentile(hm.values, 5))
    fig.colorbar(im, ax=ax, label="log density")
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seneva", description="Variational mixture trajectory prediction toolkit.")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 gives reference outputs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("make-data", help="generate synthetic ID and OOD scene files")
    common(sp)
    sp.add_argument("--n", type=int, help="total scenes (ID + OOD)")
    sp.add_argument("--geometry", choices=["fork", "arc_choice", "merge"])
    sp.add_argument("--modes", type=int, choices=[2, 3])
    sp.add_argument("--ood-frac", type=float)
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train", help="fit a model to a scene file")
    common(sp)
    sp.add_argument("--data", required=True, help="scene file with futures")
    sp.add_argument("--resume", help="checkpoint with training state")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--n-mc", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--K", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="sample M trajectories per scene")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--m", type=int)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--iou", type=float)
    sp.add_argument("--resolution", type=float)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="minADE / minFDE / miss rate")
    common(sp, seed=False)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--predictions")
    sp.add_argument("--checkpoint")
    sp.add_argument("--m", type=int)
    sp.add_argument("--mr", choices=["interaction", "argoverse"])
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("uq-report", help="entropy by geometry, ID vs OOD")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", required=True, nargs="+")
    sp.add_argument("--n-mc", type=int)
    sp.set_defaults(func=cmd_uq_report)

    sp = sub.add_parser("heatmap", help="log-density grid for one scene")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--region", help="xmin,xmax,ymin,ymax in world coordinates")
    sp.add_argument("--resolution", type=float)
    sp.add_argument("--png", action="store_true", help="also render an image (needs matplotlib)")
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (NumericalFailure, InfiniteDivergence) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidConfig, InvalidInput, SceneFileError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
