"""Train K=1 and K=2 models on the two-branch fork toy and compare minFDE,
miss rate and the constant-velocity baseline.

    python3 scripts/toy_fork.py --epochs 50 --n 2000
"""

import argparse
import logging
from dataclasses import replace

import torch

from seneva.experiments import TOY_TRAIN, run_fork


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=2000, help="scenes (80%% train, 20%% test)")
    p.add_argument("--epochs", type=int, default=TOY_TRAIN.epochs)
    p.add_argument("--K", type=int, nargs="+", default=[1, 2])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)

    cfg = replace(TOY_TRAIN, epochs=args.epochs)
    print("K\tminADE\tminFDE\tMR\tCV minFDE\tFDE reduction\tminutes")
    for K in args.K:
        r = run_fork(K, seed=args.seed, n_scenes=args.n, train_cfg=cfg)
        print(
            f"{K}\t{r.model.min_ade:.3f}\t{r.model.min_fde:.3f}\t{r.model.miss_rate:.3f}\t"
            f"{r.baseline.min_fde:.3f}\t{100 * r.fde_reduction:.1f}%\t{r.seconds / 60:.1f}"
        )


if __name__ == "__main__":
    main()
