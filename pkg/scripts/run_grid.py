"""Grid search over (lambda0, E_attn) on one dataset; writes heatmap CSV/PGM and the chosen cell.

    python3 scripts/run_grid.py decoy --lambdas 1 8 40 --e-attns 5 13 --epochs 30 --out runs/grid_decoy
"""
import argparse
import json
import logging
from pathlib import Path

from run_seeds import load_raw

from lookalign import data, training


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dataset", choices=["colored", "decoy"])
    ap.add_argument("--lambdas", type=float, nargs="+", default=list(training.DEFAULT_LAMBDAS))
    ap.add_argument("--e-attns", type=int, nargs="+", default=list(training.DEFAULT_E_ATTNS))
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/grid"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(message)s")

    tr, te = load_raw()
    split = data.synth(args.dataset, tr, te, args.seed)
    template = training.TrainConfig.for_dataset(args.dataset, epochs=args.epochs, seed=args.seed)
    grid = training.run_grid(args.lambdas, args.e_attns, template, split, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "heatmap.csv").write_text(training.heatmap_csv(grid))
    training.write_pgm(args.out / "heatmap.pgm", training.heatmap_pixels(grid))
    (args.out / "chosen.json").write_text(json.dumps({"chosen": grid.chosen}) + "\n")
    print(training.heatmap_csv(grid))
    print("chosen", grid.chosen)


if __name__ == "__main__":
    main()
