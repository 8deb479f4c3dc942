"""Train one (lambda0, E_attn) cell over several seeds and report mean/sd test accuracy.

    python3 scripts/run_seeds.py colored --lambda0 160 --e-attn 11 --seeds 0 1 2 3 4
    python3 scripts/run_seeds.py decoy --lambda0 0 --e-attn 0 --seeds 0
"""
import argparse
import json
import logging
import time
from pathlib import Path

from lookalign import data, training

MNIST = Path(__file__).resolve().parent.parent / "data" / "mnist"


def load_raw(mnist_dir=MNIST):
    tr = data.load_mnist(mnist_dir / "train-images-idx3-ubyte.gz", mnist_dir / "train-labels-idx1-ubyte.gz")
    te = data.load_mnist(mnist_dir / "t10k-images-idx3-ubyte.gz", mnist_dir / "t10k-labels-idx1-ubyte.gz")
    return tr, te


def run(dataset, lambda0, e_attn, seed, epochs=30, raw=None):
    tr, te = raw or load_raw()
    split = data.synth(dataset, tr, te, seed)
    cfg = training.TrainConfig.for_dataset(dataset, lambda0=lambda0, e_attn=e_attn, epochs=epochs, seed=seed)
    return training.train_two_phase(cfg, split)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dataset", choices=["colored", "decoy"])
    ap.add_argument("--lambda0", type=float, default=None)
    ap.add_argument("--e-attn", type=int, default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", type=Path, default=None, help="JSON summary path")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    lam0, e = training.ANCHOR_CELLS[args.dataset]
    lam0 = lam0 if args.lambda0 is None else args.lambda0
    e = e if args.e_attn is None else args.e_attn

    raw = load_raw()
    accs = []
    for seed in args.seeds:
        t0 = time.time()
        report = run(args.dataset, lam0, e, seed, args.epochs, raw)
        accs.append(report.final_test_acc)
        print(f"seed {seed}: test acc {report.final_test_acc:.4f} ({time.time() - t0:.0f}s)", flush=True)
    summary = {"dataset": args.dataset, "lambda0": lam0, "e_attn": e, "seeds": args.seeds, "test_acc": accs}
    if len(accs) > 1:
        summary["mean"], summary["sd"] = training.aggregate_seeds(accs)
        print(f"mean {summary['mean']:.4f} sd {summary['sd']:.4f}")
    if args.out:
        args.out.write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
