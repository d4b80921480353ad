"""Residual-weight sweep on the planted-rotation task.

Trains banks of N in {1, 2, 4, 16} adapters with the default schedule for each
lam and seed, on the full split (200 train / 50 eval per class per bin) and on
the training split thinned to 20 per cell, and prints eval accuracy next to the
hidden-map oracle. Usage: python benchmarks/planted_sweep.py [--lams ...] [--seeds ...]
"""

import argparse

import numpy as np

from shapeadapt.adapters import AdapterBank
from shapeadapt.classifier import ClassifierConfig, classify_many
from shapeadapt.data import SynthConfig, generate_synthetic, oracle_predictions, split_train_eval, thin_per_cell
from shapeadapt.trainer import TrainConfig, train


def accuracy(bank, ds, texts):
    probs = classify_many(bank.adapt_many(ds.features, ds.ratios), texts, ClassifierConfig())
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lams", default="0.2,0.5,0.8,0.9")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    ns = (1, 2, 4, 16)
    print("lam  seed oracle | full N=1 2 4 16 | thin N=1 2 4 16")
    for lam in (float(v) for v in args.lams.split(",")):
        for seed in (int(v) for v in args.seeds.split(",")):
            task = generate_synthetic(SynthConfig(seed=seed))
            tr, ev = split_train_eval(task.dataset, 0.8, seed, task.partition)
            thin = thin_per_cell(tr, 20, task.partition)
            oracle = float(np.mean(oracle_predictions(task, ev) == ev.labels))
            row = []
            for data in (tr, thin):
                for n in ns:
                    bank = AdapterBank.initialize(n, tr.dim, lam=lam)
                    trained, _ = train(bank, data, task.texts, TrainConfig())
                    row.append(accuracy(trained, ev, task.texts))
            full, small = row[:4], row[4:]
            print(f"{lam:.1f}  {seed:4d} {oracle:.3f}  | " + " ".join(f"{a:.3f}" for a in full)
                  + " | " + " ".join(f"{a:.3f}" for a in small), flush=True)


if __name__ == "__main__":
    main()
