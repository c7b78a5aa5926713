"""Train the four model variants on the synthetic set and tabulate held-out scores.

    python scripts/variant_table.py --epochs 10 --width 16 --csv variants.csv

Each row is one variant trained from the same seed on the same samples.
"""
from __future__ import annotations

import argparse
import csv
import logging
import time

from crfseg import generator as gen
from crfseg import geometry, synth
from crfseg import trainer as tr
from crfseg.discriminator import DiscriminatorConfig


def make_set(spec, start, n):
    out = []
    for i in range(start, start + n):
        img, lab, lm = synth.synth_sample(spec, i)
        out.append(tr.Sample(img, lab, geometry.initial_segmentation(lm, lab.shape, spec.scheme), lm))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=list(gen.VARIANTS))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--heldout", type=int, default=50)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--disc-exp", type=int, default=3)
    ap.add_argument("--mu-init", default="potts")
    ap.add_argument("--scheme", default="parts3")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = synth.SynthSpec(height=args.size, width=args.size, scheme=args.scheme)
    train_set = make_set(spec, 0, args.train)
    heldout = make_set(spec, 10_000, args.heldout)
    p = geometry.get_scheme(args.scheme).num_labels
    rows = []
    for variant in args.variants:
        gcfg = gen.GeneratorConfig(num_labels=p, input_hw=(args.size, args.size), channels=args.width,
                                   stem_channels=args.width, head_channels=max(40, 2 * args.width),
                                   variant=variant, mu_init=args.mu_init)
        model = tr.Model.create(gcfg, DiscriminatorConfig(num_labels=p, base_exp=args.disc_exp), args.seed, args.scheme)
        start = time.perf_counter()
        logs, _ = tr.train(train_set, model, tr.TrainConfig(epochs=args.epochs, seed=args.seed), heldout)
        rows.append({
            "variant": variant,
            "heldout_jaccard": round(logs[-1].heldout_jaccard, 4),
            "heldout_L_seg_first": round(logs[0].heldout_l_seg, 2),
            "heldout_L_seg_last": round(logs[-1].heldout_l_seg, 2),
            "seconds": round(time.perf_counter() - start, 1),
        })
        print(rows[-1], flush=True)

    print(f"\n{'variant':<12}{'J':>8}{'L_seg 1':>12}{'L_seg N':>12}{'sec':>8}")
    for r in rows:
        print(f"{r['variant']:<12}{r['heldout_jaccard']:>8.4f}{r['heldout_L_seg_first']:>12.1f}{r['heldout_L_seg_last']:>12.1f}{r['seconds']:>8.0f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
