"""Compare compatibility initialisations (Potts, zero, He-random) for the CRF variants.

    python scripts/mu_init_ablation.py --epochs 3
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from crfseg import generator as gen
from crfseg import synth
from crfseg import trainer as tr
from crfseg.discriminator import DiscriminatorConfig

sys.path.insert(0, str(Path(__file__).parent))
from variant_table import make_set  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="cnnrnngan")
    ap.add_argument("--inits", nargs="+", default=["potts", "zero", "he"])
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--heldout", type=int, default=50)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = synth.SynthSpec()
    train_set = make_set(spec, 0, args.train)
    heldout = make_set(spec, 10_000, args.heldout)
    for init in args.inits:
        gcfg = gen.GeneratorConfig(num_labels=3, channels=args.width, stem_channels=args.width,
                                   head_channels=max(40, 2 * args.width), variant=args.variant, mu_init=init)
        model = tr.Model.create(gcfg, DiscriminatorConfig(num_labels=3, base_exp=3), args.seed)
        logs, _ = tr.train(train_set, model, tr.TrainConfig(epochs=args.epochs, seed=args.seed), heldout)
        trace = " ".join(f"{l.heldout_jaccard:.3f}" for l in logs)
        print(f"mu_init={init:<6} heldout J per epoch: {trace}", flush=True)


if __name__ == "__main__":
    main()
