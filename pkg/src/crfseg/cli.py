"""Command-line entry points.

    crfseg synth  --spec FILE --count N --out DIR
    crfseg train  --config FILE --data DIR --out DIR [--variant V] [--holdout FRAC]
    crfseg infer  --ckpt FILE --image FILE --landmarks FILE --out FILE [--inverse-warp]
    crfseg eval   --ckpt FILE --data DIR --report FILE
    crfseg oracle crf --instance FILE

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import crf, dataset, geometry, metrics, synth
from . import generator as gen
from . import trainer as tr

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("crfseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    spec = config_mod.synth_spec_from_pairs(config_mod.parse_pairs(Path(args.spec).read_text(encoding="utf-8")))
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = Path(args.out)
    for sub in ("images", "labels", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    dataset.write_scheme(out, geometry.get_scheme(spec.scheme))
    for i in range(args.count):
        img, lab, lm = synth.synth_sample(spec, i)
        name = f"{i:05d}"
        dataset.write_image(out / "images" / f"{name}.png", img)
        dataset.write_labels(out / "labels" / f"{name}.png", lab)
        dataset.write_landmarks(out / "landmarks" / f"{name}.txt", lm)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def split_holdout(n: int, frac: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded permutation; the last round(frac·n) indices are held out."""
    if not 0.0 <= frac < 1.0:
        raise config_mod.ConfigError(f"holdout must be in [0, 1), got {frac}")
    order = np.random.default_rng([seed, n]).permutation(n)
    k = int(round(frac * n))
    return sorted(order[: n - k].tolist()), sorted(order[n - k:].tolist())


def cmd_train(args) -> int:
    exp = config_mod.load_experiment(args.config)
    train_cfg = exp.train
    if args.holdout is not None:
        train_cfg = replace(train_cfg, holdout=args.holdout)
    if args.variant is not None:
        exp.gen_overrides["variant"] = args.variant
    scheme, samples = dataset.load_dataset(args.data)
    gcfg = exp.generator_config(scheme.num_labels)
    dcfg = exp.discriminator_config(scheme.num_labels)
    shapes = {s.image.shape[:2] for s in samples}
    if len(shapes) != 1:
        raise dataset.DataError(f"images differ in size: {sorted(shapes)}")
    (h, w), = shapes
    if gcfg.input_hw[0] > h or gcfg.input_hw[1] > w:
        raise dataset.DataError(f"crop {gcfg.input_hw} larger than the images {(h, w)}")

    train_idx, held_idx = split_holdout(len(samples), train_cfg.holdout, train_cfg.seed)
    train_set = [samples[i] for i in train_idx]
    heldout = [samples[i] for i in held_idx]
    model = tr.Model.create(gcfg, dcfg if gen.uses_gan(gcfg.variant) else None, train_cfg.seed, scheme)
    model.template = geometry.template_landmarks([s.landmarks for s in train_set])
    optimizers = (
        tr.Adam(model.gen_params, train_cfg),
        tr.Adam(model.disc.params, train_cfg) if model.disc is not None else None,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = tr.config_echo(train_cfg, gcfg)
    (out / "config.txt").write_text(config_mod.format_pairs(echo), encoding="utf-8")
    log_path = out / "epochs.log"
    log_path.write_text("", encoding="utf-8")

    def on_epoch(entry: tr.EpochLog) -> None:
        line = entry.line()
        if heldout:
            line += f" heldout_L_seg={entry.heldout_l_seg:.6f} heldout_mean_jaccard={entry.heldout_jaccard:.6f}"
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        print(line, flush=True)
        ck = ckpt_mod.pack_model(model, optimizers, train_cfg, entry.epoch)
        ck.config["work_hw"] = f"{h},{w}"
        ckpt_mod.save_checkpoint(out / "checkpoint.crfs", ck)

    try:
        tr.train(train_set, model, train_cfg, heldout, on_epoch=on_epoch, optimizers=optimizers)
    except tr.NumericError as exc:
        dump = "".join(f"{k} = {v}\n" for k, v in exc.state.items())
        (out / "numeric_failure.txt").write_text(f"{exc}\n{dump}", encoding="utf-8")
        raise
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer / eval


def _load_model(path):
    ck = ckpt_mod.load_checkpoint(path)
    model = ckpt_mod.unpack_model(ck)
    if "work_hw" in ck.config:
        work_hw = tuple(int(v) for v in ck.config["work_hw"].split(","))
    else:
        work_hw = model.gen_cfg.input_hw
    return model, work_hw


def infer_labels(model: tr.Model, work_hw, image: np.ndarray, landmarks: np.ndarray, inverse_warp: bool = False) -> np.ndarray:
    """Align to the template, paint the initial segmentation, run oversampled inference.

    With ``inverse_warp`` the probabilities are warped back onto the input
    canvas before the argmax; otherwise the label map lives on the aligned
    working canvas.
    """
    if model.template is not None:
        t = geometry.estimate_similarity(landmarks, model.template)
    else:
        t = geometry.SimilarityTransform()
    work = geometry.warp_image(image, t, work_hw, "bilinear")
    init = geometry.initial_segmentation(t.apply(landmarks), work_hw, model.scheme_obj())
    probs = tr.oversampled_probs(model, work, init)
    if inverse_warp:
        back = geometry.warp_image(np.moveaxis(probs, 0, -1), t.inverse(), image.shape[:2], "bilinear")
        # pixels the aligned canvas never covered fall back to background
        back[back.sum(axis=-1) == 0, 0] = 1.0
        return back.argmax(axis=-1).astype(np.uint8)
    return probs.argmax(axis=0).astype(np.uint8)


def cmd_infer(args) -> int:
    model, work_hw = _load_model(args.ckpt)
    image = dataset.read_image(args.image)
    lm = dataset.read_landmarks(args.landmarks)
    labels = infer_labels(model, work_hw, image, lm, args.inverse_warp)
    dataset.write_labels(args.out, labels)
    print(f"wrote {labels.shape[0]}x{labels.shape[1]} label map to {args.out}")
    return EXIT_OK


def evaluate_dataset(model: tr.Model, samples) -> np.ndarray:
    """Confusion matrix of oversampled inference over samples in their own frame."""
    p = model.gen_cfg.num_labels
    cm = metrics.confusion_matrix(p)
    for s in samples:
        probs = tr.oversampled_probs(model, s.image, s.init_seg)
        cm = metrics.accumulate(cm, probs.argmax(axis=0), s.labels)
    return cm


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    scheme, samples = dataset.load_dataset(args.data)
    if scheme.classes != model.scheme_obj().classes:
        raise dataset.DataError(f"dataset classes {scheme.classes} differ from the model's {model.scheme_obj().classes}")
    cm = evaluate_dataset(model, samples)
    report = metrics.format_report(cm, scheme.classes)
    Path(args.report).write_text(report, encoding="utf-8")
    parsed = metrics.parse_report(report)
    print(f"pixel_accuracy={parsed['pixel_accuracy']} mean_jaccard={parsed['mean_jaccard']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle


def load_crf_instance(path):
    """JSON object with ``psi_u`` (P×h×w), ``k`` (4×h×w), ``mu`` (P×P) and optional ``iterations``."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        pots = crf.CrfPotentials(np.array(raw["psi_u"], dtype=np.float64), np.array(raw["k"], dtype=np.float64))
        mu = np.array(raw["mu"], dtype=np.float64)
        iterations = int(raw.get("iterations", 5))
    except (KeyError, TypeError, ValueError) as exc:
        raise dataset.DataError(f"{path}: malformed CRF instance ({exc})") from exc
    if pots.psi_u.ndim != 3 or mu.shape != (pots.num_labels,) * 2:
        raise dataset.DataError(f"{path}: psi_u must be P×h×w and mu P×P")
    return pots, mu, iterations


def cmd_oracle(args) -> int:
    pots, mu, iterations = load_crf_instance(args.instance)
    try:
        exact = crf.exact_marginals(pots, mu)
    except ValueError as exc:
        raise dataset.DataError(str(exc)) from exc
    q = crf.mean_field_numpy(pots, mu, iterations)
    np.set_printoptions(precision=6, suppress=True)
    print("exact_marginals")
    print(exact)
    print(f"mean_field iterations={iterations}")
    print(q)
    print(f"max_abs_diff={np.abs(exact - q).max():.6g}")
    print(f"argmax_agreement={float((exact.argmax(0) == q.argmax(0)).mean()):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crfseg", description="CRF-as-RNN face segmentation with adversarial training")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--count", required=True, type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=gen.VARIANTS, type=str.lower)
    s.add_argument("--holdout", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--inverse-warp", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="oversampled evaluation with a metrics report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", help="debugging oracles")
    osub = s.add_subparsers(dest="oracle", required=True, parser_class=_Parser)
    o = osub.add_parser("crf", help="exact marginals vs mean field on a tiny instance")
    o.add_argument("--instance", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"crfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"crfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tr.NumericError as exc:
        print(f"crfseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"crfseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dataset.DataError, config_mod.ConfigError, ckpt_mod.CheckpointError, OSError, ValueError) as exc:
        print(f"crfseg: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
