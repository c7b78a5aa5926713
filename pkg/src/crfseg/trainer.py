"""Losses, Adam, the adversarial suspend/resume gates and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import generator as gen
from . import geometry
from . import metrics
from . import tensor as T
from .discriminator import Discriminator, DiscriminatorConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class NumericError(RuntimeError):
    """Raised when a loss turns non-finite; ``state`` carries a diagnostic snapshot."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    lam: float = 100.0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 111
    lr_drops: tuple[int, ...] = (100, 110)
    lr_drop_factor: float = 10.0
    dis_suspend: float = 0.1
    dis_resume: float = 0.5
    gen_suspend: float = 10.0
    gen_resume: float = 2.0
    batch_size: int = 16
    seed: int = 0
    holdout: float = 0.0
    translate: float = 5.0
    mirror: bool = True
    label_smoothing: float = 0.0  # clamp one-hot truths into [eps, 1 - eps] before the discriminator

    def __post_init__(self):
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        if not self.dis_suspend < self.dis_resume:
            raise ValueError("dis_suspend must be below dis_resume")
        if not self.gen_resume < self.gen_suspend:
            raise ValueError("gen_resume must be below gen_suspend")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------------------
# losses


def segmentation_loss(pred: Tensor, truth) -> Tensor:
    """Cross-entropy summed over labels and pixels, averaged over the batch."""
    truth = T.as_tensor(truth)
    n = pred.shape[0]
    return T.scale(T.sum_all(T.mul(truth, T.log(pred, LOG_FLOOR))), -1.0 / n)


def adversarial_loss(d_on_generated: Tensor) -> Tensor:
    return T.neg(T.mean_all(T.log(d_on_generated, LOG_FLOOR)))


def discriminator_loss(d_on_truth: Tensor, d_on_generated: Tensor) -> Tensor:
    real = T.log(d_on_truth, LOG_FLOOR)
    fake = T.log(T.sub(1.0, d_on_generated), LOG_FLOOR)
    return T.neg(T.mean_all(T.add(real, fake)))


def generator_loss(adv, seg, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(adv, Tensor) or isinstance(seg, Tensor):
        return T.add(adv, T.scale(T.as_tensor(seg), lam))
    return adv + lam * seg


# ---------------------------------------------------------------------------
# gates


@dataclass
class GateState:
    dis_active: bool = True
    gen_active: bool = True


def loss_ratio(l_dis: float, l_adv: float) -> float:
    return math.inf if l_adv == 0 else l_dis / l_adv


def update_gates(state: GateState, l_dis: float, l_adv: float, cfg: TrainConfig) -> GateState:
    r = loss_ratio(float(l_dis), float(l_adv))
    dis, gen_on = state.dis_active, state.gen_active
    if r < cfg.dis_suspend:
        dis = False
    elif r > cfg.dis_resume:
        dis = True
    if r > cfg.gen_suspend:
        gen_on = False
    elif r < cfg.gen_resume:
        gen_on = True
    return GateState(dis, gen_on)


# ---------------------------------------------------------------------------
# Adam


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              alpha: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns new (param, m, v)."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    param = param - alpha * m_hat / (np.sqrt(v_hat) + eps)
    return param.astype(np.float32), m.astype(np.float32), v.astype(np.float32)


class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c = self.cfg
        for k, p in self.params.items():
            p.data, self.m[k], self.v[k] = adam_step(p.data, grads[k], self.m[k], self.v[k], self.t, lr, c.beta1, c.beta2, c.eps)


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Rate for 1-based ``epoch``: divided by the drop factor once per passed drop epoch."""
    drops = sum(1 for d in cfg.lr_drops if epoch > d)
    return cfg.alpha / cfg.lr_drop_factor**drops


# ---------------------------------------------------------------------------
# training


@dataclass
class Sample:
    image: np.ndarray  # H×W×3 float32
    labels: np.ndarray  # H×W uint8
    init_seg: np.ndarray  # H×W uint8
    landmarks: np.ndarray | None = None


@dataclass
class Model:
    """Generator parameters plus an optional discriminator."""

    gen_cfg: gen.GeneratorConfig
    gen_params: dict[str, Tensor]
    disc: Discriminator | None = None
    scheme: "str | geometry.ClassScheme" = "parts3"
    template: np.ndarray | None = None

    @classmethod
    def create(cls, gen_cfg: gen.GeneratorConfig, disc_cfg: DiscriminatorConfig | None, seed: int, scheme: str = "parts3"):
        rng = np.random.default_rng(seed)
        params = gen.init_params(gen_cfg, rng)
        disc = None
        if gen.uses_gan(gen_cfg.variant):
            disc = Discriminator(disc_cfg or DiscriminatorConfig(num_labels=gen_cfg.num_labels), rng)
        return cls(gen_cfg, params, disc, scheme)

    def predict(self, images: np.ndarray, init_segs: np.ndarray) -> np.ndarray:
        """images N×3×h×w, init_segs N×P×h×w -> probabilities N×P×h×w (no graph kept)."""
        out = gen.forward(Tensor(images), Tensor(init_segs), self.gen_params, self.gen_cfg)
        return out.data

    def predict_one(self, stacked: np.ndarray) -> np.ndarray:
        """3+P channel input -> P×h×w probabilities; the shape ``oversample_infer`` wants."""
        return self.predict(stacked[None, :3], stacked[None, 3:])[0]


    def scheme_obj(self) -> geometry.ClassScheme:
        return geometry.get_scheme(self.scheme)


def oversampled_probs(model: Model, image: np.ndarray, init_seg: np.ndarray) -> np.ndarray:
    """Ten-pass (5 crops x mirror) inference of an H×W×3 image with its initial label map."""
    p = model.gen_cfg.num_labels
    perm = model.scheme_obj().mirror_permutation()
    stacked = np.concatenate([image.transpose(2, 0, 1).astype(np.float32), geometry.one_hot(init_seg, p)])

    def flip_in(a):
        out = a[..., ::-1].copy()
        out[3:] = out[3:][perm]
        return out

    def flip_out(o):
        return o[perm][..., ::-1]

    return geometry.oversample_infer(model.predict_one, stacked, model.gen_cfg.input_hw, flip_in, flip_out)


@dataclass
class EpochLog:
    epoch: int
    l_seg: float
    l_adv: float
    l_dis: float
    dis_active: bool
    gen_active: bool
    mean_jaccard: float
    lr: float
    heldout_l_seg: float = float("nan")
    heldout_jaccard: float = float("nan")

    def line(self) -> str:
        return (
            f"epoch={self.epoch} L_seg={self.l_seg:.6f} L_adv={self.l_adv:.6f} L_dis={self.l_dis:.6f} "
            f"dis_active={int(self.dis_active)} gen_active={int(self.gen_active)} mean_jaccard={self.mean_jaccard:.6f}"
        )


def parse_epoch_line(line: str) -> dict[str, float]:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = float(v)
    return out


def stack_batch(samples: Sequence[Sample], num_labels: int):
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    truth = np.stack([geometry.one_hot(s.labels, num_labels) for s in samples])
    init = np.stack([geometry.one_hot(s.init_seg, num_labels) for s in samples])
    return images, truth, init


def _augment_batch(samples, cfg: TrainConfig, crop, rng, scheme) -> list[Sample]:
    params = geometry.AugmentParams(translate=cfg.translate, mirror=cfg.mirror, crop=crop)
    out = []
    for s in samples:
        img, lab, seg = geometry.augment(s.image, s.labels, s.init_seg, params, rng, scheme)
        out.append(Sample(img, lab, seg))
    return out


def evaluate(model: Model, samples: Sequence[Sample], batch_size: int = 16):
    """Held-out segmentation loss (batch-averaged) and mean Jaccard of plain central-crop inference."""
    p = model.gen_cfg.num_labels
    cm = metrics.confusion_matrix(p)
    total, count = 0.0, 0
    crop = model.gen_cfg.input_hw
    for i in range(0, len(samples), batch_size):
        chunk = [
            Sample(geometry._center_crop(s.image, crop), geometry._center_crop(s.labels, crop), geometry._center_crop(s.init_seg, crop))
            for s in samples[i:i + batch_size]
        ]
        images, truth, init = stack_batch(chunk, p)
        probs = model.predict(images, init)
        total += float(segmentation_loss(Tensor(probs), truth).data) * len(chunk)
        count += len(chunk)
        for j, s in enumerate(chunk):
            cm = metrics.accumulate(cm, probs[j].argmax(axis=0), s.labels)
    return total / max(count, 1), metrics.jaccard(cm)[1], cm


def _finite_or_raise(values: dict[str, float], state: dict) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite loss {bad}", {**state, **values})


def train(
    train_set: Sequence[Sample],
    model: Model,
    cfg: TrainConfig,
    heldout: Sequence[Sample] = (),
    on_epoch: Callable[[EpochLog], None] | None = None,
    optimizers: tuple[Adam, Adam | None] | None = None,
    start_epoch: int = 1,
) -> tuple[list[EpochLog], tuple[Adam, Adam | None]]:
    """Run ``cfg.epochs`` epochs of sequential discriminator/generator updates.

    Every iteration: draw a batch without replacement, augment it, run the
    generator (and CRF), score truth and output with the discriminator,
    update the gates from the fresh losses, then step the discriminator and
    the generator if their gates are open.
    """
    if not train_set:
        raise ValueError("empty training set")
    gcfg = model.gen_cfg
    p = gcfg.num_labels
    use_gan = gen.uses_gan(gcfg.variant)
    scheme = geometry.get_scheme(model.scheme)
    if optimizers is None:
        optimizers = (Adam(model.gen_params, cfg), Adam(model.disc.params, cfg) if use_gan else None)
    gen_opt, dis_opt = optimizers
    gen_leaves = list(model.gen_params.values())
    gen_names = list(model.gen_params)
    gates = GateState()
    logs: list[EpochLog] = []

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = learning_rate(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        sums = {"seg": 0.0, "adv": 0.0, "dis": 0.0}
        n_iter = 0
        cm = metrics.confusion_matrix(p)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            batch = _augment_batch([train_set[i] for i in order[start:start + cfg.batch_size]], cfg, gcfg.input_hw, rng, scheme)
            images, truth, init = stack_batch(batch, p)

            probs = gen.forward(Tensor(images), Tensor(init), model.gen_params, gcfg)
            l_seg = segmentation_loss(probs, truth)
            state = {"epoch": epoch, "batch": b}

            if use_gan:
                real = truth
                if cfg.label_smoothing > 0:
                    real = np.clip(truth, cfg.label_smoothing, 1 - cfg.label_smoothing)
                d_real = model.disc(Tensor(real))
                d_fake = model.disc(probs)
                l_dis = discriminator_loss(d_real, d_fake)
                l_adv = adversarial_loss(d_fake)
                vals = {"L_seg": float(l_seg.data), "L_adv": float(l_adv.data), "L_dis": float(l_dis.data)}
                _finite_or_raise(vals, state)
                gates = update_gates(gates, vals["L_dis"], vals["L_adv"], cfg)
                if gates.dis_active:
                    d_leaves = list(model.disc.params.values())
                    grads = T.grad(l_dis, d_leaves)
                    dis_opt.step(dict(zip(model.disc.params, grads)), lr)
                    # the generator sees the updated discriminator
                    l_adv = adversarial_loss(model.disc(probs))
                if gates.gen_active:
                    grads = T.grad(generator_loss(l_adv, l_seg, cfg.lam), gen_leaves)
                    gen_opt.step(dict(zip(gen_names, grads)), lr)
            else:
                vals = {"L_seg": float(l_seg.data), "L_adv": 0.0, "L_dis": 0.0}
                _finite_or_raise(vals, state)
                grads = T.grad(l_seg, gen_leaves)
                gen_opt.step(dict(zip(gen_names, grads)), lr)

            sums["seg"] += vals["L_seg"]
            sums["adv"] += vals["L_adv"]
            sums["dis"] += vals["L_dis"]
            n_iter += 1
            pred = probs.data.argmax(axis=1)
            for j, s in enumerate(batch):
                cm = metrics.accumulate(cm, pred[j], s.labels)

        log = EpochLog(
            epoch, sums["seg"] / n_iter, sums["adv"] / n_iter, sums["dis"] / n_iter,
            gates.dis_active, gates.gen_active, metrics.jaccard(cm)[1], lr,
        )
        if heldout:
            log.heldout_l_seg, log.heldout_jaccard, _ = evaluate(model, heldout, cfg.batch_size)
        logger.info(log.line())
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return logs, optimizers


def config_echo(cfg: TrainConfig, gcfg: gen.GeneratorConfig) -> dict:
    d = asdict(cfg)
    d.update({f"gen.{k}": v for k, v in asdict(gcfg).items()})
    return d
