"""Finite-difference cases for every differentiable op and the composite networks.

Each case maps a seed to ``(fn, arrays)`` where ``fn(*tensors)`` returns a
scalar.  Scalar losses are built as ``sum(out * R)`` with a fixed random ``R``
so that no gradient vanishes by symmetry (softmax rows, for one).
"""
from __future__ import annotations

import numpy as np

from crfseg import crf
from crfseg import generator as gen
from crfseg import tensor as T
from crfseg.discriminator import Discriminator, DiscriminatorConfig
from crfseg.tensor import Tensor


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    """Values with |v| in [lo, hi] so kinked ops are not differenced across the kink."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _case(op, shapes, kinked=False, positive=()):
    """Generic multi-input op; ``op(*tensors)`` is probed with a fixed random weight."""
    def build(rng):
        arrays = []
        for i, s in enumerate(shapes):
            if i in positive:
                arrays.append(rng.uniform(0.2, 3.0, s))
            elif kinked:
                arrays.append(_away_from_zero(rng, s))
            else:
                arrays.append(rng.standard_normal(s))
        with T.precision(np.float64):
            out_shape = op(*[Tensor(a) for a in arrays]).shape
        r = rng.standard_normal(out_shape)

        def fn(*ts):
            return T.sum_all(T.mul(op(*ts), Tensor(r)))
        return fn, arrays
    return build


def _block_case(rng):
    c, s, p, b = 4, 3, 2, 1
    cfg_shapes = {
        "filter.w": (c, s, 3, 3), "filter.b": (c,), "gate.w": (c, s, 3, 3), "gate.b": (c,),
        "bias.w": (c, p, 1, 1), "bias.b": (c,), "residual.w": (s, c, 1, 1), "residual.b": (s,),
        "skip.w": (c, c, 1, 1), "skip.b": (c,),
    }
    names = list(cfg_shapes)
    x = rng.standard_normal((1, s, 16, 16))
    seg = rng.uniform(0, 1, (1, p, 16, 16))
    arrays = [x, seg] + [rng.standard_normal(sh) * 0.5 for sh in cfg_shapes.values()]
    r1 = rng.standard_normal((1, s, 16, 16))
    r2 = rng.standard_normal((1, c, 16, 16))

    def fn(x, seg, *ws):
        params = {f"block{b}.{n}": t for n, t in zip(names, ws)}
        out, skip = gen.block_forward(x, seg, params, b)
        return T.add(T.sum_all(T.mul(out, Tensor(r1))), T.sum_all(T.mul(skip, Tensor(r2))))
    return fn, arrays


def _discriminator_case(rng):
    disc = Discriminator(DiscriminatorConfig(num_labels=2, base_exp=1), rng)
    names = list(disc.params)
    seg = rng.uniform(0, 1, (2, 2, 16, 16))
    arrays = [seg] + [disc.params[n].data.astype(np.float64) + (0.1 * rng.standard_normal(disc.params[n].shape) if n.endswith((".b", "beta")) else 0) for n in names]
    weights = np.array([0.7, -1.3])

    def fn(seg, *ws):
        disc.params = dict(zip(names, ws))
        return T.sum_all(T.mul(disc(seg, mode="train"), Tensor(weights)))
    return fn, arrays


def _crf_case(rng):
    psi = rng.standard_normal((1, 2, 3, 3))
    k = rng.uniform(0.2, 2.0, (1, 4, 3, 3))
    mu = rng.standard_normal((2, 2))
    r = rng.standard_normal((1, 2, 3, 3))

    def fn(psi, k, mu):
        return T.sum_all(T.mul(crf.mean_field_infer(psi, k, mu, iterations=5), Tensor(r)))
    return fn, [psi, k, mu]


def _bn_infer(x, g, b):
    rs = T.RunningStats(x.shape[1])
    rs.mean = np.linspace(-0.5, 0.5, x.shape[1])
    rs.var = np.linspace(0.5, 2.0, x.shape[1])
    return T.batch_norm(x, g, b, mode="infer", running=rs)


S = (2, 3, 4, 4)

CASES = {
    "add": _case(T.add, [S, (1, 3, 1, 1)]),
    "sub": _case(T.sub, [S, S]),
    "mul": _case(T.mul, [S, (1, 1, 4, 4)]),
    "neg": _case(T.neg, [S]),
    "scale": _case(lambda a: T.scale(a, -2.5), [S]),
    "sum_all": _case(lambda a: T.reshape(T.sum_all(a), (1,)), [S]),
    "mean_all": _case(lambda a: T.reshape(T.mean_all(a), (1,)), [S]),
    "sum_axes": _case(lambda a: T.sum_axes(a, (1, 3)), [S]),
    "reshape": _case(lambda a: T.reshape(a, (6, 16)), [S]),
    "concat": _case(lambda a, b: T.concat([a, b], axis=1), [S, (2, 2, 4, 4)]),
    "channel_slice": _case(lambda a: T.channel_slice(a, 1, 3), [S]),
    "flip_width": _case(T.flip_width, [S]),
    "relu": _case(T.relu, [S], kinked=True),
    "leaky_relu": _case(lambda a: T.leaky_relu(a, 0.2), [S], kinked=True),
    "sigmoid": _case(T.sigmoid, [S]),
    "tanh": _case(T.tanh, [S]),
    "exp": _case(T.exp, [S]),
    "log": _case(T.log, [S], positive=(0,)),
    "gated_activation": _case(T.gated_activation, [S, S]),
    "softmax_channels": _case(T.softmax_channels, [S]),
    "conv2d_direct": _case(lambda x, w, b: T.conv2d(x, w, b, pad=1, method="direct"), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_lowered": _case(lambda x, w, b: T.conv2d(x, w, b, pad=1), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_dilated": _case(lambda x, w: T.conv2d(x, w, pad=2, dilation=2), [(1, 2, 7, 7), (2, 2, 3, 3)]),
    "conv2d_strided": _case(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [(2, 2, 8, 8), (3, 2, 3, 3), (3,)]),
    "conv2d_pointwise": _case(lambda x, w: T.conv2d(x, w), [(2, 3, 4, 4), (2, 3, 1, 1)]),
    "linear": _case(T.linear, [(3, 5), (2, 5), (2,)]),
    "shift_up": _case(lambda a: T.spatial_shift(a, "up"), [S]),
    "shift_right": _case(lambda a: T.spatial_shift(a, "right"), [S]),
    "shift_down": _case(lambda a: T.spatial_shift(a, "down"), [S]),
    "shift_left": _case(lambda a: T.spatial_shift(a, "left"), [S]),
    "global_avg_pool": _case(T.global_avg_pool, [S]),
    "batch_norm_train": _case(lambda x, g, b: T.batch_norm(x, g, b, mode="train"), [S, (3,), (3,)]),
    "batch_norm_infer": _case(_bn_infer, [S, (3,), (3,)]),
    "message_passing": _case(crf.message_passing, [(1, 2, 3, 4), (1, 4, 3, 4)]),
    "compatibility_transform": _case(crf.compatibility_transform, [(1, 3, 3, 3), (3, 3)]),
    "local_update_normalize": _case(crf.local_update_normalize, [(1, 3, 3, 3), (1, 3, 3, 3)]),
    "generator_block_16x16": _block_case,
    "discriminator_16x16": _discriminator_case,
    "crf_5_iterations_3x3": _crf_case,
}

COMPOSITES = ("generator_block_16x16", "discriminator_16x16", "crf_5_iterations_3x3")
