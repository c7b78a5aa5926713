"""Convolutional discriminator scoring P-channel label maps as real or generated."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor

NUM_CONV = 4


@dataclass
class DiscriminatorConfig:
    num_labels: int = 3
    base_exp: int = 6  # layer i (1-based) has 2**(base_exp + i) kernels
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(2 ** (self.base_exp + i) for i in range(1, NUM_CONV + 1))


class Discriminator:
    """Four stride-2 3×3 convs with batch norm and leaky relu, global average pool, affine, sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.running: list[RunningStats] = []
        cin = cfg.num_labels
        for i, cout in enumerate(cfg.channels):
            fan_in = cin * 9
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
            self._add(f"conv{i}.w", w)
            self._add(f"conv{i}.b", np.zeros(cout))
            self._add(f"bn{i}.gamma", np.ones(cout))
            self._add(f"bn{i}.beta", np.zeros(cout))
            self.running.append(RunningStats(cout, cfg.bn_momentum))
            cin = cout
        self._add("fc.w", rng.standard_normal((1, cin)) * np.sqrt(2.0 / cin))
        self._add("fc.b", np.zeros(1))

    def _add(self, name, data):
        self.params[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)

    def forward(self, seg: Tensor, mode: str = "train") -> Tensor:
        """Probability (N,) that each input map is a ground truth."""
        if seg.ndim != 4 or seg.shape[1] != self.cfg.num_labels:
            raise T.ShapeError(f"expected N×{self.cfg.num_labels}×h×w, got {seg.shape}")
        if min(seg.shape[2:]) < 2**NUM_CONV:
            raise T.ShapeError(f"spatial size {seg.shape[2:]} too small for {NUM_CONV} stride-2 layers")
        p = self.params
        x = seg
        for i in range(NUM_CONV):
            x = T.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, pad=1)
            x = T.batch_norm(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], mode=mode, running=self.running[i])
            x = T.leaky_relu(x, self.cfg.leaky_slope)
        logit = T.linear(T.global_avg_pool(x), p["fc.w"], p["fc.b"])
        return T.sigmoid(T.reshape(logit, (seg.shape[0],)))

    __call__ = forward

    def spatial_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        sizes = []
        for _ in range(NUM_CONV):
            h, w = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
            sizes.append((h, w))
        return sizes

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for i, rs in enumerate(self.running):
            out[f"bn{i}.running_mean"] = rs.mean
            out[f"bn{i}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = np.asarray(arrays[name], dtype=np.float32).reshape(t.shape)
        for i, rs in enumerate(self.running):
            rs.mean = np.asarray(arrays[f"bn{i}.running_mean"], dtype=np.float32)
            rs.var = np.asarray(arrays[f"bn{i}.running_var"], dtype=np.float32)
