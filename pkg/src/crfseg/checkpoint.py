"""Binary checkpoint container.

Layout (little-endian)::

    b"CRFS"  u32 version=1  u32 record_count
    per record: u16 name_len, name (UTF-8), u8 ndim, u32 dims[ndim], f32 payload
    u32 CRC32 of every preceding byte

Non-tensor metadata (the config echo and the step counter) travel as ordinary
f32 records under the ``meta.`` prefix.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SCHEMES, format_region_table, parse_region_table

MAGIC = b"CRFS"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class CrcError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict[str, str] = field(default_factory=dict)
    step: int = 0


def _text_to_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _record_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    records = dict(ckpt.tensors)
    config_text = "".join(f"{k} = {v}\n" for k, v in ckpt.config.items())
    records["meta.config"] = _text_to_record(config_text)
    records["meta.step"] = np.array([ckpt.step >> 16, ckpt.step & 0xFFFF], dtype=np.float32)

    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dimensions")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise CrcError("file truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(blob) < 16:
        raise CrcError("file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CrcError("CRC mismatch: file corrupted or truncated")

    (count,) = struct.unpack_from("<I", body, 8)
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed record table: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last record")

    config = {}
    if "meta.config" in tensors:
        for line in _record_to_text(tensors.pop("meta.config")).splitlines():
            k, v = line.split(" = ", 1)
            config[k] = v
    step = 0
    if "meta.step" in tensors:
        hi, lo = tensors.pop("meta.step").astype(np.int64)
        step = int(hi) << 16 | int(lo)
    return Checkpoint(tensors, config, step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model <-> checkpoint

_GEN_KEYS = ("num_labels", "channels", "stem_channels", "head_channels", "in_channels", "variant",
             "bias_mode", "crf_iterations", "q_init",
             "mu_init")


def pack_model(model, optimizers=None, train_cfg=None, epoch: int = 0) -> Checkpoint:
    """Collect generator/discriminator parameters, Adam moments and config echo."""
    from dataclasses import asdict

    tensors = {f"gen.{k}": t.data for k, t in model.gen_params.items()}
    if model.disc is not None:
        tensors.update({f"disc.{k}": v for k, v in model.disc.state_arrays().items()})
    if model.template is not None:
        tensors["meta.template"] = np.asarray(model.template, dtype=np.float32)
    step = 0
    if optimizers is not None:
        for tag, opt in zip(("gen", "dis"), optimizers):
            if opt is None:
                continue
            for k in opt.params:
                tensors[f"adam.{tag}.m.{k}"] = opt.m[k]
                tensors[f"adam.{tag}.v.{k}"] = opt.v[k]
            tensors[f"adam.{tag}.t"] = np.array([opt.t], dtype=np.float32)
        step = optimizers[0].t
    g = model.gen_cfg
    config = {f"gen.{k}": str(getattr(g, k)) for k in _GEN_KEYS}
    config["gen.input_hw"] = f"{g.input_hw[0]},{g.input_hw[1]}"
    scheme = model.scheme_obj()
    config["scheme"] = scheme.name
    config["scheme.table"] = format_region_table(scheme).strip().replace("\n", " | ")
    config["epoch"] = str(epoch)
    if model.disc is not None:
        config["disc.base_exp"] = str(model.disc.cfg.base_exp)
        config["disc.leaky_slope"] = str(model.disc.cfg.leaky_slope)
    if train_cfg is not None:
        for k, v in asdict(train_cfg).items():
            config[f"train.{k}"] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return Checkpoint(tensors, config, step)


def unpack_model(ckpt: Checkpoint):
    """Rebuild a trainer.Model from a checkpoint (Adam state is left in ``ckpt.tensors``)."""
    from .discriminator import Discriminator, DiscriminatorConfig
    from .generator import GeneratorConfig
    from .tensor import Tensor
    from .trainer import Model

    c = ckpt.config
    try:
        gcfg = GeneratorConfig(
            num_labels=int(c["gen.num_labels"]),
            input_hw=tuple(int(v) for v in c["gen.input_hw"].split(",")),
            channels=int(c["gen.channels"]),
            stem_channels=int(c["gen.stem_channels"]),
            head_channels=int(c["gen.head_channels"]),
            in_channels=int(c["gen.in_channels"]),
            variant=c["gen.variant"],
            bias_mode=c["gen.bias_mode"],
            crf_iterations=int(c["gen.crf_iterations"]),
            q_init=c["gen.q_init"],
            mu_init=c.get("gen.mu_init", "potts"),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks config key {exc}") from exc
    params = {}
    for name, shape in gcfg.param_shapes().items():
        arr = ckpt.tensors.get(f"gen.{name}")
        if arr is None or arr.shape != shape:
            raise CheckpointError(f"generator tensor {name} missing or mis-shaped")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    disc = None
    if "disc.base_exp" in c:
        dcfg = DiscriminatorConfig(gcfg.num_labels, int(c["disc.base_exp"]), float(c["disc.leaky_slope"]))
        disc = Discriminator(dcfg, np.random.default_rng(0))
        disc.load_arrays({k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("disc.")})
    template = ckpt.tensors.get("meta.template")
    scheme = c.get("scheme", "parts3")
    if "scheme.table" in c:
        table = parse_region_table(c["scheme.table"].replace(" | ", "\n"), scheme)
        scheme = table if scheme not in SCHEMES or SCHEMES[scheme] != table else scheme
    return Model(gcfg, params, disc, scheme, None if template is None else template.astype(np.float64))


def restore_optimizers(ckpt: Checkpoint, model, train_cfg):
    from .trainer import Adam

    opts = []
    for tag, params in (("gen", model.gen_params), ("dis", model.disc.params if model.disc else None)):
        if params is None or f"adam.{tag}.t" not in ckpt.tensors:
            opts.append(None)
            continue
        opt = Adam(params, train_cfg)
        opt.t = int(ckpt.tensors[f"adam.{tag}.t"][0])
        for k in params:
            opt.m[k] = ckpt.tensors[f"adam.{tag}.m.{k}"].copy()
            opt.v[k] = ckpt.tensors[f"adam.{tag}.v.{k}"].copy()
        opts.append(opt)
    return tuple(opts)
