"""Parameter stores, encoder/decoder channel constructors, and checkpointing.

A channel maps an input batch to one distribution head.  "linear" is a single
affine map straight to the head parameters; "nonlinear" inserts two tanh
layers (width 200 at paper scale) before the head.  Gaussian heads carry two
affine outputs (mean and log-std); Bernoulli and Concrete heads carry one.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .distributions import BernoulliParams, BinaryConcreteParams, DiagGaussianParams
from .numerics import (
    AdamState,
    ContractViolation,
    Node,
    RngStream,
    Tensor,
    adam_step,
    affine,
    clip,
    tanh,
)

LOG_STD_MIN, LOG_STD_MAX = -6.0, 2.0  # keeps early-training variances sane


class RegistrationError(ValueError):
    """A parameter name was registered twice."""


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not one this build reads."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint bytes are truncated, corrupted, or not a checkpoint at all."""


class CheckpointNameMismatch(CheckpointError):
    """Checkpoint parameter names do not match the model being loaded into."""


@dataclass
class ParamEntry:
    param: Tensor
    grad: Tensor
    adam: AdamState


class ParamStore:
    """Ordered name -> (param, grad, ADAM state) map.

    Iteration order is insertion order and is part of the determinism
    contract (initialization draws and checkpoint layout both follow it).
    """

    def __init__(self, lr: float = 3e-4):
        self.lr = lr
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, shape) -> None:
        if name in self._entries:
            raise RegistrationError(f"parameter {name!r} already registered")
        shape = tuple(int(d) for d in shape)
        self._entries[name] = ParamEntry(
            param=np.zeros(shape),
            grad=np.zeros(shape),
            adam=AdamState.zeros(shape, lr=self.lr),
        )

    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def total_params(self) -> int:
        return sum(e.param.size for e in self._entries.values())

    def arrays(self) -> dict[str, Tensor]:
        """Plain parameter views for evaluation-only forwards."""
        return {name: e.param for name, e in self._entries.items()}

    def leaves(self) -> dict[str, Node]:
        """Fresh graph leaves around the live parameter arrays."""
        return {name: Node(e.param) for name, e in self._entries.items()}

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.grad.fill(0.0)

    def accumulate(self, grads: dict[str, Tensor]) -> None:
        """Add a gradient dict into the stored gradients (additive contract)."""
        for name, g in grads.items():
            e = self._entries[name]
            if g.shape != e.grad.shape:
                raise ContractViolation(
                    f"gradient for {name!r} has shape {g.shape}, expected {e.grad.shape}"
                )
            e.grad += g

    def adam_apply(self) -> None:
        """One ADAM update per parameter from the stored gradients."""
        for e in self._entries.values():
            adam_step(e.param, e.grad, e.adam)


def init_params(store: ParamStore, rng: RngStream) -> None:
    """Glorot-uniform weights (2-D entries), zero biases (1-D entries)."""
    for name in store.names():
        p = store.entry(name).param
        if p.ndim == 2:
            fan_in, fan_out = p.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            p[...] = (rng.uniform01(p.shape) * 2.0 - 1.0) * bound
        else:
            p.fill(0.0)


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------


@dataclass
class ChannelSpec:
    input_dim: int
    output_dim: int
    hidden: str = "linear"  # "linear" | "nonlinear"
    head: str = "bernoulli"  # "bernoulli" | "gaussian" | "concrete"
    temperature: float = 0.5  # concrete heads only
    hidden_width: int = 200

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ContractViolation("channel dims must be positive")
        if self.hidden not in ("linear", "nonlinear"):
            raise ContractViolation(f"unknown hidden kind {self.hidden!r}")
        if self.head not in ("bernoulli", "gaussian", "concrete"):
            raise ContractViolation(f"unknown head kind {self.head!r}")

    def param_count(self) -> int:
        """Closed-form parameter count implied by the spec."""
        heads = 2 if self.head == "gaussian" else 1
        if self.hidden == "linear":
            return heads * (self.input_dim * self.output_dim + self.output_dim)
        w = self.hidden_width
        trunk = (self.input_dim * w + w) + (w * w + w)
        return trunk + heads * (w * self.output_dim + self.output_dim)


class Channel:
    """A built channel: forward(x, params) -> distribution head parameters."""

    def __init__(self, spec: ChannelSpec, prefix: str, names: list[str]):
        self.spec = spec
        self.prefix = prefix
        self.names = names

    def forward(self, x, params):
        """``params`` maps names to Nodes (training) or ndarrays (evaluation)."""
        p = lambda suffix: params[f"{self.prefix}.{suffix}"]
        h = x
        if self.spec.hidden == "nonlinear":
            h = tanh(affine(p("h1_w"), p("h1_b"), h))
            h = tanh(affine(p("h2_w"), p("h2_b"), h))
        if self.spec.head == "gaussian":
            mean = affine(p("mean_w"), p("mean_b"), h)
            log_std = clip(affine(p("log_std_w"), p("log_std_b"), h), LOG_STD_MIN, LOG_STD_MAX)
            return DiagGaussianParams(mean, log_std)
        logits = affine(p("head_w"), p("head_b"), h)
        if self.spec.head == "concrete":
            return BinaryConcreteParams(logits, self.spec.temperature)
        return BernoulliParams(logits)


def build_channel(spec: ChannelSpec, store: ParamStore, prefix: str) -> Channel:
    """Register the channel's parameters under ``prefix`` and return the channel."""
    for name in store.names():
        if name.startswith(prefix + "."):
            raise RegistrationError(f"prefix {prefix!r} already used in store")
    names = []

    def reg(suffix: str, shape):
        full = f"{prefix}.{suffix}"
        store.register(full, shape)
        names.append(full)

    in_dim = spec.input_dim
    if spec.hidden == "nonlinear":
        w = spec.hidden_width
        reg("h1_w", (spec.input_dim, w))
        reg("h1_b", (w,))
        reg("h2_w", (w, w))
        reg("h2_b", (w,))
        in_dim = w
    if spec.head == "gaussian":
        reg("mean_w", (in_dim, spec.output_dim))
        reg("mean_b", (spec.output_dim,))
        reg("log_std_w", (in_dim, spec.output_dim))
        reg("log_std_b", (spec.output_dim,))
    else:
        reg("head_w", (in_dim, spec.output_dim))
        reg("head_b", (spec.output_dim,))
    return Channel(spec, prefix, names)


# ---------------------------------------------------------------------------
# Binary container + checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic   8 bytes  (b"VCAEBIN1")
#   kind    4 bytes  (ASCII tag: b"CKPT" for checkpoints, b"DATA" for caches)
#   version u32
#   nblocks u32
#   per block: name u16-len + utf8, ndim u8, dims u32 each,
#              meta u64, payload float64 little-endian
#   crc32   u32 over everything before it

_MAGIC = b"VCAEBIN1"
_VERSION = 1


def write_container(path, kind: bytes, blocks: list[tuple[str, int, Tensor]]) -> None:
    """Write named float64 blocks (name, meta-int, array) with a trailing CRC."""
    if len(kind) != 4:
        raise ValueError("container kind tag must be 4 bytes")
    out = bytearray()
    out += _MAGIC
    out += kind
    out += struct.pack("<II", _VERSION, len(blocks))
    for name, meta, arr in blocks:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += struct.pack("<Q", meta)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_container(path, kind: bytes) -> list[tuple[str, int, Tensor]]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < len(_MAGIC) + 4 + 8 + 4:
        raise CheckpointIntegrityError(f"file too short ({len(buf)} bytes) to be a container")
    if buf[: len(_MAGIC)] != _MAGIC:
        raise CheckpointIntegrityError("bad magic: not a container file")
    if buf[len(_MAGIC) : len(_MAGIC) + 4] != kind:
        raise CheckpointIntegrityError(
            f"container kind {buf[len(_MAGIC):len(_MAGIC)+4]!r} does not match expected {kind!r}"
        )
    (crc_stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc_stored:
        raise CheckpointIntegrityError("checksum mismatch: truncated or corrupted file")
    pos = len(_MAGIC) + 4
    version, nblocks = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != _VERSION:
        raise CheckpointVersionError(f"container version {version}, expected {_VERSION}")
    blocks = []
    end = len(buf) - 4
    try:
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos) if ndim else ()
            pos += 4 * ndim
            (meta,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = count * 8
            if pos + nbytes > end:
                raise CheckpointIntegrityError(
                    f"payload for block {name!r} runs past byte {end}"
                )
            arr = np.frombuffer(buf[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
            pos += nbytes
            blocks.append((name, meta, arr))
    except struct.error as exc:
        raise CheckpointIntegrityError(f"malformed block table: {exc}") from exc
    return blocks


def checkpoint_save(store: ParamStore, path) -> None:
    """Bit-exact dump of parameters, ADAM moments, and step counters."""
    blocks: list[tuple[str, int, Tensor]] = [
        ("::lr", 0, np.array([store.lr]))
    ]
    for name in store.names():
        e = store.entry(name)
        blocks.append((f"{name}::param", e.adam.t, e.param))
        blocks.append((f"{name}::m", 0, e.adam.m))
        blocks.append((f"{name}::v", 0, e.adam.v))
    write_container(path, b"CKPT", blocks)


def checkpoint_load(path) -> ParamStore:
    blocks = read_container(path, b"CKPT")
    by_name = {name: (meta, arr) for name, meta, arr in blocks}
    if "::lr" not in by_name:
        raise CheckpointIntegrityError("missing learning-rate block")
    store = ParamStore(lr=float(by_name["::lr"][1][0]))
    for name, meta, arr in blocks:
        if not name.endswith("::param"):
            continue
        base = name[: -len("::param")]
        try:
            m = by_name[f"{base}::m"][1]
            v = by_name[f"{base}::v"][1]
        except KeyError as exc:
            raise CheckpointIntegrityError(f"missing moment block for {base!r}") from exc
        store.register(base, arr.shape)
        e = store.entry(base)
        e.param[...] = arr
        e.adam.m = m
        e.adam.v = v
        e.adam.t = int(meta)
    return store


def ensure_names_match(store: ParamStore, expected_names) -> None:
    """Raise CheckpointNameMismatch unless the name sets agree exactly."""
    have, want = set(store.names()), set(expected_names)
    if have != want:
        missing = sorted(want - have)[:4]
        extra = sorted(have - want)[:4]
        raise CheckpointNameMismatch(
            f"checkpoint names do not match model: missing {missing}, unexpected {extra}"
        )
