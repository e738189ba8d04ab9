"""Versioned binary container for trained and converted networks.

One format serves both network types; see docs/formats.md for the byte
layout.  Everything is little-endian.  The header is an 8-byte magic,
a u32 format version, and a u8 net type (0 = layer graph, 1 = spiking).
Parameter buffers are stored raw, so save/load round-trips are byte
exact.  All structural errors (bad magic, unknown version, truncation,
unknown layer kind) raise ModelFormatError and name the byte offset.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SPIKEQNT"
VERSION = 1
TYPE_GRAPH = 0
TYPE_SPIKING = 1

_TAG_F32_ARRAY = 0
_TAG_I64 = 1
_TAG_F64 = 2
_TAG_STR = 3
_TAG_I64_ARRAY = 4


class ModelFormatError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, b: bytes):
        self.buf += b

    def pack(self, fmt: str, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def string(self, s: str):
        enc = s.encode("utf-8")
        self.pack("H", len(enc))
        self.raw(enc)

    def shape(self, shape):
        self.pack("B", len(shape))
        for d in shape:
            self.pack("q", int(d))

    def value(self, v):
        if isinstance(v, np.ndarray) and v.dtype == np.float32:
            self.pack("B", _TAG_F32_ARRAY)
            self.shape(v.shape)
            self.raw(np.ascontiguousarray(v).tobytes())
        elif isinstance(v, np.ndarray) and v.dtype == np.int64:
            self.pack("B", _TAG_I64_ARRAY)
            self.shape(v.shape)
            self.raw(np.ascontiguousarray(v).tobytes())
        elif isinstance(v, (bool, int, np.integer)):
            self.pack("B", _TAG_I64)
            self.pack("q", int(v))
        elif isinstance(v, (float, np.floating)):
            self.pack("B", _TAG_F64)
            self.pack("d", float(v))
        elif isinstance(v, str):
            self.pack("B", _TAG_STR)
            self.string(v)
        else:
            raise TypeError(f"cannot serialize value of type {type(v).__name__}")

    def entries(self, mapping: dict):
        self.pack("H", len(mapping))
        for name in mapping:
            self.string(name)
            self.value(mapping[name])


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def fail(self, msg: str):
        raise ModelFormatError(f"{self.path}: {msg} at offset {self.off}")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            self.fail(f"truncated file (wanted {n} bytes, "
                      f"{len(self.data) - self.off} left)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        n = self.unpack("H")
        return self.take(n).decode("utf-8")

    def shape(self) -> tuple:
        ndim = self.unpack("B")
        return tuple(int(self.unpack("q")) for _ in range(ndim))

    def value(self):
        tag = self.unpack("B")
        if tag == _TAG_F32_ARRAY:
            shape = self.shape()
            count = int(np.prod(shape)) if shape else 1
            raw = self.take(count * 4)
            return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32).copy()
        if tag == _TAG_I64_ARRAY:
            shape = self.shape()
            count = int(np.prod(shape)) if shape else 1
            raw = self.take(count * 8)
            return np.frombuffer(raw, dtype="<i8").reshape(shape).copy()
        if tag == _TAG_I64:
            return int(self.unpack("q"))
        if tag == _TAG_F64:
            return float(self.unpack("d"))
        if tag == _TAG_STR:
            return self.string()
        self.fail(f"unknown value tag {tag}")

    def entries(self) -> dict:
        count = self.unpack("H")
        return {self.string(): self.value() for _ in range(count)}


def _write_layer(w: _Writer, layer):
    w.string(layer.kind)
    w.shape(layer.in_shape)
    w.shape(layer.out_shape)
    w.entries(layer.params)


def _read_layer(r: _Reader):
    from .model import LAYER_KINDS, LayerDef

    kind_off = r.off
    kind = r.string()
    if kind not in LAYER_KINDS:
        raise ModelFormatError(
            f"{r.path}: unknown layer kind {kind!r} at offset {kind_off}"
        )
    in_shape = r.shape()
    out_shape = r.shape()
    params = r.entries()
    return LayerDef(kind, params, in_shape, out_shape)


def save_network(net, path: str):
    w = _Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.pack("B", TYPE_GRAPH)
    w.string(net.name)
    w.shape(net.input_shape)
    w.entries({
        "bits": net.bits,
        "seed": net.seed,
        "weight_bits": -1 if net.weight_bits is None else net.weight_bits,
        **{k: v for k, v in net.meta.items() if isinstance(v, (bool, int, float, str))},
    })
    w.pack("I", len(net.layers))
    for layer in net.layers:
        _write_layer(w, layer)
    with open(path, "wb") as f:
        f.write(bytes(w.buf))


def save_spiking(snn, path: str):
    w = _Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.pack("B", TYPE_SPIKING)
    w.string(snn.name)
    w.shape(snn.input_shape)
    w.entries({
        "bits": snn.bits,
        "steps": snn.steps,
        "schedule_mode": snn.schedule.mode,
        "total_steps": snn.schedule.total_steps,
        "neuron_model": snn.neuron_model,
        **{k: v for k, v in snn.meta.items() if isinstance(v, (bool, int, float, str))},
    })
    w.pack("I", len(snn.stages))
    for stage in snn.stages:
        w.pack("H", len(stage.ops))
        for op in stage.ops:
            _write_layer(w, op)
        if stage.spike is None:
            w.pack("B", 0)
        else:
            w.pack("B", 1)
            w.entries({
                "threshold": stage.spike.threshold,
                "neg_threshold": stage.spike.neg_threshold,
                "initial_charge": stage.spike.initial_charge,
                "quant_index": stage.quant_index,
            })
    with open(path, "wb") as f:
        f.write(bytes(w.buf))


def load_any(path: str):
    """Load either container type; dispatches on the net-type byte."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise ModelFormatError(
            f"{path}: bad magic {magic!r} at offset 0 (expected {MAGIC!r})"
        )
    version = r.unpack("I")
    if version != VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format version {version} (expected {VERSION})"
        )
    net_type = r.unpack("B")
    name = r.string()
    input_shape = r.shape()
    meta = r.entries()

    if net_type == TYPE_GRAPH:
        from .model import NetworkDef

        bits = meta.pop("bits")
        seed = meta.pop("seed")
        weight_bits = meta.pop("weight_bits")
        layer_count = r.unpack("I")
        layers = [_read_layer(r) for _ in range(layer_count)]
        if r.off != len(data):
            r.fail(f"{len(data) - r.off} trailing bytes")
        return NetworkDef(name, layers, input_shape, bits, seed,
                          weight_bits=None if weight_bits < 0 else weight_bits,
                          meta=meta)

    if net_type == TYPE_SPIKING:
        from .convert import Schedule, SpikeParams, SpikingNetwork, Stage

        bits = meta.pop("bits")
        steps = meta.pop("steps")
        schedule = Schedule(meta.pop("schedule_mode"), meta.pop("total_steps"))
        neuron_model = meta.pop("neuron_model")
        stage_count = r.unpack("I")
        stages = []
        for _ in range(stage_count):
            op_count = r.unpack("H")
            ops = [_read_layer(r) for _ in range(op_count)]
            has_spike = r.unpack("B")
            if has_spike:
                sp = r.entries()
                spike = SpikeParams(sp["threshold"], sp["neg_threshold"], sp["initial_charge"])
                quant_index = int(sp["quant_index"])
            else:
                spike, quant_index = None, -1
            stages.append(Stage(ops=ops, spike=spike, quant_index=quant_index))
        if r.off != len(data):
            r.fail(f"{len(data) - r.off} trailing bytes")
        return SpikingNetwork(name=name, stages=stages, input_shape=input_shape,
                              bits=bits, steps=steps, schedule=schedule,
                              neuron_model=neuron_model, meta=meta)

    raise ModelFormatError(f"{path}: unknown net type {net_type} at offset 13")
