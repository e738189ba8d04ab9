"""Mapping a trained, batchnorm-free layer graph onto a spiking network.

The temporal code: a quantizer with clip s and b bits becomes an
integrate-and-fire stage with firing threshold theta = s, half a
threshold preloaded into the membrane, and a window of T = 2^b - 1 time
steps, so the spike count reproduces the quantizer's level index exactly.
Spikes are worth theta of input to the next stage, which is baked in by
scaling the next stage's weights by theta at conversion time (the first
stage reads the raw input as a direct current each step, so its weights
stay unscaled).  Biases stay per-step currents.  The classifier head
never spikes; its accumulated membrane is the readout.

Two evaluation schedules exist.  ``full_wait`` lets every stage consume
its predecessor's complete spike train before firing (total latency
T * stage count) and is exactly equivalent to the quantized graph.
``pipelined`` advances all stages together for T global ticks, which cuts
latency to T but admits ordering error: a membrane can cross threshold on
early charge that later negative charge would have cancelled.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .model import LayerDef, NetworkDef
from .numerics import REAL

NEURON_IF = "if"
NEURON_SIGNED_IF = "signed_if"
FULL_WAIT = "full_wait"
PIPELINED = "pipelined"

DEFAULT_NEG_THRESHOLD = -1e-3


class ConversionError(ValueError):
    pass


@dataclass
class Schedule:
    mode: str
    total_steps: int

    def __post_init__(self):
        if self.mode not in (FULL_WAIT, PIPELINED):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass
class SpikeParams:
    threshold: float
    neg_threshold: float
    initial_charge: float


@dataclass
class Stage:
    """One synaptic stage: routing ops plus exactly one weighted op, ending
    either in a spiking nonlinearity (spike set) or in the readout head."""

    ops: list
    spike: SpikeParams | None
    quant_index: int = -1   # layer index of the quantizer in the source graph

    @property
    def is_readout(self) -> bool:
        return self.spike is None

    @property
    def out_shape(self) -> tuple:
        return self.ops[-1].out_shape


@dataclass
class SpikingNetwork:
    name: str
    stages: list
    input_shape: tuple
    bits: int
    steps: int            # window length T = 2^bits - 1
    schedule: Schedule
    neuron_model: str
    meta: dict = field(default_factory=dict)

    def spiking_stages(self):
        return [s for s in self.stages if not s.is_readout]

    def clone(self) -> "SpikingNetwork":
        return copy.deepcopy(self)


def steps_for_bits(bits: int) -> int:
    if int(bits) < 1:
        raise ConversionError(f"bits must be >= 1, got {bits}")
    return 2 ** int(bits) - 1


def _split_stages(net: NetworkDef):
    """Group the folded layer list into synaptic stages.

    Every stage must hold exactly one fc/conv; quant_relu closes a stage,
    whatever is left at the end forms the readout stage.
    """
    stages = []
    ops = []
    weighted = 0
    for i, layer in enumerate(net.layers):
        if layer.kind == "batchnorm":
            raise ConversionError("network still has batchnorm; fold it before converting")
        if layer.kind == "plain_relu":
            raise ConversionError("plain_relu is not convertible; train with quant_relu")
        if layer.kind == "quant_relu":
            if weighted != 1:
                raise ConversionError(
                    f"stage ending at layer {i} has {weighted} weighted ops, expected 1"
                )
            stages.append((list(ops), i))
            ops, weighted = [], 0
            continue
        ops.append(layer)
        if layer.kind in ("fc", "conv"):
            weighted += 1
    if weighted != 1:
        raise ConversionError(f"readout stage has {weighted} weighted ops, expected 1")
    stages.append((list(ops), -1))
    return stages


def convert(net: NetworkDef, neuron_model: str = NEURON_IF, schedule_mode: str = FULL_WAIT,
            neg_threshold: float = DEFAULT_NEG_THRESHOLD,
            clip_overrides: list | None = None) -> SpikingNetwork:
    """Build a spiking network from a batchnorm-free quantized graph.

    ``clip_overrides`` replaces the learned clip of each spiking stage with
    an externally estimated threshold (same order as the stages); spike
    scaling of the following stage uses the override, keeping the network
    self-consistent.  All quantizers must share one bit width.
    """
    if neuron_model not in (NEURON_IF, NEURON_SIGNED_IF):
        raise ConversionError(f"unknown neuron model {neuron_model!r}")
    raw_stages = _split_stages(net)

    quant_bits = {int(net.layers[qi].params["bits"]) for _, qi in raw_stages if qi >= 0}
    if len(quant_bits) > 1:
        raise ConversionError(f"mixed quantizer bit widths {sorted(quant_bits)}")
    bits = quant_bits.pop() if quant_bits else net.bits
    steps = steps_for_bits(bits)

    n_spiking = sum(1 for _, qi in raw_stages if qi >= 0)
    if clip_overrides is not None and len(clip_overrides) != n_spiking:
        raise ConversionError(
            f"need {n_spiking} clip overrides, got {len(clip_overrides)}"
        )

    quant_to_stage = {}
    stages = []
    prev_threshold = None
    spiking_seen = 0
    for stage_pos, (ops, qi) in enumerate(raw_stages):
        ops = [LayerDef(o.kind, copy.deepcopy(o.params), o.in_shape, o.out_shape) for o in ops]
        for op in ops:
            if op.kind in ("fc", "conv") and prev_threshold is not None:
                op.params["weight"] = (op.params["weight"] * REAL(prev_threshold)).astype(REAL)
            if op.kind == "add_shortcut":
                src = op.params["source"]
                if src not in quant_to_stage:
                    raise ConversionError(
                        f"shortcut source layer {src} is not a quantized activation"
                    )
                src_stage = quant_to_stage[src]
                op.params["source_stage"] = src_stage
                op.params["source_scale"] = float(stages[src_stage].spike.threshold)
        if qi >= 0:
            if clip_overrides is not None:
                theta = float(clip_overrides[spiking_seen])
            else:
                theta = float(net.layers[qi].params["clip"])
            if not theta > 0:
                raise ConversionError(f"threshold for stage {stage_pos} must be > 0, got {theta}")
            spike = SpikeParams(threshold=theta, neg_threshold=float(neg_threshold),
                                initial_charge=theta / 2.0)
            quant_to_stage[qi] = stage_pos
            prev_threshold = theta
            spiking_seen += 1
        else:
            spike = None
        stages.append(Stage(ops=ops, spike=spike, quant_index=qi))

    total = steps * len(stages) if schedule_mode == FULL_WAIT else steps
    return SpikingNetwork(
        name=net.name, stages=stages, input_shape=net.input_shape, bits=bits,
        steps=steps, schedule=Schedule(schedule_mode, total), neuron_model=neuron_model,
        meta={"source_seed": net.seed},
    )


def with_neuron_model(snn: SpikingNetwork, neuron_model: str) -> SpikingNetwork:
    if neuron_model not in (NEURON_IF, NEURON_SIGNED_IF):
        raise ConversionError(f"unknown neuron model {neuron_model!r}")
    out = snn.clone()
    out.neuron_model = neuron_model
    return out


def with_schedule(snn: SpikingNetwork, schedule_mode: str) -> SpikingNetwork:
    out = snn.clone()
    total = out.steps * len(out.stages) if schedule_mode == FULL_WAIT else out.steps
    out.schedule = Schedule(schedule_mode, total)
    return out


def unscaled_weights(snn: SpikingNetwork):
    """Undo the conversion-time spike scaling; returns one weight array per
    stage, matching the source graph.  Conversion keeps no extra state, so
    this is a pure function of thresholds."""
    out = []
    prev_theta = None
    for stage in snn.stages:
        w = next(op.params["weight"] for op in stage.ops if op.kind in ("fc", "conv"))
        out.append(w if prev_theta is None else (w / REAL(prev_theta)).astype(REAL))
        if stage.spike is not None:
            prev_theta = stage.spike.threshold
    return out


# ---------------------------------------------------------------------------
# equivalence oracle


@dataclass
class EquivalenceReport:
    ok: bool
    tol: float
    max_dev: float
    per_stage_max_dev: list
    failures: list          # (stage, flat neuron index, expected, got)
    argmax_agreement: float

    def __str__(self):
        state = "OK" if self.ok else "MISMATCH"
        lines = [f"equivalence {state}: max |rate - activation/clip| = {self.max_dev:.3g} "
                 f"(tol {self.tol:g}), argmax agreement {self.argmax_agreement:.4f}"]
        for stage, neuron, want, got in self.failures[:10]:
            lines.append(f"  stage {stage} neuron {neuron}: expected {want:.6f}, got {got:.6f}")
        return "\n".join(lines)


def equivalence_check(ann: NetworkDef, snn: SpikingNetwork, inputs: np.ndarray,
                      tol: float = 1e-5) -> EquivalenceReport:
    """Compare full-wait firing rates against quantized activations.

    For every spiking stage the rate N/T must equal Q/s elementwise within
    ``tol``, and the readout argmax must match the graph's logits argmax.
    `snn` must run the full_wait schedule; the pipelined schedule is
    allowed to deviate and should not be checked with this oracle.
    """
    from .snn_sim import simulate

    if snn.schedule.mode != FULL_WAIT:
        raise ValueError("equivalence_check requires a full_wait schedule")
    from .model import forward

    logits, acts = forward(ann, inputs)
    readout, trace, _ = simulate(snn, inputs)
    per_stage = []
    failures = []
    max_dev = 0.0
    for pos, stage in enumerate(s for s in snn.stages if not s.is_readout):
        clip = float(ann.layers[stage.quant_index].params["clip"])
        expected = acts[stage.quant_index] / REAL(clip)
        got = trace.rates[pos]
        dev = np.abs(expected - got)
        stage_max = float(dev.max()) if dev.size else 0.0
        per_stage.append(stage_max)
        max_dev = max(max_dev, stage_max)
        if stage_max > tol:
            flat_dev = dev.reshape(dev.shape[0], -1)
            for sample, neuron in zip(*np.nonzero(flat_dev > tol)):
                failures.append((pos, int(neuron),
                                 float(expected.reshape(flat_dev.shape)[sample, neuron]),
                                 float(got.reshape(flat_dev.shape)[sample, neuron])))
                if len(failures) >= 32:
                    break
    agree = float((logits.argmax(axis=1) == readout.argmax(axis=1)).mean())
    return EquivalenceReport(ok=max_dev <= tol, tol=tol, max_dev=max_dev,
                             per_stage_max_dev=per_stage, failures=failures,
                             argmax_agreement=agree)


# ---------------------------------------------------------------------------
# persistence


def save(snn: SpikingNetwork, path: str):
    serialize.save_spiking(snn, path)


def load(path: str) -> SpikingNetwork:
    snn = serialize.load_any(path)
    if not isinstance(snn, SpikingNetwork):
        raise serialize.ModelFormatError(f"{path} holds a layer graph, not a spiking network")
    return snn
