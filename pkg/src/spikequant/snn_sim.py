"""Clock-driven simulation of converted spiking networks.

Neuron dynamics (reset by subtraction, at most one event per step):

* ``if``: add the incoming charge to the membrane; if it reaches the
  threshold, emit +1 and subtract the threshold.
* ``signed_if``: same positive branch; otherwise, if the membrane has sunk
  to the negative threshold AND the neuron has a positive spike balance,
  emit -1 and add the threshold back.  The balance gate keeps firing
  rates in [0, 1]; negative spikes can only cancel earlier positives.

The membrane bookkeeping satisfies
    V = initial_charge + sum(charges) - threshold * count
after any number of steps, where count is the net (positive minus
negative) spike count.  Traces record enough to check this.

Schedules
---------
``full_wait`` evaluates stages sequentially over buffered spike trains:
each stage integrates its predecessor's complete T-step train, then fires
through its own T-step window.  ``pipelined`` advances the whole network
one global tick at a time for T ticks; within a tick, spikes cascade
through the stages in order.

Synaptic operation counts follow the event-driven accounting: one op is
one weight-accumulate triggered by one spike (negative spikes count too)
along one outgoing projection.  The static graph count is fan-in times
neuron count summed over weighted stages, plus one accumulate per element
for each shortcut add.  Direct-current input injection into the first
stage is not spike-driven and is excluded from the spiking count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convert import FULL_WAIT, NEURON_IF, NEURON_SIGNED_IF, PIPELINED, SpikingNetwork, _split_stages
from .model import NetworkDef
from .numerics import REAL, as_real, avgpool2d, conv2d, fc_forward


@dataclass
class NeuronState:
    """Vectorized state of one spiking stage: membrane and net spike count."""

    potential: np.ndarray
    count: np.ndarray

    @classmethod
    def fresh(cls, shape, initial_charge: float):
        return cls(potential=np.full(shape, REAL(initial_charge), dtype=REAL),
                   count=np.zeros(shape, dtype=REAL))


def if_step(state: NeuronState, charge: np.ndarray, threshold: float):
    """One integrate-and-fire step.  Returns spikes in {0, +1}."""
    theta = REAL(threshold)
    state.potential += as_real(charge)
    fired = state.potential >= theta
    state.potential -= theta * fired
    state.count += fired
    return fired.astype(REAL)


def sif_step(state: NeuronState, charge: np.ndarray, threshold: float,
             neg_threshold: float):
    """One signed integrate-and-fire step.  Returns spikes in {-1, 0, +1}.

    The positive branch wins if both could trigger; the negative branch
    additionally requires a positive spike balance (count >= 1).
    """
    theta = REAL(threshold)
    state.potential += as_real(charge)
    pos = state.potential >= theta
    neg = (~pos) & (state.potential <= REAL(neg_threshold)) & (state.count >= REAL(1.0))
    state.potential -= theta * pos
    state.potential += theta * neg
    spikes = pos.astype(REAL) - neg.astype(REAL)
    state.count += spikes
    return spikes


@dataclass
class SpikeTrace:
    """Per-stage recording of one simulation run (spiking stages only)."""

    mode: str
    steps: int
    spikes: list = field(default_factory=list)          # (T, N, *shape) each
    counts: list = field(default_factory=list)          # net counts (N, *shape)
    rates: list = field(default_factory=list)           # counts / T
    charge_totals: list = field(default_factory=list)   # summed charges (N, *shape)
    final_potentials: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    initial_charges: list = field(default_factory=list)


@dataclass
class OpCounters:
    """Synaptic-op accounting for one batch (totals over all samples)."""

    ann_ops: int
    snn_ops: int
    samples: int
    per_stage_spikes: list

    @property
    def ratio(self) -> float:
        return self.snn_ops / self.ann_ops if self.ann_ops else float("nan")


def _apply_ops(ops, x, source_spikes):
    """Run one stage's synaptic ops on one step's input.

    ``source_spikes`` maps a stage index to that step's spikes, used by
    shortcut adds; the stored scale converts spikes to charge units.
    """
    cur = x
    for op in ops:
        p = op.params
        if op.kind == "fc":
            cur = fc_forward(cur.reshape(cur.shape[0], -1), p["weight"], p["bias"])
        elif op.kind == "conv":
            cur = conv2d(cur, p["weight"], p["stride"], p["pad"])
            cur += p["bias"][None, :, None, None]
        elif op.kind == "avgpool":
            cur = avgpool2d(cur, p["size"])
        elif op.kind == "add_shortcut":
            cur = cur + REAL(p["source_scale"]) * source_spikes(p["source_stage"])
        else:
            raise ValueError(f"op kind {op.kind!r} cannot run in a spiking stage")
    return cur


def _fire_window(x_tilde, stage, steps, neuron_model):
    """Fire a stage for ``steps`` ticks with all input already integrated."""
    state = NeuronState(potential=x_tilde.copy(), count=np.zeros_like(x_tilde))
    zero = np.zeros_like(x_tilde)
    train = np.empty((steps,) + x_tilde.shape, dtype=REAL)
    for t in range(steps):
        if neuron_model == NEURON_SIGNED_IF:
            train[t] = sif_step(state, zero, stage.spike.threshold, stage.spike.neg_threshold)
        else:
            train[t] = if_step(state, zero, stage.spike.threshold)
    return train, state


def _simulate_full_wait(snn: SpikingNetwork, x):
    steps = snn.steps
    batch = x.shape[0]
    trace = SpikeTrace(mode=FULL_WAIT, steps=steps)
    trains = {}
    readout = None
    for si, stage in enumerate(snn.stages):
        if si == 0:
            # direct-current input: the same charge arrives every step
            stacked = np.tile(x, (steps,) + (1,) * (x.ndim - 1))
        else:
            prev = trains[si - 1]
            stacked = prev.reshape((steps * batch,) + prev.shape[2:])

        def src(stage_idx):
            t = trains[stage_idx]
            return t.reshape((steps * batch,) + t.shape[2:])

        z = _apply_ops(stage.ops, stacked, src)
        charges = z.reshape((steps, batch) + z.shape[1:])
        total = charges.sum(axis=0, dtype=REAL)
        if stage.is_readout:
            readout = total
            continue
        x_tilde = REAL(stage.spike.initial_charge) + total
        train, state = _fire_window(x_tilde, stage, steps, snn.neuron_model)
        trains[si] = train
        trace.spikes.append(train)
        trace.counts.append(state.count.copy())
        trace.rates.append((state.count / REAL(steps)).astype(REAL))
        trace.charge_totals.append(total)
        trace.final_potentials.append(state.potential.copy())
        trace.thresholds.append(stage.spike.threshold)
        trace.initial_charges.append(stage.spike.initial_charge)
    return readout, trace


def _simulate_pipelined(snn: SpikingNetwork, x):
    steps = snn.steps
    batch = x.shape[0]
    trace = SpikeTrace(mode=PIPELINED, steps=steps)
    spiking = [si for si, s in enumerate(snn.stages) if not s.is_readout]
    states = {}
    trains = {}
    charge_sums = {}
    for si in spiking:
        shape = (batch,) + snn.stages[si].out_shape
        states[si] = NeuronState.fresh(shape, snn.stages[si].spike.initial_charge)
        trains[si] = np.empty((steps,) + shape, dtype=REAL)
        charge_sums[si] = np.zeros(shape, dtype=REAL)
    readout = None
    spikes_now = {}
    for t in range(steps):
        for si, stage in enumerate(snn.stages):
            inp = x if si == 0 else spikes_now[si - 1]
            z = _apply_ops(stage.ops, inp, lambda s: spikes_now[s])
            if stage.is_readout:
                readout = z if readout is None else readout + z
                continue
            if snn.neuron_model == NEURON_SIGNED_IF:
                spk = sif_step(states[si], z, stage.spike.threshold,
                               stage.spike.neg_threshold)
            else:
                spk = if_step(states[si], z, stage.spike.threshold)
            spikes_now[si] = spk
            trains[si][t] = spk
            charge_sums[si] += z
    for si in spiking:
        stage = snn.stages[si]
        trace.spikes.append(trains[si])
        trace.counts.append(states[si].count.copy())
        trace.rates.append((states[si].count / REAL(steps)).astype(REAL))
        trace.charge_totals.append(charge_sums[si])
        trace.final_potentials.append(states[si].potential.copy())
        trace.thresholds.append(stage.spike.threshold)
        trace.initial_charges.append(stage.spike.initial_charge)
    return readout, trace


def simulate(snn: SpikingNetwork, x: np.ndarray):
    """Run one batch through the spiking network.

    Returns (readout, trace, ops): the accumulated classifier membrane
    (argmax it for predictions), the per-stage spike trace, and the
    synaptic-op counters for this batch.
    """
    x = as_real(x)
    if x.ndim == len(snn.input_shape):
        x = x[None]
    if snn.schedule.mode == FULL_WAIT:
        readout, trace = _simulate_full_wait(snn, x)
    elif snn.schedule.mode == PIPELINED:
        readout, trace = _simulate_pipelined(snn, x)
    else:
        raise ValueError(f"unknown schedule mode {snn.schedule.mode!r}")
    ops = _count_from_stages([(s.ops, s.is_readout) for s in snn.stages], trace,
                             samples=x.shape[0])
    return readout, trace, ops


def scaled_rates(snn: SpikingNetwork, trace: SpikeTrace):
    """Rates expressed in activation units: threshold * count / T per stage."""
    out = []
    for stage, counts in zip(snn.spiking_stages(), trace.counts):
        scale = REAL(stage.spike.threshold) / REAL(trace.steps)
        out.append((counts * scale).astype(REAL))
    return out


# ---------------------------------------------------------------------------
# synaptic-op accounting


def _conv_coverage(in_hw, kernel, stride, pad, out_hw):
    """How many kernel applications read each input pixel."""
    h, w = in_hw
    oh, ow = out_hw
    cov = np.zeros((h + 2 * pad, w + 2 * pad), dtype=np.int64)
    for a in range(kernel):
        for b in range(kernel):
            cov[a : a + oh * stride : stride, b : b + ow * stride : stride] += 1
    return cov[pad : pad + h, pad : pad + w]


def _weighted_op_static_cost(op) -> int:
    p = op.params
    if op.kind == "fc":
        return int(np.prod(op.in_shape)) * int(np.prod(op.out_shape))
    if op.kind == "conv":
        o, c, kh, kw = p["weight"].shape
        return c * kh * kw * int(np.prod(op.out_shape))
    raise ValueError(op.kind)


def _fanout_through_ops(ops, in_shape):
    """Per-input-element projection count into the weighted op of a stage.

    Routing ops ahead of the weighted op reshape the mapping (a pooled
    pixel inherits the fan-out of its pooling cell); the weighted op sets
    the base counts; adds after it do not touch the main path.
    """
    widx = next(i for i, op in enumerate(ops) if op.kind in ("fc", "conv"))
    wop = ops[widx]
    if wop.kind == "fc":
        fan = np.full(wop.in_shape, int(np.prod(wop.out_shape)), dtype=np.int64)
    else:
        o, c, kh, kw = wop.params["weight"].shape
        cov = _conv_coverage(wop.in_shape[1:], kh, wop.params["stride"],
                             wop.params["pad"], wop.out_shape[1:])
        fan = np.broadcast_to(cov * o, wop.in_shape).copy()
    for op in reversed(ops[:widx]):
        if op.kind == "avgpool":
            k = op.params["size"]
            fan = np.repeat(np.repeat(fan, k, axis=-2), k, axis=-1)
        elif op.kind == "add_shortcut":
            continue
        else:
            raise ValueError(f"unexpected routing op {op.kind!r}")
    return fan


def _count_from_stages(stage_views, trace: SpikeTrace, samples: int) -> OpCounters:
    """stage_views: list of (ops, is_readout) in network order."""
    static_per_sample = 0
    for ops, _ in stage_views:
        for op in ops:
            if op.kind in ("fc", "conv"):
                static_per_sample += _weighted_op_static_cost(op)
            elif op.kind == "add_shortcut":
                static_per_sample += int(np.prod(op.out_shape))

    spiking_positions = [i for i, (_, readout) in enumerate(stage_views) if not readout]
    fanouts = []
    for pos_idx, si in enumerate(spiking_positions):
        ops_next = stage_views[si + 1][0]
        fan = _fanout_through_ops(ops_next, stage_views[si][0][-1].out_shape).astype(np.int64)
        for other_ops, _ in stage_views:
            for op in other_ops:
                if op.kind == "add_shortcut" and op.params.get("source_stage") == si:
                    fan = fan + 1   # identity projection into the add junction
        fanouts.append(fan)

    snn_ops = 0
    per_stage = []
    for fan, spikes in zip(fanouts, trace.spikes):
        events = np.abs(spikes).sum(axis=(0, 1)).astype(np.int64)
        per_stage.append(int(events.sum()))
        snn_ops += int((events * fan).sum())
    return OpCounters(ann_ops=static_per_sample * samples, snn_ops=snn_ops,
                      samples=samples, per_stage_spikes=per_stage)


def count_ops(ann: NetworkDef, trace: SpikeTrace, samples: int | None = None) -> OpCounters:
    """Synaptic-op counters from the static graph plus a recorded trace.

    ``ann`` must be the batchnorm-free graph the spiking network came from
    (the geometry defines fan-in and fan-out; weights do not matter here).
    """
    raw = _split_stages(ann)
    quant_to_stage = {qi: pos for pos, (_, qi) in enumerate(raw) if qi >= 0}
    views = []
    for ops, qi in raw:
        ops = list(ops)
        for i, op in enumerate(ops):
            if op.kind == "add_shortcut" and "source_stage" not in op.params:
                src = op.params["source"]
                if src not in quant_to_stage:
                    raise ValueError(f"shortcut source layer {src} is not a quantized activation")
                patched = dict(op.params, source_stage=quant_to_stage[src])
                from .model import LayerDef
                ops[i] = LayerDef(op.kind, patched, op.in_shape, op.out_shape)
        views.append((ops, qi < 0))
    n_spiking = sum(1 for _, readout in views if not readout)
    if len(trace.spikes) != n_spiking:
        raise ValueError(
            f"trace has {len(trace.spikes)} spiking stages, graph has {n_spiking}"
        )
    if samples is None:
        samples = trace.spikes[0].shape[1] if trace.spikes else 1
    return _count_from_stages(views, trace, samples)


def accuracy_from_readout(readout: np.ndarray, labels: np.ndarray) -> float:
    return float((readout.argmax(axis=1) == labels).mean())
