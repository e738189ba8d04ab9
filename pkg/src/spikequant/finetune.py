"""Layer-wise fine-tuning of a converted network against its source graph.

Pipelined evaluation accumulates ordering error front to back: stage l
sees spike trains that already deviate from the activations stage l was
trained on.  The repair loop walks the interior stages (the first stage
sees direct currents and has no such error; the readout is left alone)
and, for each one, trains a proxy of that stage alone:

* input: the firing rates of the previous stage, as simulated;
* target: the source graph's quantized activation at this stage;
* output: computed by the proxy, then value-replaced with the stage's
  simulated firing rates (in activation units) before the loss, so the
  error being minimized is the one the spiking network actually makes,
  while gradients flow through the proxy's quantizer straight-through.

The loss is the mean of squared differences.  Only the stage's weights
and biases move; thresholds, windows and every other stage's parameters
stay bit-identical.  After each optimizer step the proxy parameters are
written back into the spiking network, so later batches simulate the
updated stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convert import PIPELINED, SpikingNetwork
from .data import Dataset
from .model import NetworkDef, forward
from .numerics import (
    REAL,
    SgdConfig,
    conv2d,
    conv2d_backward,
    fc_backward,
    fc_forward,
    avgpool2d,
    rng_for,
    sgd_step,
)
from .qat import QuantSpec, quantize_backward
from .snn_sim import scaled_rates, simulate


class StructureError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    optimizer: SgdConfig = field(default_factory=lambda: SgdConfig(
        learning_rate=1e-4, momentum=0.9, weight_decay=0.0))
    passes: int = 1
    batch_size: int = 64
    shuffle_seed: int = 0


def layer_rate_maps(snn: SpikingNetwork, x: np.ndarray):
    """Firing-rate maps (count / T) of every spiking stage for input x."""
    _, trace, _ = simulate(snn, x)
    return trace.rates


def _check_structure(ann: NetworkDef, snn: SpikingNetwork):
    from .convert import _split_stages

    raw = _split_stages(ann)
    if len(raw) != len(snn.stages):
        raise StructureError(
            f"stage count mismatch: graph has {len(raw)}, spiking net has {len(snn.stages)}"
        )
    for pos, ((ops, qi), stage) in enumerate(zip(raw, snn.stages)):
        kinds = [o.kind for o in ops]
        skinds = [o.kind for o in stage.ops]
        if kinds != skinds:
            raise StructureError(f"stage {pos} ops differ: graph {kinds}, spiking {skinds}")
        if qi != stage.quant_index:
            raise StructureError(
                f"stage {pos} quantizer index differs: graph {qi}, spiking {stage.quant_index}"
            )


def _proxy_forward(stage, rates_in, stage_rates):
    """Evaluate one stage in rate coordinates, caching what backward needs."""
    cur = rates_in
    cache = {"ops": []}
    for op in stage.ops:
        p = op.params
        if op.kind == "fc":
            flat = cur.reshape(cur.shape[0], -1)
            cache["ops"].append(("fc", {"x_flat": flat, "weight": p["weight"]}))
            cur = fc_forward(flat, p["weight"], p["bias"])
        elif op.kind == "conv":
            cache["ops"].append(("conv", {"x": cur, "weight": p["weight"],
                                          "stride": p["stride"], "pad": p["pad"]}))
            cur = conv2d(cur, p["weight"], p["stride"], p["pad"])
            cur += p["bias"][None, :, None, None]
        elif op.kind == "avgpool":
            cache["ops"].append(("avgpool", {}))
            cur = avgpool2d(cur, p["size"])
        elif op.kind == "add_shortcut":
            # the shortcut rates are data for the proxy, not parameters
            cache["ops"].append(("add_shortcut", {}))
            cur = cur + REAL(p["source_scale"]) * stage_rates[p["source_stage"]]
        else:
            raise StructureError(f"op kind {op.kind!r} cannot be fine-tuned")
    return cur, cache


def _proxy_backward(stage, cache, grad_pre):
    """Gradients of the stage's weighted op only; routing input grads are
    not needed because nothing upstream of the stage is being trained."""
    grads = {}
    g = grad_pre
    for (kind, c), op in zip(reversed(cache["ops"]), reversed(stage.ops)):
        if kind == "fc":
            _, gw, gb = fc_backward(c["x_flat"], c["weight"], g)
            grads["weight"], grads["bias"] = gw, gb
            break
        if kind == "conv":
            _, gw = conv2d_backward(c["x"], c["weight"], g, c["stride"], c["pad"])
            grads["weight"] = gw
            grads["bias"] = g.sum(axis=(0, 2, 3), dtype=REAL)
            break
        # add_shortcut passes the main-path gradient through unchanged;
        # routing ops before the weighted op never carry parameters
        if kind == "add_shortcut":
            continue
        raise StructureError(f"unexpected op {kind!r} behind the weighted op")
    return grads


def finetune(ann: NetworkDef, snn: SpikingNetwork, data: Dataset,
             cfg: FinetuneConfig | None = None):
    """Returns (tuned spiking network, per-stage loss curves).

    ``ann`` is the folded graph the network was converted from and serves
    as the frozen reference.  The input ``snn`` is not modified; expect
    the pipelined schedule (full_wait rates already match the reference,
    so the loss sits at zero and the loop is a no-op).  Curves map stage
    position to the per-batch loss sequence, in tuning order.
    """
    cfg = cfg or FinetuneConfig()
    _check_structure(ann, snn)
    snn = snn.clone()
    order_gen = rng_for(cfg.shuffle_seed)
    curves = {}
    interior = range(1, len(snn.stages) - 1)
    for pos in interior:
        stage = snn.stages[pos]
        spec = QuantSpec(bits=snn.bits, clip=float(stage.spike.threshold))
        wop = next(op for op in stage.ops if op.kind in ("fc", "conv"))
        params = {"weight": wop.params["weight"], "bias": wop.params["bias"]}
        state = {}
        losses = []
        for _ in range(cfg.passes):
            order = order_gen.permutation(len(data))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb = data.images[idx]
                _, acts = forward(ann, xb)
                ref = acts[stage.quant_index]
                _, trace, _ = simulate(snn, xb)
                in_rates = trace.rates[pos - 1]
                value_rates = scaled_rates(snn, trace)
                pre, cache = _proxy_forward(stage, in_rates, value_rates)
                out_value = value_rates[pos]
                diff = out_value - ref
                losses.append(float(np.mean(diff * diff)))
                grad_out = (REAL(2.0) / REAL(diff.size)) * diff
                grad_pre, _ = quantize_backward(grad_out, pre, spec)
                grads = _proxy_backward(stage, cache, grad_pre)
                sgd_step(params, grads, state, cfg.optimizer)
        curves[pos] = losses
    return snn, curves
