"""Layer-graph definition, training, and batch-norm folding.

A network is an ordered list of layers.  Supported kinds:

==============  ============================================================
fc              dense y = x W^T + b; flattens its input if needed
conv            2-d cross-correlation, stride/pad in params
batchnorm       per-channel batch norm; must directly follow fc/conv
quant_relu      clipped b-bit activation quantizer with learnable clip
plain_relu      max(0, x), kept for float baselines; not convertible
avgpool         non-overlapping average pooling, window == stride
add_shortcut    adds the recorded output of an earlier layer (residual)
==============  ============================================================

The final layer of every architecture here is a plain fc classifier head:
it is never quantized and never spikes after conversion (its membrane is
read out directly).  Training is plain minibatch SGD with hand-written
backward rules; gradients for the quantizer follow the straight-through
rules in :mod:`spikequant.qat`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .data import Dataset
from .numerics import (
    REAL,
    SgdConfig,
    as_real,
    avgpool2d,
    avgpool2d_backward,
    conv2d,
    conv2d_backward,
    conv_out_size,
    fc_backward,
    fc_forward,
    he_normal,
    rng_for,
    sgd_step,
    softmax_cross_entropy,
)
from .qat import QuantSpec, quantize_activation, quantize_backward, quantize_weights

LAYER_KINDS = ("fc", "conv", "batchnorm", "quant_relu", "add_shortcut", "avgpool", "plain_relu")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CLIP_FLOOR = 1e-4   # a gradient step may not push a quantizer clip to <= 0


class TrainingDivergedError(RuntimeError):
    pass


class FoldError(ValueError):
    pass


@dataclass
class LayerDef:
    kind: str
    params: dict
    in_shape: tuple
    out_shape: tuple

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class NetworkDef:
    name: str
    layers: list
    input_shape: tuple
    bits: int
    seed: int
    weight_bits: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        """Number of weighted (fc/conv) stages, classifier head included."""
        return sum(1 for l in self.layers if l.kind in ("fc", "conv"))

    def quant_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "quant_relu"]

    def quant_spec(self, idx: int) -> QuantSpec:
        p = self.layers[idx].params
        return QuantSpec(bits=int(p["bits"]), clip=float(p["clip"]))


# ---------------------------------------------------------------------------
# builders


def _fc(gen, n_in, n_out):
    return {"weight": he_normal(gen, (n_out, n_in), n_in),
            "bias": np.zeros(n_out, dtype=REAL)}


def _conv(gen, c_in, c_out, k, stride, pad):
    return {"weight": he_normal(gen, (c_out, c_in, k, k), c_in * k * k),
            "bias": np.zeros(c_out, dtype=REAL), "stride": stride, "pad": pad}


def _bn(channels):
    return {"gamma": np.ones(channels, dtype=REAL), "beta": np.zeros(channels, dtype=REAL),
            "running_mean": np.zeros(channels, dtype=REAL),
            "running_var": np.ones(channels, dtype=REAL),
            "eps": BN_EPS, "momentum": BN_MOMENTUM}


def _qrelu(bits):
    return {"bits": int(bits), "clip": np.asarray(1.0, dtype=REAL)}


def build_mlp3(bits: int, seed: int, input_shape=(1, 28, 28), hidden: int = 256,
               classes: int = 10, batchnorm: bool = True) -> NetworkDef:
    """784-256-256-10 dense net with a quantizer after each hidden layer."""
    gen = rng_for(seed)
    n_in = int(np.prod(input_shape))
    layers = []
    dims = [n_in, hidden, hidden]
    for i in range(2):
        layers.append(LayerDef("fc", _fc(gen, dims[i], dims[i + 1]), (dims[i],), (dims[i + 1],)))
        if batchnorm:
            layers.append(LayerDef("batchnorm", _bn(dims[i + 1]), (dims[i + 1],), (dims[i + 1],)))
        layers.append(LayerDef("quant_relu", _qrelu(bits), (dims[i + 1],), (dims[i + 1],)))
    layers.append(LayerDef("fc", _fc(gen, hidden, classes), (hidden,), (classes,)))
    return NetworkDef("mlp3", layers, tuple(input_shape), int(bits), int(seed))


def build_convnet5(bits: int, seed: int, input_shape=(1, 16, 16), channels=(8, 16),
                   hidden: int = 64, classes: int = 10, batchnorm: bool = True) -> NetworkDef:
    """Two conv stages, one average pool, two dense stages."""
    gen = rng_for(seed)
    c, h, w = input_shape
    layers = []

    def shape_after(cin_shape, cout, k, stride, pad):
        _, hh, ww = cin_shape
        return (cout, conv_out_size(hh, k, stride, pad), conv_out_size(ww, k, stride, pad))

    cur = tuple(input_shape)
    for cout in channels:
        nxt = shape_after(cur, cout, 3, 1, 1)
        layers.append(LayerDef("conv", _conv(gen, cur[0], cout, 3, 1, 1), cur, nxt))
        if batchnorm:
            layers.append(LayerDef("batchnorm", _bn(cout), nxt, nxt))
        layers.append(LayerDef("quant_relu", _qrelu(bits), nxt, nxt))
        cur = nxt
    pooled = (cur[0], cur[1] // 2, cur[2] // 2)
    layers.append(LayerDef("avgpool", {"size": 2}, cur, pooled))
    flat = int(np.prod(pooled))
    layers.append(LayerDef("fc", _fc(gen, flat, hidden), pooled, (hidden,)))
    if batchnorm:
        layers.append(LayerDef("batchnorm", _bn(hidden), (hidden,), (hidden,)))
    layers.append(LayerDef("quant_relu", _qrelu(bits), (hidden,), (hidden,)))
    layers.append(LayerDef("fc", _fc(gen, hidden, classes), (hidden,), (classes,)))
    return NetworkDef("convnet5", layers, tuple(input_shape), int(bits), int(seed))


def build_res10(bits: int, seed: int, input_shape=(1, 16, 16), channels: int = 8,
                blocks: int = 4, classes: int = 10) -> NetworkDef:
    """Ten weighted stages: strided stem conv, four residual blocks, fc head.

    Each block is conv-bn-quant / conv-bn, an identity shortcut from the
    block input, and the block quantizer after the add.  The stem uses a
    4x4 stride-2 kernel so halving an even input keeps the output size
    integral, which the conv precondition requires.
    """
    gen = rng_for(seed)
    layers = []
    c0, h0, w0 = input_shape
    stem_shape = (channels, conv_out_size(h0, 4, 2, 1), conv_out_size(w0, 4, 2, 1))
    layers.append(LayerDef("conv", _conv(gen, c0, channels, 4, 2, 1), tuple(input_shape), stem_shape))
    layers.append(LayerDef("batchnorm", _bn(channels), stem_shape, stem_shape))
    layers.append(LayerDef("quant_relu", _qrelu(bits), stem_shape, stem_shape))
    shape = stem_shape
    for _ in range(blocks):
        block_in = len(layers) - 1   # index of the quant_relu feeding this block
        layers.append(LayerDef("conv", _conv(gen, channels, channels, 3, 1, 1), shape, shape))
        layers.append(LayerDef("batchnorm", _bn(channels), shape, shape))
        layers.append(LayerDef("quant_relu", _qrelu(bits), shape, shape))
        layers.append(LayerDef("conv", _conv(gen, channels, channels, 3, 1, 1), shape, shape))
        layers.append(LayerDef("batchnorm", _bn(channels), shape, shape))
        layers.append(LayerDef("add_shortcut", {"source": block_in}, shape, shape))
        layers.append(LayerDef("quant_relu", _qrelu(bits), shape, shape))
    flat = int(np.prod(shape))
    layers.append(LayerDef("fc", _fc(gen, flat, classes), shape, (classes,)))
    return NetworkDef("res10", layers, tuple(input_shape), int(bits), int(seed))


ARCHITECTURES = {"mlp3": build_mlp3, "convnet5": build_convnet5, "res10": build_res10}


def build(arch: str, bits: int, seed: int, **kwargs) -> NetworkDef:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; have {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](bits=bits, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# forward


def _effective_weight(layer: LayerDef, weight_bits) -> np.ndarray:
    w = layer.params["weight"]
    return quantize_weights(w, weight_bits) if weight_bits else w


def _bn_eval(x, p):
    inv = REAL(1.0) / np.sqrt(p["running_var"] + REAL(p["eps"]))
    g = p["gamma"] * inv
    b = p["beta"] - p["running_mean"] * g
    if x.ndim == 4:
        return x * g[None, :, None, None] + b[None, :, None, None]
    return x * g + b


def _layer_forward(layer: LayerDef, x, prev_outputs, weight_bits, train_mode, cache):
    kind = layer.kind
    p = layer.params
    if kind == "fc":
        flat = x.reshape(x.shape[0], -1)
        w = _effective_weight(layer, weight_bits)
        if cache is not None:
            cache.update(x_flat=flat, w_eff=w, x_shape=x.shape)
        return fc_forward(flat, w, p["bias"])
    if kind == "conv":
        w = _effective_weight(layer, weight_bits)
        if cache is not None:
            cache.update(x=x, w_eff=w)
        y = conv2d(x, w, p["stride"], p["pad"])
        y += p["bias"][None, :, None, None]
        return y
    if kind == "batchnorm":
        if not train_mode:
            return _bn_eval(x, p).astype(REAL, copy=False)
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        mean = x.mean(axis=axes, dtype=REAL)
        var = x.var(axis=axes, dtype=REAL)
        m = REAL(p["momentum"])
        p["running_mean"] += m * (mean - p["running_mean"])
        p["running_var"] += m * (var - p["running_var"])
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        inv = (REAL(1.0) / np.sqrt(var + REAL(p["eps"]))).reshape(shape)
        xhat = (x - mean.reshape(shape)) * inv
        if cache is not None:
            cache.update(xhat=xhat, inv=inv, axes=axes)
        return (p["gamma"].reshape(shape) * xhat + p["beta"].reshape(shape)).astype(REAL, copy=False)
    if kind == "quant_relu":
        spec = QuantSpec(bits=int(p["bits"]), clip=float(p["clip"]))
        if cache is not None:
            cache.update(x=x, spec=spec)
        return quantize_activation(x, spec)
    if kind == "plain_relu":
        if cache is not None:
            cache.update(mask=x > 0)
        return np.maximum(x, REAL(0.0))
    if kind == "avgpool":
        return avgpool2d(x, p["size"])
    if kind == "add_shortcut":
        return (x + prev_outputs[p["source"]]).astype(REAL, copy=False)
    raise ValueError(f"unknown layer kind {kind!r}")


def _forward_all(net: NetworkDef, x, train_mode=False, caches=None):
    outputs = []
    cur = as_real(x)
    for i, layer in enumerate(net.layers):
        cache = {} if caches is not None else None
        cur = _layer_forward(layer, cur, outputs, net.weight_bits, train_mode, cache)
        outputs.append(cur)
        if caches is not None:
            caches.append(cache)
    return outputs


def forward(net: NetworkDef, x):
    """Inference pass.  Returns (logits, activations) where activations maps
    the index of each quant_relu layer to its output."""
    outputs = _forward_all(net, x, train_mode=False)
    acts = {i: outputs[i] for i, l in enumerate(net.layers) if l.kind == "quant_relu"}
    return outputs[-1], acts


def quantizer_inputs(net: NetworkDef, x):
    """The value each quantizer sees, rectified at zero.

    This is what threshold baselines estimate percentiles over: the
    unclipped positive activation mass in front of each quantizer.
    Returns {quant_relu layer index: max(0, input)}.
    """
    outputs = _forward_all(net, x, train_mode=False)
    return {i: np.maximum(outputs[i - 1], REAL(0.0))
            for i, l in enumerate(net.layers) if l.kind == "quant_relu"}


# ---------------------------------------------------------------------------
# backward


def _layer_backward(layer: LayerDef, grad_out, cache, grads, idx):
    kind = layer.kind
    p = layer.params
    if kind == "fc":
        gx, gw, gb = fc_backward(cache["x_flat"], cache["w_eff"], grad_out)
        grads[(idx, "weight")] = gw   # straight-through onto the latent weight
        grads[(idx, "bias")] = gb
        return gx.reshape(cache["x_shape"])
    if kind == "conv":
        gx, gw = conv2d_backward(cache["x"], cache["w_eff"], grad_out, p["stride"], p["pad"])
        grads[(idx, "weight")] = gw
        grads[(idx, "bias")] = grad_out.sum(axis=(0, 2, 3), dtype=REAL)
        return gx
    if kind == "batchnorm":
        xhat, inv, axes = cache["xhat"], cache["inv"], cache["axes"]
        count = REAL(np.prod([grad_out.shape[a] for a in axes]))
        shape = inv.shape
        grads[(idx, "gamma")] = (grad_out * xhat).sum(axis=axes, dtype=REAL)
        grads[(idx, "beta")] = grad_out.sum(axis=axes, dtype=REAL)
        g = p["gamma"].reshape(shape)
        sum_g = grad_out.sum(axis=axes, keepdims=True, dtype=REAL)
        sum_gx = (grad_out * xhat).sum(axis=axes, keepdims=True, dtype=REAL)
        return (g * inv * (grad_out - sum_g / count - xhat * sum_gx / count)).astype(REAL, copy=False)
    if kind == "quant_relu":
        gx, gclip = quantize_backward(grad_out, cache["x"], cache["spec"])
        grads[(idx, "clip")] = gclip
        return gx
    if kind == "plain_relu":
        return np.where(cache["mask"], grad_out, REAL(0.0))
    if kind == "avgpool":
        return avgpool2d_backward(grad_out, p["size"])
    raise ValueError(f"no backward for layer kind {kind!r}")


def backward(net: NetworkDef, x, outputs, caches, grad_logits):
    """Backpropagate grad_logits through the whole graph.

    Returns a dict (layer_index, param_name) -> gradient.  Shortcut adds
    route their gradient both down the chain and to their source layer.
    """
    n_layers = len(net.layers)
    grad_at = [None] * n_layers
    grad_at[n_layers - 1] = as_real(grad_logits)
    grads = {}

    def push(i, g):
        if grad_at[i] is None:
            grad_at[i] = g.copy()
        else:
            grad_at[i] = grad_at[i] + g

    for i in range(n_layers - 1, -1, -1):
        g = grad_at[i]
        if g is None:
            continue
        layer = net.layers[i]
        if layer.kind == "add_shortcut":
            push(layer.params["source"], g)
            gi = g
        else:
            gi = _layer_backward(layer, g, caches[i], grads, i)
        if i > 0:
            push(i - 1, gi)
    return grads


# ---------------------------------------------------------------------------
# training


def trainable_params(net: NetworkDef):
    """(params, no_decay): weight decay applies to fc/conv weights only."""
    params = {}
    no_decay = set()
    for i, layer in enumerate(net.layers):
        if layer.kind in ("fc", "conv"):
            params[(i, "weight")] = layer.params["weight"]
            params[(i, "bias")] = layer.params["bias"]
            no_decay.add((i, "bias"))
        elif layer.kind == "batchnorm":
            params[(i, "gamma")] = layer.params["gamma"]
            params[(i, "beta")] = layer.params["beta"]
            no_decay.update({(i, "gamma"), (i, "beta")})
        elif layer.kind == "quant_relu":
            params[(i, "clip")] = layer.params["clip"]
            no_decay.add((i, "clip"))
    return params, no_decay


def evaluate(net: NetworkDef, dataset: Dataset, batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits, _ = forward(net, xb)
        hits += int((logits.argmax(axis=1) == yb).sum())
    return hits / len(dataset)


def train(net: NetworkDef, train_data: Dataset, cfg: SgdConfig, epochs: int,
          batch_size: int = 64, eval_data: Dataset | None = None, shuffle_seed=None,
          log=None):
    """Minibatch SGD.  Mutates ``net`` in place and returns (net, history).

    history is one row per epoch: {"epoch", "loss", "train_acc", "test_acc"}
    (test_acc only when eval_data is given).  Runs with the same seed and
    config are bit-reproducible.  A non-finite loss aborts immediately.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    params, no_decay = trainable_params(net)
    state = {}
    order_gen = rng_for(net.seed if shuffle_seed is None else shuffle_seed)
    history = []
    for epoch in range(epochs):
        lr = cfg.lr_at(epoch)
        order = order_gen.permutation(len(train_data))
        losses = []
        hits = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            xb = train_data.images[idx]
            yb = train_data.labels[idx]
            caches = []
            outputs = _forward_all(net, xb, train_mode=True, caches=caches)
            loss, grad_logits = softmax_cross_entropy(outputs[-1], yb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite ({loss}) at epoch {epoch}, "
                    f"batch offset {start}; try a lower learning rate"
                )
            hits += int((outputs[-1].argmax(axis=1) == yb).sum())
            grads = backward(net, xb, outputs, caches, grad_logits)
            sgd_step(params, grads, state, cfg, lr=lr, no_decay=no_decay)
            for (i, name), p in params.items():
                if name == "clip" and p <= 0:
                    p[...] = REAL(CLIP_FLOOR)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "train_acc": hits / len(train_data)}
        if eval_data is not None:
            row["test_acc"] = evaluate(net, eval_data)
        history.append(row)
        if log:
            log(row)
    return net, history


# ---------------------------------------------------------------------------
# batch-norm folding


def folded_threshold(theta: float, gamma: float, beta: float, var: float,
                     eps: float, mean: float) -> float:
    """Threshold seen before an unfolded batchnorm that matches threshold
    ``theta`` after it: (theta - beta) / gamma * sqrt(var + eps) + mean."""
    if gamma == 0:
        raise FoldError("batchnorm gamma is zero; threshold fold is not invertible")
    return (theta - beta) / gamma * float(np.sqrt(var + eps)) + mean


def fold_batchnorm(net: NetworkDef) -> NetworkDef:
    """Fold every batchnorm into the weighted layer directly before it.

    W <- W * gamma / sqrt(var + eps) (per output channel) and
    b <- (b - mean) * gamma / sqrt(var + eps) + beta, using the running
    statistics.  If the net quantizes weights, the quantized values are
    materialized first and the folded net carries plain weights.  Shortcut
    source indices are remapped to the shrunken layer list.
    """
    folded = []
    old_to_new = {}
    for i, layer in enumerate(net.layers):
        if layer.kind == "batchnorm":
            if i == 0 or net.layers[i - 1].kind not in ("fc", "conv"):
                raise FoldError(f"batchnorm at layer {i} does not follow fc/conv")
            p = layer.params
            if np.any(p["gamma"] == 0):
                ch = int(np.argmax(p["gamma"] == 0))
                raise FoldError(f"batchnorm at layer {i} has gamma == 0 at channel {ch}")
            target = folded[-1]
            scale = (p["gamma"] / np.sqrt(p["running_var"] + REAL(p["eps"]))).astype(REAL)
            w = target.params["weight"]
            w *= scale.reshape((-1,) + (1,) * (w.ndim - 1))
            target.params["bias"] = ((target.params["bias"] - p["running_mean"]) * scale
                                     + p["beta"]).astype(REAL)
            target.out_shape = layer.out_shape
            old_to_new[i] = len(folded) - 1   # the folded producer of this output
            continue
        new_layer = LayerDef(layer.kind, copy.deepcopy(layer.params),
                             layer.in_shape, layer.out_shape)
        if layer.kind in ("fc", "conv") and net.weight_bits:
            new_layer.params["weight"] = quantize_weights(new_layer.params["weight"],
                                                          net.weight_bits)
        old_to_new[i] = len(folded)
        folded.append(new_layer)
    for layer in folded:
        if layer.kind == "add_shortcut":
            layer.params["source"] = old_to_new[layer.params["source"]]
    meta = dict(net.meta)
    meta["batchnorm_folded"] = True
    return NetworkDef(net.name, folded, net.input_shape, net.bits, net.seed,
                      weight_bits=None, meta=meta)


# ---------------------------------------------------------------------------
# persistence (format details in serialize.py and docs/formats.md)


def save(net: NetworkDef, path: str):
    serialize.save_network(net, path)


def load(path: str) -> NetworkDef:
    net = serialize.load_any(path)
    if not isinstance(net, NetworkDef):
        raise serialize.ModelFormatError(f"{path} holds a spiking network, not a layer graph")
    return net
