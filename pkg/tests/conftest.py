import numpy as np
import pytest

from spikequant.data import Dataset, make_synthetic, normalize
from spikequant.model import LayerDef, NetworkDef, build, fold_batchnorm, train
from spikequant.numerics import REAL, SgdConfig


def random_dense_net(gen, bits, layer_dims, clip_range=(0.5, 2.0)):
    """Random fc stack with a quantizer after every hidden layer."""
    layers = []
    for i in range(len(layer_dims) - 1):
        n_in, n_out = layer_dims[i], layer_dims[i + 1]
        layers.append(LayerDef("fc", {
            "weight": gen.normal(0, 1 / np.sqrt(n_in), size=(n_out, n_in)).astype(REAL),
            "bias": gen.normal(0, 0.1, size=n_out).astype(REAL)}, (n_in,), (n_out,)))
        if i < len(layer_dims) - 2:
            clip = np.asarray(gen.uniform(*clip_range), dtype=REAL)
            layers.append(LayerDef("quant_relu", {"bits": bits, "clip": clip},
                                   (n_out,), (n_out,)))
    return NetworkDef("rand", layers, (layer_dims[0],), bits, 0)


def blob_data(classes=4, shape=(1, 8, 8), train_count=256, test_count=128,
              noise=0.2, seed=0):
    tx, ty, sx, sy = make_synthetic(classes=classes, shape=shape,
                                    train_count=train_count, test_count=test_count,
                                    noise=noise, seed=seed)
    train_ds = Dataset(normalize(tx, 0.5, 0.5), ty.astype(np.int64), split="train")
    test_ds = Dataset(normalize(sx, 0.5, 0.5), sy.astype(np.int64), split="test")
    return train_ds, test_ds


@pytest.fixture(scope="session")
def small_data():
    return blob_data()


@pytest.fixture(scope="session")
def trained_mlp3(small_data):
    """A 2-bit mlp3 trained to convergence on the blob set (seconds)."""
    train_ds, _ = small_data
    net = build("mlp3", bits=2, seed=0, input_shape=(1, 8, 8), hidden=32)
    net, history = train(net, train_ds, SgdConfig(0.05, 0.9, 1e-4),
                         epochs=6, batch_size=32)
    return net, history


@pytest.fixture(scope="session")
def folded_mlp3(trained_mlp3):
    net, _ = trained_mlp3
    return fold_batchnorm(net)
