"""spikequant: low-bit quantization-aware training and lossless conversion
of the trained nets into rate-coded spiking networks."""

__version__ = "0.1.0"

# the conversion entry point stays at spikequant.convert.convert; re-exporting
# the function here would shadow the submodule attribute of the same name
from .convert import (  # noqa: F401
    ConversionError,
    SpikingNetwork,
    equivalence_check,
    steps_for_bits,
    with_neuron_model,
    with_schedule,
)
from .data import Dataset, load_dataset_dir, make_synthetic, write_dataset_dir  # noqa: F401
from .finetune import FinetuneConfig  # noqa: F401
from .model import (  # noqa: F401
    NetworkDef,
    build,
    evaluate,
    fold_batchnorm,
    forward,
    train,
)
from .numerics import REAL, SgdConfig  # noqa: F401
from .qat import QuantSpec, quantize_activation, quantize_weights  # noqa: F401
from .snn_sim import count_ops, scaled_rates, simulate  # noqa: F401
