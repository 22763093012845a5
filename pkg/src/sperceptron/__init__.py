"""Subtractive Perceptron: paraneurons over a complete graph that see both the
raw input and its cyclic differences through shared, symmetric edge weights."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ForwardTrace,
    ModelConfig,
    ModelParams,
    cyclic_difference,
    forward,
    init_params,
    load_model,
    parameter_count,
    pooled_probabilities,
    predict,
    save_model,
    symmetrize,
)
from .mnist_io import LabeledDataset, load_mnist  # noqa: E402
from .grad import GradConfig, evaluate, train  # noqa: E402
