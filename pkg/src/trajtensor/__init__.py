"""Streaming Bayesian factor trajectory learning for temporal tensors."""
from .cep import CepConfig, NoisePosterior, TuckerCorePosterior
from .data_io import Event, EventStream, generate_synthetic, load_events, rescale_timestamps, split_train_test
from .engine import (
    Batch,
    PosteriorModel,
    checkpoint,
    create_model,
    finalize,
    predict_entry,
    process_batch,
    restore,
    run_stream,
)
from .kernel_sde import MaternKernel, build_sde
from .kernels import BACKEND

__version__ = "0.1.0"
