"""Discrete-unit conditioned flow matching for speech feature conversion."""

from .benchkit import (
    CorpusManifest,
    DegradeConfig,
    SymbolBank,
    SymbolScript,
    build_corpus,
    load_manifest,
)
from .cfm import FlowBatch, MaskSpec, PathConfig, cfm_loss, make_flow_batch
from .dsp import MelSpectrogram, VadConfig, Waveform, log_mel, resample, trim_silence
from .errors import (
    DegenerateData,
    DivergenceError,
    EmptyAfterTrim,
    IncompatibleCheckpoint,
    InvalidInput,
    IoError,
    LengthOverflow,
    NumericalError,
    UnitflowError,
)
from .sampler import GenerationRequest, SwayConfig, generate, integrate_ode, sway_schedule
from .trainer import TrainConfig, TrainSample, run_stage, train_step
from .units import Codebook, PaddedUnits, UnitSequence, assign, collapse, fit_kmeans, pad_to_frames
from .vfnet import FieldModel, ModelConfig, VectorFieldNet, init_params

__version__ = "0.1.0"
