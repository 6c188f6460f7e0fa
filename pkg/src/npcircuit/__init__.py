"""Neural probabilistic circuits: per-attribute recognizers, a tractable
sum-product circuit engine, node-wise and robust class-wise inference,
white-box attacks, and empirical verification of the robustness and error
bounds on synthetic data with exact ground truth."""

from .circuit import (
    Circuit,
    CircuitNode,
    Query,
    conditional_class,
    evaluate,
    load_circuit,
    save_circuit,
    validate,
)
from .datagen import Dataset, GeneratorSpec, generate, ground_truth, presets
from .geometry import (
    ClassPartition,
    NodeSet,
    build_high_prob_set,
    hamming,
    neighborhood,
    partition_by_class,
)
from .integrator import ClassScores, QueryCounter, npc_infer, predict, rnpc_infer
from .learnspn import StructureHyperparams, fit_parameters_cccp, learn_structure
from .recognizer import AttributeProbs, RecognizerParams, TrainConfig, forward, input_gradient, train
from .schema import VariableSchema

__version__ = "0.1.0"

__all__ = [
    "AttributeProbs",
    "Circuit",
    "CircuitNode",
    "ClassPartition",
    "ClassScores",
    "Dataset",
    "GeneratorSpec",
    "NodeSet",
    "Query",
    "QueryCounter",
    "RecognizerParams",
    "StructureHyperparams",
    "TrainConfig",
    "VariableSchema",
    "__version__",
    "build_high_prob_set",
    "conditional_class",
    "evaluate",
    "fit_parameters_cccp",
    "forward",
    "generate",
    "ground_truth",
    "hamming",
    "input_gradient",
    "learn_structure",
    "load_circuit",
    "neighborhood",
    "npc_infer",
    "partition_by_class",
    "predict",
    "presets",
    "rnpc_infer",
    "save_circuit",
    "train",
    "validate",
]
