"""Gate-based feature selection for click-through-rate models, with gate ensembles."""
from .data import Dataset, DatasetSchema, FieldSpec, PlantedSpec, generate_synthetic
from .ensemble import GatingEnsemble, SelectionResult, aggregate
from .gating import GateGroup, GateInitSpec, binarize_gumbel, binarize_ste, init_gates
from .harness import ExperimentReport, desk_benchmark, emit_report, run_experiment
from .metrics import auc, top3_score
from .models import CTRModel
from .training import PipelineConfig, pretrain, retrain, run_pipeline, search

__all__ = [
    "CTRModel", "Dataset", "DatasetSchema", "ExperimentReport", "FieldSpec", "GateGroup",
    "GateInitSpec", "GatingEnsemble", "PipelineConfig", "PlantedSpec", "SelectionResult",
    "aggregate", "auc", "binarize_gumbel", "binarize_ste", "desk_benchmark", "emit_report",
    "generate_synthetic", "init_gates", "pretrain", "retrain", "run_experiment",
    "run_pipeline", "search", "top3_score",
]
__version__ = "0.1.0"
