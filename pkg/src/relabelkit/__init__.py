"""Re-labeling noisy rater-scored data against a small verified reference set."""

from .dataset import (DEFAULT_SCENARIOS, DatasetError, Interval, SampleRecord, Scenario,
                      assign_labels, average_score, load_dataset, save_dataset,
                      stratified_kfold)
from .embednet import NetConfig, NetParams, TrainConfig, fine_tune, forward, train
from .evaluation import (ConfusionMatrix, ExperimentSpec, MetricsReport, compute_metrics,
                         render_report, run_experiment, scenario_sweep)
from .relabel import RelabelConfig, RelabelOutcome, crossfit_relabel, relabel_comparator
from .siamese import ContrastiveConfig, PairSample, contrastive_loss, train_siamese
from .synth import GeneratorConfig, generate, oracle_accuracy

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SCENARIOS", "DatasetError", "Interval", "SampleRecord", "Scenario",
    "assign_labels", "average_score", "load_dataset", "save_dataset", "stratified_kfold",
    "NetConfig", "NetParams", "TrainConfig", "fine_tune", "forward", "train",
    "ConfusionMatrix", "ExperimentSpec", "MetricsReport", "compute_metrics",
    "render_report", "run_experiment", "scenario_sweep",
    "RelabelConfig", "RelabelOutcome", "crossfit_relabel", "relabel_comparator",
    "ContrastiveConfig", "PairSample", "contrastive_loss", "train_siamese",
    "GeneratorConfig", "generate", "oracle_accuracy",
]
