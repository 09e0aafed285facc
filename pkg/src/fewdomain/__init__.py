"""Few-domain generalization: episodic pre-training over a pool of base
tasks with similarity-weighted task sampling, then fine-tuning and
out-of-distribution evaluation on a novel task."""

from fewdomain.episodic import EpisodicConfig
from fewdomain.mats import MatsConfig, SimilarityRecord
from fewdomain.model import ParameterSet
from fewdomain.pipeline import ExperimentConfig, MetricsRecord, run_experiment
from fewdomain.taskbench import Domain, Task, TaskSpec

__all__ = [
    "Domain", "EpisodicConfig", "ExperimentConfig", "MatsConfig", "MetricsRecord",
    "ParameterSet", "SimilarityRecord", "Task", "TaskSpec", "run_experiment",
]
__version__ = "0.1.0"
