"""Federated learning with frozen multimodal anchors.

Clients train on heterogeneous shards while two offline anchor sets keep
their representations aligned: per-sample visual features distilled from a
frozen generative backbone, and per-class text directions. The package
covers the whole pipeline: anchor extraction, non-IID partitioning, local
training with the combined objective, weighted aggregation, and the
experiment harness with presets, sweeps, and the ablation grid.
"""

from .config import DatasetConfig, ExperimentConfig, load_config, preset_path
from .datasets import LabeledImages, load_dataset, synthetic_dataset
from .errors import (ConfigError, FormatError, InfeasiblePartitionError,
                     IntegrityError, InvalidInputError, ProviderError,
                     ReducedRankError, SemflError, StateError,
                     TrainingDivergedError)
from .extraction import (FeatureExtractionConfig, Projection,
                         TextFeatureSet, VisualFeatureSet,
                         encode_class_prompts, extract_visual_features,
                         fit_projection)
from .fl import (GlobalState, MetricsRecord, RoundConfig, evaluate,
                 fedavg_aggregate, local_train, run_rounds, select_clients)
from .losses import (LossBreakdown, LossWeights, contrastive_loss,
                     cross_entropy, kd_loss, prox_term, total_loss)
from .models import BackboneSpec, build_model, flatten_params, forward, \
    unflatten_params
from .partition import (PartitionMap, PartitionSpec, PartitionStats,
                        build_partition, load_partition, partition_stats,
                        save_partition)
from .providers import DiffusionProvider, SyntheticProvider, make_provider
from .schedule import NoiseSchedule, add_noise, scaled_linear_schedule
from .store import FeatureStore, load_store, save_store, slice_store

__version__ = "0.1.0"
