"""Selective fine-tuning toolkit for binary crack segmentation."""

from .data import DatasetManifest, ImageSample, SampleSet, load_manifest, load_split, prepare_sample, synth_crack_dataset
from .errors import SacKitError
from .evaluation import evaluate_dataset, export_qualitative, zero_shot_suite
from .losses import LossForm, bce_loss, dice_loss, hybrid_loss
from .metrics import ConfusionCounts, MetricValues, aggregate, binarize, compute_metrics, dataset_metrics
from .primitives import NormParams, LoRAAdapter, ToySegmenterSpec, build_toy_segmenter, compute_stats, normalize_affine
from .search import SearchSpace, enumerate_grid, run_search, sample_trials
from .selection import TuningPlan, audit_budget, make_plan, sam_vit_b_spec, select_trainables
from .training import TrainConfig, cosine_lr, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
