"""Few-shot segmentation by iterative mutual refinement of text-initialised masks."""

from .data import DatasetIndex, Episode, SyntheticSpec, generate_synthetic_dataset, load_dataset
from .embeddings import ProviderSpec, ToyProvider, build_provider
from .errors import IMRSegError
from .evaluation import EvalReport, evaluate, iou
from .mask_init import MaskEstimate, initial_mask
from .pipeline import ArchConfig, PipelineConfig, build_model, predict_k_shot, predict_query, predict_zero_shot
from .training import load_model, save_model, train

__version__ = "0.1.0"
