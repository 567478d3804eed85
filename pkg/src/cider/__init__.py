"""Multimodal audio COVID-19 classification: residual CNN, baselines and AUC statistics."""

from .augment import AugmentConfig, augment_instance, pitch_shift
from .baselines import BaselineSpec, baseline_features, concat_modalities, train_baseline
from .dataset import SynthSpec, generate_synthetic_corpus, group_instances, load_manifest
from .dsp import FeatureConfig, Waveform, chunk_recording, mfcc, pad_by_repetition, sample_window
from .evaluation import EvalResult, compare_models, hm_ci, roc_auc
from .model import ModelConfig, TrainConfig, init_model, predict_recording, train

__version__ = "0.1.0"
