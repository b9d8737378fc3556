"""Curriculum-scheduled cross-domain mixup for recognizing unseen classes in unseen domains."""

from .data import DatasetBundle, SplitSpec, SynthConfig, generate_synthetic, load_bundle, write_bundle
from .losses import Batch, LossWeights, loss_agg, loss_cumix, loss_mix_feature, loss_mix_input
from .mixing import MixSchedule, mix2, mix3, schedule_coeffs
from .model import ModelConfig, ModelParams, forward, init_model, predict
from .train import Mode, ModelOptions, OptimConfig, RunConfig, evaluate, load_preset, train_run

__version__ = "0.1.0"
