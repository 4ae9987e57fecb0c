"""Latent-constrained CVAEs for completing sparsely observed ensemble members.

Each ensemble realization gets its own conditional VAE (location features in,
monthly series out).  A hinge penalty keeps the latent codes of a few shared
anchor locations close to fixed targets, so latent spaces of different
realizations line up.  A held-out realization observed at a fraction of
locations is completed by predicting its latent field with Gaussian processes
over neighbouring codes and decoding.
"""
from .config import RunConfig, apply_overrides, load_config
from .data import EnsembleDataset, SyntheticConfig, generate_synthetic, load_ensemble, save_ensemble
from .cvae import CvaeConfig, CvaeModel, train_cvae
from .constraint import AnchorSet, LcTrainPlan, train_lc_ensemble
from .completion import LatentField, complete_latent_field
from .metrics import EvalReport, fragmentation_score, mse
from .pipeline import run_ablation, run_pipeline, summary_csv

__version__ = "0.1.0"
