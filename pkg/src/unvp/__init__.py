"""Single-source domain generalization with flow-modelled class distributions.

An invertible flow maps each class to a Gaussian in latent space; hard
samples are synthesized by gradient ascent on classification loss minus a
Bures-Wasserstein drift penalty, then replayed while training the classifier.
"""
from .classifier import ConvClassifier, MLPClassifier, fit_classifier
from .config import ConfigError, GeneralizationConfig, RunConfig, load_config
from .data import Dataset, load_dataset, make_blob_domains, make_digit_domains, save_dataset
from .estimator import UNVPClassifier
from .flow import FlowModel, flow_forward, flow_inverse, log_likelihood
from .generalizer import (
    GaussianSummary,
    TrainState,
    bures_cost,
    fit_gaussian,
    regularized_cost,
    synthesize_hard_samples,
    train,
)
from .preprocessing import Preprocessor
from .priors import ClassPriorSet, gaussian_log_prob

__version__ = "0.1.0"
