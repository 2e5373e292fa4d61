"""
Core functionality modules for the multisource-qa package: the autodiff
tensor, model components, training, synthetic data and evaluation.
"""

from multisource_qa.core.model import Model, build_model
from multisource_qa.core.trainer import train, evaluate
from multisource_qa.core.synth import generate_dataset, load_dataset, save_dataset
from multisource_qa.core.checkpoint import save_checkpoint, load_checkpoint
from multisource_qa.core.gradcheck import run_gradcheck
