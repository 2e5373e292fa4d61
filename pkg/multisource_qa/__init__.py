"""
Multi-source QA - answer attribute questions from text and image sources.

This package trains a small encoder-decoder that reads a question, a text
context and an image, fuses the two sources under question guidance and
generates the answer. Optional sparse mixture-of-experts layers can replace
the feed-forward sublayers of either stack.

Commands:
    datagen       - Generate the synthetic train / val / test splits
    train         - Train a model from a run configuration
    eval          - Evaluate a checkpoint and write per-attribute / per-source reports
    gradcheck     - Compare autograd against finite differences on a toy model
    ablate        - Run the fusion / alignment / MoE ablation grid
    inspect-ckpt  - Print the header and parameter manifest of a checkpoint
"""

__version__ = "1.0.0"
__author__ = "Mark Ward"
__license__ = "MIT"
