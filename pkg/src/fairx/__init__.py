"""FairX: fairness-aware training with group-counterfactual Integrated Gradients."""

__version__ = "0.1.0"
