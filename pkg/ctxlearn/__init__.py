"""ctxlearn - self-supervised pretraining with contextualized teacher targets."""

__version__ = "0.1.0"
