"""harvana: data-source importance for multimodal activity recognition.

Pipeline: synthesize or ingest multi-position sensor data, explore a
hyperparameter space with a budgeted strategy, decompose the response
surface with functional ANOVA over a random-forest surrogate, lift the
shares to per-activity data-source importances, and retrain small models on
the selected source subsets via masked augmentation.
"""

__version__ = "0.1.0"
