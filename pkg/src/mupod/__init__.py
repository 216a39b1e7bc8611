"""Multi-stream transformer for longitudinal claims: autodiff engine, data pipeline,
models, training, evaluation and attention explanations."""

__version__ = "0.1.0"
