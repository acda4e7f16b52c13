"""Gradient-guided modality decoupling (GMD) with a Dynamic Sharing (DS) model."""

__version__ = "0.1.0"

__all__ = ["DSClassifier", "DSRegressor", "__version__"]


def __getattr__(name):
    # the estimators pull in scikit-learn; load them only when asked for
    if name in ("DSClassifier", "DSRegressor"):
        from . import estimator

        return getattr(estimator, name)
    raise AttributeError(f"module 'gmdlearn' has no attribute {name!r}")
