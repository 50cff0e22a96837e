"""Input validation helpers shared by the public estimator API and CLI."""

from __future__ import annotations

from sklearn.exceptions import NotFittedError

from .exceptions import ContractError


def check_fitted(estimator, attributes=("model_",)):
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )


def check_sample_batch(samples):
    """Validate a region-homogeneous list of samples; returns its region index."""
    if not samples:
        raise ContractError("expected at least one sample")
    region = samples[0].region_index
    hist_shape = samples[0].hist.shape
    future_shape = samples[0].future.shape
    for s in samples[1:]:
        if s.region_index != region:
            raise ContractError(
                "samples span multiple regions "
                f"({samples[0].region_id!r} and {s.region_id!r}); "
                "predict one region at a time"
            )
        if s.hist.shape != hist_shape or s.future.shape != future_shape:
            raise ContractError("samples have inconsistent window shapes")
    return region


def require(condition, message):
    if not condition:
        raise ContractError(message)
