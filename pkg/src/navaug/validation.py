"""Input checks shared by the estimators and pipeline entry points."""

from __future__ import annotations

import math

import numpy as np


def check_scenes(X):
    """Validate a sequence of ``(Environment, EdgeProbabilityProvider)`` pairs."""
    from .env_synth import EdgeProbabilityProvider, Environment

    scenes = list(X)
    if not scenes:
        raise ValueError("expected at least one (environment, provider) pair")
    for k, item in enumerate(scenes):
        if not (isinstance(item, tuple) and len(item) == 2):
            raise TypeError(f"scene {k}: expected an (Environment, EdgeProbabilityProvider) tuple")
        env, prov = item
        if not isinstance(env, Environment) or not isinstance(prov, EdgeProbabilityProvider):
            raise TypeError(f"scene {k}: expected an (Environment, EdgeProbabilityProvider) tuple")
        if prov.env is not env and prov.env.id != env.id:
            raise ValueError(f"scene {k}: provider belongs to {prov.env.id}, not {env.id}")
    return scenes


def check_examples(examples):
    examples = list(examples)
    if not examples:
        raise ValueError("expected at least one StepExample")
    return examples


def check_finite(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return arr


def check_probability(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
