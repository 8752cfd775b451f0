"""Bundled example models and their named test functions."""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from .model import BranchingModel, load_model

_R = 1 / math.sqrt(2)

# name -> {f name -> values}; the first entry is the default
TEST_FUNCTIONS = {
    "yule": {"phi1": [1.0], "one": [1.0]},
    "two_state_small": {"antisym": [_R, -_R], "phi1": [_R, _R], "indicator0": [1.0, 0.0]},
    "two_state_critical": {"antisym": [_R, -_R], "phi1": [_R, _R], "indicator0": [1.0, 0.0]},
    # (1, -1, 0) lies in the span of the complex pair
    "three_state_cyclic": {"pair": [1.0, -1.0, 0.0], "indicator0": [1.0, 0.0, 0.0], "one": [1.0, 1.0, 1.0]},
    # (1, -1, 0) has no Perron part and a full-length Jordan chain coefficient (tau = 1)
    "jordan_designed": {"chain": [1.0, -1.0, 0.0], "indicator0": [1.0, 0.0, 0.0], "one": [1.0, 1.0, 1.0]},
}

NAMES = tuple(TEST_FUNCTIONS)


def fixture_path(name: str):
    if name not in TEST_FUNCTIONS:
        raise KeyError(f"unknown fixture {name!r}; available: {', '.join(NAMES)}")
    return resources.files(__package__) / "fixtures" / f"{name}.json"


def load_fixture(name: str) -> BranchingModel:
    return load_model(fixture_path(name).read_text())


def default_f(name: str) -> np.ndarray:
    return np.array(next(iter(TEST_FUNCTIONS[name].values())))


def named_f(name: str, f_name: str) -> np.ndarray:
    table = TEST_FUNCTIONS[name]
    if f_name not in table:
        raise KeyError(f"fixture {name!r} has no test function {f_name!r}; available: {', '.join(table)}")
    return np.array(table[f_name])


def initial_state(model: BranchingModel, x: int = 0) -> np.ndarray:
    """One particle at ``x``."""
    n = np.zeros(model.d, dtype=np.int64)
    n[x] = 1
    return n
