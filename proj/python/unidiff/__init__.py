"""Unified multimodal diffusion at desk scale."""

import json as _json

from . import _core
from ._core import ConfigError, NumericalError, NoiseSchedule, energy_distance, gaussian_w2, slerp

__all__ = [
    "ConfigError",
    "NumericalError",
    "NoiseSchedule",
    "Oracle",
    "energy_distance",
    "gaussian_w2",
    "generate",
    "gradient_check",
    "sample_dataset",
    "schedule",
    "slerp",
    "train",
]


def _dump(obj):
    return obj if isinstance(obj, str) else _json.dumps(obj)


def schedule(spec="toy"):
    """'toy', 'default' or a dict such as {"T": 50, "beta_start": 2e-3, "beta_end": 0.4}."""
    return NoiseSchedule.from_json(_dump(spec))


def sample_dataset(spec="benchmark", n=1000, seed=0):
    return _core.sample_dataset(_dump(spec), n, seed)


def Oracle(spec="benchmark", schedule="toy"):
    return _core.Oracle(_dump(spec), _dump(schedule))


def generate(source="benchmark", request=None, schedule="toy"):
    """Sample from a checkpoint directory or, given a spec, from the exact oracle."""
    return _core.generate(_dump(source) if not isinstance(source, str) else source, _dump(request or {"task": "joint"}),
                          _dump(schedule))


def train(config=None, spec="benchmark", backbone=None, schedule="toy", out_dir=""):
    return _core.train(_dump(config or {}), _dump(spec), _dump(backbone or {}), _dump(schedule), str(out_dir))


def gradient_check(backbone, seed=0, max_params=0):
    return _core.gradient_check(_dump(backbone), seed, max_params)
