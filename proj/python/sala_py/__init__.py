"""Python bindings for the SALA point-cloud segmentation library."""

import json

from ._core import (
    ConfigError,
    DimensionError,
    EmptyNeighborhoodError,
    FormatError,
    ValidationError,
    ball_query,
    count_macs,
    count_params,
    grid_subsample,
    gradcheck,
    gradcheck_operators,
    kpconv_influence,
    miou,
    nn_interpolate_map,
    normalize_config,
    soft_assign,
)
from ._core import profile_json as _profile_json


def profile(config_text: str) -> dict:
    """Parameter and MAC report for a config, as a dict."""
    return json.loads(_profile_json(config_text))


__all__ = [
    "ConfigError",
    "DimensionError",
    "EmptyNeighborhoodError",
    "FormatError",
    "ValidationError",
    "ball_query",
    "count_macs",
    "count_params",
    "grid_subsample",
    "gradcheck",
    "gradcheck_operators",
    "kpconv_influence",
    "miou",
    "nn_interpolate_map",
    "normalize_config",
    "profile",
    "soft_assign",
]
