"""Longitudinal mammogram alignment: field kernels, risk metrics and the experiment CLI."""

import torch  # noqa: F401  (loads the libtorch shared libraries the extension links against)

from ._core import (
    ConfigError,
    DataError,
    UndefinedMetric,
    affine_to_dense,
    auc_year,
    c_index,
    c_index_ci,
    compose,
    jacobian_det,
    ncc,
    njd_percent,
    phantom_pair,
    warp,
)

try:
    from ._core import main
except ImportError:  # built without the command-line tool
    pass
