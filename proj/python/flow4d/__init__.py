# Copyright 2026 The flow4d Authors
# SPDX-License-Identifier: Apache-2.0

from ._flow4d import (
    Autoencoder,
    CardiacFlow,
    Completion,
    DimensionError,
    Error,
    FormatError,
    InvalidArgument,
    LatentFlow,
    NonFiniteError,
    UndefinedMetric,
    corrupt,
    cycle_dsc,
    dsc,
    hd95,
    load_grid,
    load_sequence,
    paired_ttest,
    pgk_distance,
    pgk_encode,
    phantom_sequence,
    run_cli,
    save_grid,
    save_sequence,
    vfid,
)

__version__ = "0.1.0"
