"""Skeleton action recognition with a hybrid attention + selective
state-space model. The heavy lifting lives in the _core extension."""

from ._core import (  # noqa: F401
    ConfigError,
    DataError,
    Model,
    ModelConfig,
    NumericError,
    SsmParams,
    bench_scan,
    build_model,
    builtin_topology_edges,
    causal_conv1d,
    cov_pool,
    cycle_fc,
    desk_preset,
    dkd_loss,
    full_preset,
    hop_distance,
    newton_schulz_sqrt,
    param_count_formula,
    scan_recurrence,
    selective_scan,
    __version__,
)
