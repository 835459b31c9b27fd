"""Nonparametric DAG learning by layers of minimum residual variance."""

__version__ = "0.1.0"

from .data import Dataset, DataError, read_csv, split_half, write_csv
from .graph import (
    CycleError,
    Dag,
    LayerDecomposition,
    Ordering,
    is_consistent_layering,
    is_consistent_ordering,
    layer_decomposition,
    read_dag,
    shd,
    write_dag,
)
from .npvar import (
    NpvarConfig,
    NpvarResult,
    NumericalError,
    auto_eta,
    check_unequal_condition,
    npvar_layers,
    population_layers,
    population_order,
)
from .oracle import (
    EnumerationOracle,
    GaussianLinearModel,
    GaussianLinearOracle,
    PluginVarianceSource,
    chain_mc_cond_var,
    discrete_enum_cond_var,
    eqvar_linear_order,
    gaussian_linear_cond_var,
    greedy_incedge_order,
)
from .prune import PruneConfig, prune_parents
from .regress import RegressorSpec, fit, residual_variance_plugin
from .simulate import attach_mechanisms, gen_graph, named_model, simulate_dataset

__all__ = [
    "CycleError",
    "Dag",
    "DataError",
    "Dataset",
    "EnumerationOracle",
    "GaussianLinearModel",
    "GaussianLinearOracle",
    "LayerDecomposition",
    "NpvarConfig",
    "NpvarResult",
    "NumericalError",
    "Ordering",
    "PluginVarianceSource",
    "PruneConfig",
    "RegressorSpec",
    "attach_mechanisms",
    "auto_eta",
    "chain_mc_cond_var",
    "check_unequal_condition",
    "discrete_enum_cond_var",
    "eqvar_linear_order",
    "fit",
    "gaussian_linear_cond_var",
    "gen_graph",
    "greedy_incedge_order",
    "is_consistent_layering",
    "is_consistent_ordering",
    "layer_decomposition",
    "named_model",
    "npvar_layers",
    "population_layers",
    "population_order",
    "prune_parents",
    "read_csv",
    "read_dag",
    "residual_variance_plugin",
    "shd",
    "simulate_dataset",
    "split_half",
    "write_csv",
    "write_dag",
]
