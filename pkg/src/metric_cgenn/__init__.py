"""Clifford group equivariant networks with a learnable symmetric metric."""

from .algebra import (
    CayleyTable,
    DiagonalMetric,
    Multivector,
    build_cayley_table,
    extended_quadratic_form,
    geometric_product,
    grade_project,
    reversal,
    versor_action,
    wedge,
)
from .metric import EigenDecomposition, MetricMatrix, eigendecompose, init_metric
from .model import CGENN, ModelConfig, TrainConfig
from .properties import PropertyReport, run_suite

__version__ = "0.1.0"

__all__ = [
    "CGENN",
    "CayleyTable",
    "DiagonalMetric",
    "EigenDecomposition",
    "MetricMatrix",
    "ModelConfig",
    "Multivector",
    "PropertyReport",
    "TrainConfig",
    "build_cayley_table",
    "eigendecompose",
    "extended_quadratic_form",
    "geometric_product",
    "grade_project",
    "init_metric",
    "reversal",
    "run_suite",
    "versor_action",
    "wedge",
]
