"""Poincaré-ball toolkit for hyperbolic face anti-spoofing at desk scale."""
from .errors import (
    DegenerateInputError,
    DomainError,
    HypballError,
    ParseError,
    ProtocolError,
    SchemaError,
    TrainingError,
    UsageError,
)
from .geometry import (
    Curvature,
    PoincarePoint,
    TangentVector,
    clip_to_ball,
    conformal_factor,
    exp_map,
    exp_map0,
    hyp_distance,
    log_map0,
    mobius_add,
)

__version__ = "0.1.0"
