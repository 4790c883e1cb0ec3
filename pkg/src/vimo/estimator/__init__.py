"""Sliding-window visual-inertial(-magnetometer) estimator."""
from .pipeline import (ConfigurationError, DatasetFormatError, RunConfig, SequenceStats,
                       anchor_prior, run_sequence)
from .solver import (MarginalizationPrior, NumericalFailure, OptimizerConfig, DenseSystem,
                     levenberg_marquardt, prior_from_information, schur_complement)
from .window import (FactorGraphWindow, Frame, MagPairFactor, MagSegment,
                     TimestampRegressionError, add_frame, keyframe_policy, marginalize,
                     optimize)
