"""Sliding-window visual-inertial odometry."""

from vislam.vio.estimator import (BodyState, EstimatorConfig, OptimizationWindow, SlidingWindowVIO,
                                  coverage_keyframe, hull_area, triangulate)
from vislam.vio.marginalization import LinearFactor, MarginalPrior, marginalize, schur_complement
from vislam.vio.residuals import (ImuNoise, InertialResidualTerm, VisualResidualTerm, inertial_residual,
                                  make_inertial_term, propagate, visual_residual, visual_residuals)
