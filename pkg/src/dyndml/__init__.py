"""Orthogonal g-estimation of dynamic treatment effects."""
from .data import PanelDataset, PanelSchema, SingleSeries, SplitAssignment, load_panel_csv, load_panel_json, split
from .errors import (ConstraintError, ConvergenceError, DynDMLError, EstimationError, IdentificationError,
                     NumericalError, ValidationError)
from .regression import LearnerSpec, LinearModel, fit_lasso, fit_ols
from .residualize import HistoryFeaturizer, ResidualSet, residualize_markov, residualize_snmm
from .gestimate import (StructuralEstimate, confidence_interval, estimate_covariance, fit_dyndml, peel,
                        policy_value_static)
from .snmm import DynamicPolicy, build_Q, gestimate_snmm, linear_blip, off_policy_value
from .rlearner import FeatureMap, HeteroModel, fit_dynamic_rlearner, predict_effect
from .sparse import SparseOptions, fit_sparse
from .block import fit_block, discounted_value
from .simulate import DGPConfig, generate, monte_carlo, paper_instance, true_effects

__version__ = "0.1.0"
