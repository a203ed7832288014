"""Robust identification of Markov parameters for linear systems under sparse attacks."""
from .simkit import (AttackModel, StabilityCert, SystemModel, Trajectory, gen_system,
                     make_rng, replicate_seed, simulate, spectral_norm, verify_stability)
from .markov import MarkovEstimate, MarkovMatrix, RegressorDataset, build_dataset, true_markov
from .batch import BatchOptions, estimate, l1_estimator, l2_estimator, least_squares, theory_bounds
from .streaming import StepRule, StreamState, run_stream
from .realization import balanced_truncation, hankel_from_markov, realize

__version__ = "0.1.0"
