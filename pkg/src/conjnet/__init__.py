"""Noisy-OR network models of plasmid conjugation in tracked bacterial lineages."""
from .errors import ConfigError, ConjnetError, DataError
from .factored import factored_query
from .inference import Evidence, Query, QueryBudget, QueryResult, Status, assemble_evidence, enumerate_queries, exact_query
from .models import DelayModel, ModelConfig, default_grid, load_model_grid, make_model
from .network import BayesNet, build_network, prune_for_query
from .pipeline import EvalOptions, evaluate, run_grid
from .ranking import ProbTable, build_report
from .synth import SynthConfig, generate_trial
from .tracks import TrialDataset, parse_tracks, read_tracks

__version__ = "0.1.0"
