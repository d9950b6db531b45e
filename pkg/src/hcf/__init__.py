"""Collaborative filtering over signed (positive and negative) engagements."""
from .errors import (ContractError, HCFError, IngestError, NotFoundError, ScenarioError, TrainingError,
                     UndefinedMetricError)
from .evaluation import EvalReport, Scenario, ScenarioName, auc, evaluate_pair, evaluate_split, split
from .fm import Direction, FmModel, Role, TrainConfig, Variant, fit, train
from .pipelines import (CandidateParams, DisseminationParams, build_candidates_dism, build_candidates_reco,
                        disseminate_step, recommend, run_dissemination)
from .similarity import cosine, heterogeneous_neighbors, homogeneous_neighbors
from .store import EngagementEvent, EngagementStore, EntityId, Kind, Polarity, ingest, load
from .synthgen import GenConfig, GroundTruth, generate, response_oracle

__version__ = "0.1.0"
