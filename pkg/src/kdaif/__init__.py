"""Knowledge distillation with adaptive influence weights."""

from .data import DatasetBundle, LabeledSet, NoiseSpec, gen_blobs, gen_two_moons, inject_noise, shift_validation
from .distill import Mechanism, TrainConfig, train_kdaif, train_online_kd, train_semi_supervised, train_vanilla_kd
from .influence import IhvpSolverConfig, InfluenceReport, influence_scores, normalize_scores, weight_fn
from .model import MlpSpec, Net, Objective, forward, init_params
from .robust import DualRiskConfig, dual_worst_case_risk

__version__ = "0.1.0"
