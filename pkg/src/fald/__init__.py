"""Federated averaging Langevin dynamics: simulation, bounds, privacy accounting."""

from .engine import (
    ChainDivergenceError,
    DecayingStep,
    FixedStep,
    FullDevice,
    RunConfig,
    SchemeI,
    SchemeII,
    Trajectory,
    run_chain,
    run_replicated,
)
from .metrics import GaussianSummary, classification_metrics, empirical_summary, w2_gaussian
from .model import (
    EnergyConstants,
    FederatedDataset,
    GaussianModelSpec,
    LogisticModelSpec,
    client_grad,
    client_grad_stochastic,
    constants,
    gen_gaussian_federation,
    gen_logistic_federation,
    target_posterior,
)
from .privacy import DpBudget, DpParams, account, budget_search
from .theory import BoundInputs, bound_decaying, bound_full_fixed, bound_partial, optimal_local_steps, plan_steps

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
