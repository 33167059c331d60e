"""Planning toolkit for POMDPs with paid state requests."""

from .model import (
    Belief,
    ImpossibleObservation,
    ModelValidationError,
    Phase,
    PomdpModel,
    PomdpSr,
    belief_reward,
    belief_update,
    corner_belief,
    load_model,
    model_from_json,
    model_to_json,
    observation_probabilities,
    observation_probability,
    save_model,
)
from .equivalent import EquivalentPomdp, to_equivalent_pomdp

__version__ = "0.1.0"
