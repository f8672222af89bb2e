"""Attack strategies and the experiments that measure them."""
from .experiments import (
    AttackExperiment,
    LifetimeReport,
    LifetimeRow,
    format_table,
    observe_all_registers,
    observe_sessions,
    run_blind_guess,
    run_exhaustion,
    run_replay_eavesdropper,
    run_verbatim_replay,
    sweep_lifetime,
)
from .strategies import (
    BlindGuess,
    ExhaustionAttacker,
    FullObservation,
    Knowledge,
    ReplayEavesdropper,
    VerbatimReplay,
)
