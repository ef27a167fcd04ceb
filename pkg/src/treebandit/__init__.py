"""Seedable simulator for tree-structured principal-agent bandit games with transfers."""

__version__ = "0.1.0"

from .environment import (  # noqa: E402,F401
    Environment,
    NoiseModel,
    Node,
    Tree,
    build_tree,
    draw_reward,
    sample_environment,
    stream,
)
from .oracle import (  # noqa: E402,F401
    GapReport,
    OracleSolution,
    ProfileEntry,
    brute_force_welfare,
    healthy_margins,
    reward_gaps,
    solve_tree,
    spne_profile,
)
from .policies import (  # noqa: E402,F401
    AssumptionParams,
    BatchOutcome,
    ConstantMode,
    Contract,
    ExactBestResponder,
    PlayerState,
    ScheduleParams,
    ScriptedPlayer,
    SearchReport,
    SearchState,
    THEORETICAL,
    UcbStats,
    aggregate_params,
    apply_batch_outcome,
    build_players,
    classify_batch,
    decide,
    finalize_incentive,
    leaf_params,
    observe,
    propagate_params,
    run_search,
    schedule_params,
    ucb_select,
    ucb_update,
)
from .engine import (  # noqa: E402,F401
    EngineError,
    RegretLedger,
    RoundRecord,
    RunResult,
    accumulate_regret,
    checkpoint_grid,
    horizon_guardrail,
    run_game,
    run_round,
    welfare_and_w1,
)
