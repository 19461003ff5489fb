"""vsrl: a tabular reinforcement-learning lab for adversary-resilient
exploration, safe exploration in the limit, and safe interruptibility.

Everything is exactly solvable and seed-reproducible: small MDPs with
corruptible observation channels, generalized Bellman backup operators with
an empirical non-expansion checker and fixed-point oracle, five exploration
strategies with visit-indexed schedules, three learning rules, interruption
schemes with a conditional-independence tester, and the composite safety
checklist.
"""

__version__ = "0.1.0"

from .mdp import (  # noqa: E402
    ObservationChannel,
    TabularMdp,
    Transition,
    identity_channel,
    is_infected,
    observe,
    step,
    validate_mdp,
)
from .qtable import QTable  # noqa: E402
from .operators import (  # noqa: E402
    ActionRanking,
    BackupOperatorSpec,
    check_non_expansion,
    rank_actions,
    solve_fixed_point,
)
from .exploration import (  # noqa: E402
    ExplorationStrategy,
    boltzmann_strategy,
    eps_greedy_strategy,
    generalized_exploration_parameter,
    mellowmax_beta,
    mellowmax_strategy,
    policy_distribution,
    rrr_mellowmax_strategy,
    rrr_strategy,
    validate_nglie,
)
from .learning import LearningRateSchedule, learning_rate, q_update, target_value, train  # noqa: E402
from .interruption import (  # noqa: E402
    InterruptionScheme,
    ThetaSchedule,
    eps_interruptible,
    interruptible_distribution,
    rrr_interruptible_T,
    test_dynamic_safe_interruptibility,
    theta,
    verify_infinite_exploration,
)
from .environments import (  # noqa: E402
    CliffParams,
    ThreeStateParams,
    epsilon_crossover,
    make_cliff,
    make_three_state,
)
from .safety import (  # noqa: E402
    SafetyThresholds,
    identify_unsafe_actions,
    resilience_stats,
    resilience_sweep,
    safe_exploration_report,
    virtuous_safety_report,
)
