"""Puzzle-gated, stateless client authentication with DoS cost accounting."""

from .errors import CsaError, ParameterError, ProtocolFailure, TamperError, TokenError
from .ledger import CostCategory, CostLedger, CostWeights, Side
from .protocol import (
    AttackReason,
    Attacker,
    Client,
    ClientCredentials,
    ClientProfile,
    Confirmed,
    CsaServer,
    Legit,
    LoopbackTransport,
    RateDecision,
    RateLimiter,
    Registry,
    ServerConfig,
    client_refresh,
    client_run,
)
from .puzzle import (
    Challenge,
    PuzzleParams,
    compute_target,
    derive_solution_vector,
    generate_item_set,
    make_challenge,
    solve_subset_sum_bruteforce,
    solve_subset_sum_dp,
    verify_solution,
)
from .tokens import (
    MasterKey,
    SessionKey,
    UetRecord,
    derive_pre_shared_key,
    generate_master_key,
    open_uet,
    seal_uet,
)
from .sim import AttackKind, AttackerProfile, Scenario, SimMetrics, VirtualClock, run_scenario

__version__ = "0.1.0"
