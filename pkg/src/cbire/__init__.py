"""Two-type continuous-state branching processes with immigration in Levy random environments."""

__version__ = "0.1.0"

from .environment import EnvPath, EnvSpec, beta, sample_path, sample_paths, verify_exp_moment  # noqa: E402
from .mechanisms import (  # noqa: E402
    BranchingMechanism,
    ImmigrationMechanism,
    JumpMeasure2D,
    ModelSpec,
    ScalarMechanism,
    dominating_mechanism,
    eval_phi,
    eval_phi_star,
    eval_phi_tilde,
    eval_psi,
    jump_integral,
    load_model,
    validate,
)
from .moments import closed_form_pi_prime, decay_bound, mat_exp, mean_total_mass, pi, pi_prime, spectral  # noqa: E402
from .cumulant import (  # noqa: E402
    SolverOpts,
    annealed_laplace,
    check_domination,
    immigration_exponent,
    quenched_laplace,
    solve_u,
    solve_u_tilde,
    solve_w,
    stationary_laplace,
    v_from_u,
    vbar,
)
from .transport import EmpiricalMeasure, coupling_cost, w1_bruteforce, w1_exact, w_dtheta  # noqa: E402
from .simulate import sample_stationary, simulate_annealed, simulate_coupled, simulate_quenched  # noqa: E402
from .ergodicity import (  # noqa: E402
    ExperimentReport,
    coupling_bound_experiment,
    domination_experiment,
    first_moment_experiment,
    tv_decay_experiment,
    wasserstein_decay_experiment,
)
