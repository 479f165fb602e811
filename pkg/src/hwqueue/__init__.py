"""Many-server queue simulator and limit-law verification harness.

The package simulates a critically loaded queue with n heterogeneous
exponential servers under the sampled-rank routing policy (and several
reference policies), solves the limiting one-dimensional dynamics of the
scaled head count, and verifies the convergence, dominance and concentration
claims numerically at desk scale.
"""

from .analysis import (ClassPartition, DominanceAudit, Lemma2Bounds, Lemma2Config,
                       Lemma2McResult, dominance_audit, fifo_audit, invariant_audit,
                       ks_distance, lemma1_idle_metric, lemma2_bounds, lemma2_mc,
                       policy_comparison)
from .diffusion import (ScaledPath, SdeParams, SdePath, euler_maruyama,
                        marginal_samples, scale_path, sde_marginal_batch, unscale)
from .errors import AuditFailure, ConfigurationError
from .sampling import SamplePlan, build_rank, draw_samples, draw_subset, subset_size
from .scenario import (ArrivalLaw, LimitParams, Pool, PoolSpec, RateProfile,
                       ScenarioConfig, arrival_rate_for_n, build_iid_profile,
                       build_rate_profile, compute_limit_params, load_scenario,
                       validate_scenario)
from .seeds import derive_seed, splitmix64, stream
from .simcore import (PathRecord, PolicyKind, RecordOptions, choose_server,
                      parse_policy, renewal_stream, simulate)

__version__ = "0.1.0"
