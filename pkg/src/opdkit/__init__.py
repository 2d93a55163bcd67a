"""Progress-potential auditing toolkit: OPD metrics, consistency checks, pair benchmarks."""

from opdkit.audit import audit_episodes, fingerprint, reachability, success_conditioned
from opdkit.consistency import check_cocycle, induce_potential, refinement_drift
from opdkit.kernels import BACKEND
from opdkit.metrics import OpdConfig, OpdRecord, calibrate_epsilon, opd_record
from opdkit.potential import PotentialTrace, ValidationPolicy, validate_trace
from opdkit.sampler import SamplerConfig, build_pairs, discretize

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "OpdConfig",
    "OpdRecord",
    "PotentialTrace",
    "SamplerConfig",
    "ValidationPolicy",
    "audit_episodes",
    "build_pairs",
    "calibrate_epsilon",
    "check_cocycle",
    "discretize",
    "fingerprint",
    "induce_potential",
    "opd_record",
    "reachability",
    "refinement_drift",
    "success_conditioned",
    "validate_trace",
]
