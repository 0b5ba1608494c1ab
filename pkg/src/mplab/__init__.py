"""Moment-based Onsager analysis, AMP/OAMP simulation and state evolution
for orthogonally invariant sensing matrices."""

from .algorithms import RunConfig, RunResult, TraceRecord, run_amp, run_oamp, trace_to_csv
from .ensembles import (
    SensingOperator,
    SpectrumSpec,
    build_operator,
    empirical_moments,
    sample_haar_orthogonal,
)
from .error_model import (
    ErrorState,
    HistoryFunction,
    amp_phi,
    initial_state,
    probe_orthogonality,
    step_amp,
    step_general,
)
from .errors import MPLabError
from .models import Denoiser, Instance, NoiseModel, Prior, sample_instance
from .moments import MomentSequence, eta_transform, mp_eta, mp_moments
from .onsager import (
    GTable,
    Verdict,
    amp_convergence_verdict,
    g_table,
    g_table_two_index,
    generating_function_check,
)
from .se import SECurve, amp_se, oamp_se

__version__ = "0.1.0"
