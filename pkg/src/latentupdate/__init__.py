"""Fast posterior updates for a latent-class model of longitudinal PSA and biopsy data.

A hierarchical two-class model is fitted by Metropolis-within-Gibbs MCMC;
new patients and new measurements are then handled by importance sampling
against the stored posterior draws instead of refitting.
"""

__version__ = "0.1.0"

from .errors import (
    CappedESSError,
    DegenerateWeightsError,
    LatentUpdateError,
    PrecisionError,
    SamplerError,
    StaleCacheError,
    ValidationError,
)
from .model import (
    ModelConfig,
    ObservationBlock,
    PatientLatents,
    PatientRecord,
    PopulationParams,
    log_latent_density,
    log_obs_likelihood,
    marginal_class_loglik,
    sample_latents,
)
from .simulate import SimConfig, append_observations, simulate_cohort
from .mcmc import PosteriorSample, fit, patient_risk, potential_scale_reduction, summarize
from .store import load_sample, save_sample, sample_digest
from .importance import (
    ProposalCache,
    WeightedProposalSet,
    dynamic_update,
    effective_sample_size,
    generate_proposals,
    normalize_log_weights,
    posterior_functional,
    weigh_new_observations,
    weigh_new_patient,
)
from .alternatives import (
    conditional_posterior_estimate,
    grid_oracle,
    rao_blackwell_is_estimate,
    rejection_sample,
)
from .evaluation import AgreementReport, agreement_experiment, diff_quantiles, ess_deviation_table, rmsd, timing_report
