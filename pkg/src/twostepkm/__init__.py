"""Two-step Kaplan-Meier estimators of treatment effects with right-censored outcomes."""

from .bootstrap import BandResult, BootstrapSpec, resample, uniform_band
from .cic import (CicEstimator, CicRequest, estimate_att, estimate_cell_cdf, estimate_counterfactual_cdf,
                  estimate_dtt, estimate_qtt)
from .data import (CensoredSample, EffectCurve, Estimand, Observation, SampleDiagnostics, StepDistribution,
                   load_csv, validate_for_estimand, write_csv)
from .distributions import cdf_eval, compose_counterfactual, generalized_inverse, km_mean, rearrange
from .exceptions import (BootstrapError, EstimationError, IdentificationError, SeparationError, TwoStepKMError,
                         ValidationError, WeakInstrumentError)
from .km import (cumulative_hazard, km_cdf, km_cdf_via_hazard, km_integral, km_weights, order_group,
                 support_diagnostics)
from .late import (LateEstimator, LateRequest, estimate_complier_cdf, estimate_complier_mean, estimate_kappa,
                   estimate_late, estimate_ldte, estimate_lqte)
from .propensity import PropensityFit, PropensitySpec, fit_nw_kernel, fit_parametric_logit, fit_series_logit, predict
from .simulation import DesignSpec, SimulationReport, calibrate_censoring, generate, run_study
from .unconfounded import (UnconfoundedEstimator, UnconfoundedRequest, estimate_ate, estimate_dte,
                           estimate_potential_cdf, estimate_qte)

__version__ = "0.1.0"
