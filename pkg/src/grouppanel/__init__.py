"""Estimation and trace-conditional inference for panels with latent group structure."""

from .estimators import (EstimationError, FitTrace, GroupFit, brute_force_fit, estimate,
                         gfe_fit, objective, pcr_fit, tsk_fit, unit_ols)
from .panel import (GroupAssignment, LinearHypothesis, PanelDataset, PanelError,
                    augment_time_dummies, equal_slopes, load_panel, save_panel,
                    within_transform)
from .selective import (InfeasibleTraceError, TestResult, TruncationSet, feasible_set,
                        selective_test, selective_test_panel, truncated_chi2_pvalue)
from .variance import (GroupCovariances, driscoll_kraay_cov, hypothesis_cov,
                       pesaran_group_cov, theoretical_cov)

__version__ = "0.1.0"
