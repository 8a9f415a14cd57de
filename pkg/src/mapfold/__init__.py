"""Backbone reconstruction from partial measurements with plug-in denoising
priors: a correlated polymer prior, pluggable denoisers, measurement
log-likelihoods, and an alternating MAP solver."""

from .prior import (ATOMS_PER_RESIDUE, BackboneChain, CorrelatedPrior,
                    Schedule, build_prior, condition_number, forward_noise,
                    unwhiten, whiten)
from .denoise import (Denoiser, GaussianLibraryDenoiser, OracleDenoiser,
                      gaussian_denoise, jvp_finite_difference, oracle_denoise)
from .likelihood import (DistanceLikelihood, DistanceSet, LinearLikelihood,
                         MaskedLinearMeasurement, PreconditionedLinear,
                         RawLinearLikelihood, distance_loglik_grad,
                         linear_loglik_grad, precondition)
from .density import (AtomSpec, DensityLikelihood, DensityMap,
                      density_loglik_grad, lowpass, render_density)
from .solver import (LikelihoodBinding, RunReport, SolverConfig,
                     filter_replicas, resolution_annealing, run_adp, run_dps,
                     run_no_prior, task_defaults)
from .pdbio import parse_backbone, read_backbone, write_backbone
from .mrcio import read_mrc, write_mrc
from .sampling import (delete_residues, mask_measurement,
                       measurement_from_partial, sample_distances, sample_mask)
from .evaluate import MetricRecord, kabsch, rmsd, rmsd_vs_completeness
from .remote import RemoteDenoiserClient, serve_denoiser

__version__ = "0.1.0"
