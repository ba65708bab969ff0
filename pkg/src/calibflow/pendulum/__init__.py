"""Triple-pendulum benchmark: simulation, datasets, zero-shot and Gaussian-baseline experiments."""
from .data import (MODELS, RELATIONS, AuditError, PendulumDatasets, Split, audit_conditions,
                   make_datasets, read_datasets, training_masks, write_datasets)
from .experiments import (Regressor, ZeroShotResult, default_flow_config, fit_regressor,
                          fit_sigma_minmpjpe, fit_sigma_nll, gaussian_baseline_experiment, node_errors,
                          sample_in_chunks, train_model, zero_shot_experiment)
from .sim import (IntegratorError, PendulumConfig, Trajectories, energy, energy_drift, observe,
                  positions, rest_energy, simulate)
