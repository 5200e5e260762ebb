"""FPMC 解析扩散去噪器核心模块"""
from .config import BUILD_METHODS, PRESETS, get_threads, save_config
from .errors import CoverageError, FpmcError, NumericalError, ValidationError
from .core import (Dataset, DiffusionSchedule, ImageGeometry, SourceMeasure, edm_time_grid,
                   translate_image)
from .storage import load_dataset, save_dataset, export_pngs, save_png_grid
from .estimator import (EstimatorSpec, FpmcModel, FpmcStep, filtered_log_likelihood,
                        filtered_posterior, filtered_posterior_mean, fpmc_denoise, load_model,
                        save_model, score_from_denoiser)
from .classical import (OptimalDenoiser, WienerDenoiser, WienerModel, fit_wiener,
                        optimal_denoiser, wiener_denoise, wiener_matrix)
from .constructors import (ScheduleTable, SensitivityMap, build_els, build_ls, build_lukoianov,
                           build_optimal, build_pspc_flex, build_pspc_square,
                           cumulative_threshold_mask, lukoianov_masks, square_patch_indicator)
from .finetune import (FinetuneConfig, LogParams, ResponseTable, adamw_step, finetune_grad,
                       finetune_loss, finetune_model, finetune_run, masked_source, mc_subsample)
from .augment import AugmentPlan, AugmentationLabel, build_augmented, ingest_synthetic
from .sampler import SamplerConfig, SampleResult, heun_sample, ode_drift, sample_prior
from .evaluation import (ComparisonReport, SweepResult, compare_samples, denoiser_error_sweep,
                         relative_error_change, sample_similarity)
from .report import generate_report

__all__ = [
    'BUILD_METHODS',
    'PRESETS',
    'get_threads',
    'save_config',
    'CoverageError',
    'FpmcError',
    'NumericalError',
    'ValidationError',
    'Dataset',
    'DiffusionSchedule',
    'ImageGeometry',
    'SourceMeasure',
    'edm_time_grid',
    'translate_image',
    'load_dataset',
    'save_dataset',
    'export_pngs',
    'save_png_grid',
    'EstimatorSpec',
    'FpmcModel',
    'FpmcStep',
    'filtered_log_likelihood',
    'filtered_posterior',
    'filtered_posterior_mean',
    'fpmc_denoise',
    'load_model',
    'save_model',
    'score_from_denoiser',
    'OptimalDenoiser',
    'WienerDenoiser',
    'WienerModel',
    'fit_wiener',
    'optimal_denoiser',
    'wiener_denoise',
    'wiener_matrix',
    'ScheduleTable',
    'SensitivityMap',
    'build_els',
    'build_ls',
    'build_lukoianov',
    'build_optimal',
    'build_pspc_flex',
    'build_pspc_square',
    'cumulative_threshold_mask',
    'lukoianov_masks',
    'square_patch_indicator',
    'FinetuneConfig',
    'LogParams',
    'ResponseTable',
    'adamw_step',
    'finetune_grad',
    'finetune_loss',
    'finetune_model',
    'finetune_run',
    'masked_source',
    'mc_subsample',
    'AugmentPlan',
    'AugmentationLabel',
    'build_augmented',
    'ingest_synthetic',
    'SamplerConfig',
    'SampleResult',
    'heun_sample',
    'ode_drift',
    'sample_prior',
    'ComparisonReport',
    'SweepResult',
    'compare_samples',
    'denoiser_error_sweep',
    'relative_error_change',
    'sample_similarity',
    'generate_report',
]
