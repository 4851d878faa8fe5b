"""Deep-image-prior denoising with calibrated parameter transfer.

The library denoises single fluorescence-microscopy-style images by fitting
a randomly initialized convolutional network to the noisy input and stopping
early. Instead of tuning the network architecture and stopping point per
image, a calibration dictionary built by exhaustive grid search supplies
them, matched by metadata group or image similarity.
"""

from .calibration import (CalibrationEntry, CalibrationStore, GridResult, GroupKey,
                          SearchSpace, StoreFormatError, best_combined,
                          best_per_measure, build_store, calibrate_image,
                          enumerate_search_space, group_best, load_store, save_store)
from .engine import (DivergenceError, FixedInput, RunConfig, RunTrace, dip_denoise,
                     dip_run, gradient_check, sample_input)
from .image import (ImageMeta, NormParams, Patch, area_resize, denormalize,
                    fingerprint, load_image, mean_gradient, merge_channels,
                    normalize, read_raw, save_image, split_channels, stitch,
                    tile, write_raw)
from .metrics import (LearnedPerceptual, MetricKind, StructuralDissimilarity, mae,
                      mean_gradient_diff, metric_report, mse, perceptual_distance,
                      psnr, rank_sum_select, ssim)
from .network import (NetworkSpec, build_network, level_widths, parameter_count)
from .synthdata import (NoiseModel, PhantomKind, SyntheticItem, apply_noise,
                        build_synthetic_dataset, generate_phantom)
from .transfer import (Scope, SimilarityKind, TransferDecision, TransferStrategy,
                       auto_denoise, baseline_config, denoise_with_config, embed,
                       fit_embedding, nearest_calibration_image, select_config)

__version__ = "0.1.0"
