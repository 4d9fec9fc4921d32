#pragma once

#include "saq/harness.hpp"

#include <string>

namespace saq {

/// Loads an experiment config from YAML. Every section is optional; omitted keys
/// keep their defaults. Unknown keys, wrong types and violated invariants throw
/// ConfigError.
///
///   model:          image_size patch_size in_channels embed_dim num_heads
///                   encoder_layers global_layers window_size decoder_layers
///                   neck_dim mlp_ratio qk_init_gain
///   data:           calib_images eval_images
///   outliers:       enabled targets bulk_scale magnitude fraction headroom
///   calibration:    theta scope(global|per_row)
///                   tie_break(value_error|narrowest) grid_steps grid_min_fraction
///                   refine_radius pcc_sweeps pcc_samples mse_samples value_cap
///                   grid(capped|scaled|symmetric)
///   reconstruction: granularity(layer|stage) iterations final_iterations budget
///                   lr_bounds lr_alpha drop_prob reg_lambda warmup beta_start beta_end
///                   learn_rounding eval_items checkpoints interaction(two_way|identity)
///   bits:           [W8A8, W6A6, W4A4]
///   methods:        [minmax, mse, pcc]
///   recon_modes:    [none, local, par]
///   thetas:         [0.3, ...]
///   seeds:          [0, 1, ...]
///   output:         path
///   report:         include_weight_params
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& yaml_text);

/// YAML rendering of a config (15 significant digits).
std::string dump_experiment_config(const ExperimentConfig& cfg);

}  // namespace saq
