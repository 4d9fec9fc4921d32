#pragma once

#include "saq/autodiff.hpp"
#include "saq/quant_env.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace saq {

enum class LayerKind { Window, Global };

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int in_channels = 3;
  int embed_dim = 64;
  int num_heads = 4;
  int encoder_layers = 6;
  std::vector<int> global_layer_indices{2, 5};
  int window_size = 4;  // tokens per window side
  int decoder_layers = 2;
  int neck_dim = 32;
  int mlp_ratio = 4;
  /// Multiplier on the query/key projection init; sharpens attention maps.
  double qk_init_gain = 1.5;
  std::uint64_t seed = 0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  int grid() const { return image_size / patch_size; }
  int num_tokens() const { return grid() * grid(); }
  int head_dim() const { return embed_dim / num_heads; }
  bool is_global(int layer) const;
  std::vector<LayerKind> layer_kinds() const;

  bool operator==(const ModelConfig&) const = default;
};

struct Stage {
  int first = 0;
  int last = 0;  // inclusive
  bool operator==(const Stage&) const = default;
};

/// Contiguous encoder-layer ranges, each closed by a global-attention layer.
struct StagePlan {
  std::vector<Stage> stages;

  int stage_of(int layer) const;
  int num_layers() const { return stages.empty() ? 0 : stages.back().last + 1; }
};

/// Splits after every global layer. Throws ConfigError if the last layer is not global.
StagePlan stage_partition(const std::vector<LayerKind>& kinds);

/// Per-(group, head) attention maps of one module. Index = group * heads + head,
/// where groups are windows for windowed layers and a single group otherwise.
struct AttentionTrace {
  std::string module_id;
  int heads = 0;
  std::vector<Mat> scores;
  std::vector<Mat> weights;
};

enum class PromptKind { Point, Box };

/// Coordinates in image pixels. Points use (x0, y0); boxes span (x0, y0)-(x1, y1).
struct PromptSpec {
  PromptKind kind = PromptKind::Point;
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 0.0;
  double y1 = 0.0;
  bool foreground = true;
};

using HookObserver = std::function<void(const std::string& name, const Mat& value)>;

/// Instrumentation for one forward pass. All members are optional.
struct Hooks {
  QuantEnv* quant = nullptr;
  HookObserver observer;
  std::vector<AttentionTrace>* traces = nullptr;
};

using TokenGroups = std::vector<std::vector<int>>;

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::map<std::string, Tensor>& params() { return params_; }
  const std::map<std::string, Tensor>& params() const { return params_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return params_.count(name) > 0; }

  /// Token index groups of the windowed layers (row-major token grid).
  const TokenGroups& windows() const { return windows_; }
  /// Window groups for windowed encoder attention, nullopt for full attention.
  const TokenGroups* attention_groups(const std::string& module) const;
  /// All attention modules in execution order.
  std::vector<std::string> attention_modules() const;
  /// Names of all fake-quant hook points (activations and weights).
  std::vector<std::string> quantized_linears() const;

 private:
  ModelConfig cfg_;
  std::map<std::string, Tensor> params_;
  TokenGroups windows_;
};

/// Seeded init: scaled normal weights, zero biases, unit LayerNorm gains.
Model build_model(const ModelConfig& cfg);

Var patch_embed(Tape& tape, const Model& model, const Mat& image);
Var encoder_layer(Tape& tape, const Model& model, const Hooks& hooks, int layer, const Var& x);
Var neck(Tape& tape, const Model& model, const Hooks& hooks, const Var& tokens);

struct EncodeResult {
  std::vector<Var> stage_outputs;
  Var embedding;
};

/// image is [C x H*W] (channel rows, row-major pixels).
EncodeResult encode_image(Tape& tape, const Model& model, const Mat& image, const Hooks& hooks = {});

/// Applies the neck to stage-k tokens, skipping every later encoder layer.
Var forward_from_stage(Tape& tape, const Model& model, const Var& stage_tokens, int stage,
                       const Hooks& hooks = {});

Var encode_prompts(Tape& tape, const Model& model, const std::vector<PromptSpec>& prompts);

struct DecoderState {
  Var queries;
  Var keys;
  Var query_pe;
  Var key_pe;
};

DecoderState decoder_init(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens);
void two_way_block(Tape& tape, const Model& model, const Hooks& hooks, int block, DecoderState& st);
void final_attention(Tape& tape, const Model& model, const Hooks& hooks, DecoderState& st);
/// Mask head on a decoded state; [H x W] logits. Not differentiated.
Mat mask_from_state(const Model& model, const DecoderState& st);

/// Two-way blocks only; returns the prompt-conditioned image tokens.
Var two_way_transformer(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens,
                        const Hooks& hooks = {});

struct DecodeResult {
  Mat mask_logits;
  Var hybrid_tokens;
  DecoderState state;
};

DecodeResult decode_masks(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens,
                          const Hooks& hooks = {});

/// Multi-head attention of `module` with fake-quant at every hook named in
/// hooks.quant; per-head scores and weights are written to `trace` if non-null.
Var attention_forward_traced(Tape& tape, const Model& model, const std::string& module, const Var& xq,
                             const Var& xk, const Var& xv, const Hooks& hooks, AttentionTrace* trace);

/// Passes `x` through the observer and the activation quantizer named `name`.
Var hook_act(Tape& tape, const Hooks& hooks, const std::string& name, const Var& x);

Mat bilinear_upsample(const Mat& src, int out_h, int out_w);

/// SAQW file: magic, u32 version, u32 count, per-tensor headers (u16 name
/// length + name, u8 rank, u64 dims, u64 offset into the blob), then the
/// little-endian f64 blob. The model config travels as the "meta.config" tensor.
void save_weights(const Model& model, const std::string& path);
Model load_weights(const std::string& path);

struct NamedTensor {
  std::string name;
  Mat value;
  bool rank1 = false;
};

void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensor_file(const std::string& path);

}  // namespace saq
