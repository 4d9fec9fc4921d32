#include "saq/model.hpp"

#include "saq/errors.hpp"
#include "saq/ops.hpp"
#include "saq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace saq {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    fail("image_size must be a positive multiple of patch_size");
  }
  if (in_channels <= 0) fail("in_channels must be positive");
  if (window_size <= 0 || grid() % window_size != 0) fail("token grid must be divisible by window_size");
  if (num_heads <= 0 || embed_dim <= 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (neck_dim <= 0 || neck_dim % num_heads != 0 || neck_dim % 2 != 0) {
    fail("neck_dim must be even and divisible by num_heads");
  }
  if (encoder_layers <= 0) fail("encoder_layers must be positive");
  if (decoder_layers <= 0) fail("decoder_layers must be positive");
  if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
  std::set<int> seen;
  for (int g : global_layer_indices) {
    if (g < 0 || g >= encoder_layers) fail("global layer index out of range");
    if (!seen.insert(g).second) fail("duplicate global layer index");
  }
  if (!is_global(encoder_layers - 1)) fail("last encoder layer must use global attention");
}

bool ModelConfig::is_global(int layer) const {
  return std::find(global_layer_indices.begin(), global_layer_indices.end(), layer) != global_layer_indices.end();
}

std::vector<LayerKind> ModelConfig::layer_kinds() const {
  std::vector<LayerKind> kinds;
  for (int l = 0; l < encoder_layers; ++l) kinds.push_back(is_global(l) ? LayerKind::Global : LayerKind::Window);
  return kinds;
}

int StagePlan::stage_of(int layer) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (layer >= stages[i].first && layer <= stages[i].last) return static_cast<int>(i);
  }
  throw RangeError("layer " + std::to_string(layer) + " is not covered by the stage plan");
}

StagePlan stage_partition(const std::vector<LayerKind>& kinds) {
  if (kinds.empty() || kinds.back() != LayerKind::Global) {
    throw ConfigError("stage partition requires the last layer to be global");
  }
  StagePlan plan;
  int first = 0;
  for (int l = 0; l < static_cast<int>(kinds.size()); ++l) {
    if (kinds[l] == LayerKind::Global) {
      plan.stages.push_back({first, l});
      first = l + 1;
    }
  }
  return plan;
}

namespace {

TokenGroups make_windows(int grid, int ws) {
  TokenGroups groups;
  for (int wy = 0; wy < grid / ws; ++wy) {
    for (int wx = 0; wx < grid / ws; ++wx) {
      std::vector<int> g;
      for (int ty = wy * ws; ty < (wy + 1) * ws; ++ty) {
        for (int tx = wx * ws; tx < (wx + 1) * ws; ++tx) g.push_back(ty * grid + tx);
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

const char* const kProj[] = {"q", "k", "v", "proj"};

}  // namespace

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  windows_ = make_windows(cfg_.grid(), cfg_.window_size);
}

Tensor& Model::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const TokenGroups* Model::attention_groups(const std::string& module) const {
  if (module.rfind("enc.", 0) != 0) return nullptr;
  const int layer = std::stoi(module.substr(4));
  if (cfg_.is_global(layer)) return nullptr;
  // A window covering the whole grid is plain global attention.
  if (windows_.size() == 1) return nullptr;
  return &windows_;
}

std::vector<std::string> Model::attention_modules() const {
  std::vector<std::string> out;
  for (int l = 0; l < cfg_.encoder_layers; ++l) out.push_back("enc." + std::to_string(l) + ".attn");
  for (int i = 0; i < cfg_.decoder_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    out.push_back(p + ".self");
    out.push_back(p + ".t2i");
    out.push_back(p + ".i2t");
  }
  out.push_back("dec.final");
  return out;
}

std::vector<std::string> Model::quantized_linears() const {
  std::vector<std::string> out;
  auto attn = [&](const std::string& m) {
    for (const char* p : kProj) out.push_back(m + "." + p);
  };
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    attn(p + ".attn");
    out.push_back(p + ".mlp.fc1");
    out.push_back(p + ".mlp.fc2");
  }
  out.push_back("neck.proj");
  for (int i = 0; i < cfg_.decoder_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    attn(p + ".self");
    attn(p + ".t2i");
    out.push_back(p + ".mlp.fc1");
    out.push_back(p + ".mlp.fc2");
    attn(p + ".i2t");
  }
  attn("dec.final");
  return out;
}

Model build_model(const ModelConfig& cfg) {
  Model model(cfg);
  auto& params = model.params();
  std::mt19937_64 rng = make_stream(cfg.seed, "model");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Index r, Index c, double stddev) {
    Mat m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * stddev;
    return m;
  };
  auto linear = [&](const std::string& name, int in, int out, double gain = 1.0) {
    params[name + ".w"] = Tensor(randn(in, out, gain / std::sqrt(static_cast<double>(in))));
    params[name + ".b"] = Tensor(Mat::Zero(1, out));
  };
  auto norm = [&](const std::string& name, int dim) {
    params[name + ".g"] = Tensor(Mat::Ones(1, dim));
    params[name + ".b"] = Tensor(Mat::Zero(1, dim));
  };
  auto attention = [&](const std::string& name, int dim) {
    linear(name + ".q", dim, dim, cfg.qk_init_gain);
    linear(name + ".k", dim, dim, cfg.qk_init_gain);
    linear(name + ".v", dim, dim);
    linear(name + ".proj", dim, dim);
  };

  const int d = cfg.embed_dim;
  const int nd = cfg.neck_dim;
  linear("patch.proj", cfg.in_channels * cfg.patch_size * cfg.patch_size, d);
  params["patch.pos"] = Tensor(randn(cfg.num_tokens(), d, 0.1));
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    norm(p + ".ln1", d);
    attention(p + ".attn", d);
    norm(p + ".ln2", d);
    linear(p + ".mlp.fc1", d, d * cfg.mlp_ratio);
    linear(p + ".mlp.fc2", d * cfg.mlp_ratio, d);
  }
  linear("neck.proj", d, nd);
  norm("neck.ln", nd);
  params["prompt.pe_basis"] = Tensor(randn(2, nd / 2, 1.0));
  params["prompt.type"] = Tensor(randn(4, nd, 1.0));
  params["dec.mask_token"] = Tensor(randn(1, nd, 1.0));
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    attention(p + ".self", nd);
    norm(p + ".norm1", nd);
    attention(p + ".t2i", nd);
    norm(p + ".norm2", nd);
    linear(p + ".mlp.fc1", nd, 2 * nd);
    linear(p + ".mlp.fc2", 2 * nd, nd);
    norm(p + ".norm3", nd);
    attention(p + ".i2t", nd);
    norm(p + ".norm4", nd);
  }
  attention("dec.final", nd);
  norm("dec.final_norm", nd);
  linear("head.hyper.fc1", nd, nd);
  linear("head.hyper.fc2", nd, nd);
  linear("head.up", nd, nd);
  return model;
}

Var hook_act(Tape& tape, const Hooks& hooks, const std::string& name, const Var& x) {
  if (hooks.observer) hooks.observer(name, x.value());
  if (hooks.quant != nullptr) return hooks.quant->apply_act(tape, name, x);
  return x;
}

namespace {

Var constant_param(Tape& tape, const Model& model, const std::string& name) {
  return tape.constant(model.param(name).data);
}

Var linear(Tape& tape, const Model& model, const Hooks& hooks, const std::string& name, const Var& x) {
  Var in = hook_act(tape, hooks, name + ".in", x);
  Var w = constant_param(tape, model, name + ".w");
  if (hooks.quant != nullptr) w = hooks.quant->apply_weight(tape, name + ".w", w);
  Var y = add_row(matmul(in, w), constant_param(tape, model, name + ".b"));
  return hook_act(tape, hooks, name + ".out", y);
}

Var norm(Tape& tape, const Model& model, const std::string& name, const Var& x) {
  return layer_norm(x, constant_param(tape, model, name + ".g"), constant_param(tape, model, name + ".b"));
}

Mat fourier_pe(const Mat& basis, const Mat& coords01) {
  Mat c = (2.0 * coords01.array() - 1.0).matrix();
  Mat proj = 2.0 * std::numbers::pi * (c * basis);
  Mat out(proj.rows(), 2 * proj.cols());
  out.leftCols(proj.cols()) = proj.array().sin().matrix();
  out.rightCols(proj.cols()) = proj.array().cos().matrix();
  return out;
}

Mat dense_pe(const Model& model) {
  const int g = model.config().grid();
  Mat coords(g * g, 2);
  for (int ty = 0; ty < g; ++ty) {
    for (int tx = 0; tx < g; ++tx) {
      coords(ty * g + tx, 0) = (tx + 0.5) / g;
      coords(ty * g + tx, 1) = (ty + 0.5) / g;
    }
  }
  return fourier_pe(model.param("prompt.pe_basis").data, coords);
}

Mat linear_value(const Model& model, const std::string& name, const Mat& x) {
  Mat y = x * model.param(name + ".w").data;
  y.rowwise() += model.param(name + ".b").data.row(0);
  return y;
}

}  // namespace

Var attention_forward_traced(Tape& tape, const Model& model, const std::string& module, const Var& xq,
                             const Var& xk, const Var& xv, const Hooks& hooks, AttentionTrace* trace) {
  const int heads = model.config().num_heads;
  Var q = linear(tape, model, hooks, module + ".q", xq);
  Var k = linear(tape, model, hooks, module + ".k", xk);
  Var v = linear(tape, model, hooks, module + ".v", xv);
  if (q.cols() % heads != 0) throw DimensionError("attention width not divisible by head count");
  const Index dh = q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const TokenGroups* groups = model.attention_groups(module);
  if (trace != nullptr) {
    trace->module_id = module;
    trace->heads = heads;
    trace->scores.clear();
    trace->weights.clear();
  }

  auto attend = [&](const Var& qg, const Var& kg, const Var& vg) {
    std::vector<Var> head_out;
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(qg, h * dh, dh);
      Var kh = slice_cols(kg, h * dh, dh);
      Var vh = slice_cols(vg, h * dh, dh);
      Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
      Var w = softmax_rows(scores);
      if (trace != nullptr) {
        trace->scores.push_back(scores.value());
        trace->weights.push_back(w.value());
      }
      w = hook_act(tape, hooks, module + ".softmax", w);
      head_out.push_back(matmul(w, vh));
    }
    return concat_cols(head_out);
  };

  Var out;
  if (groups == nullptr) {
    out = attend(q, k, v);
  } else {
    std::vector<Var> parts;
    std::vector<int> order;
    for (const auto& g : *groups) {
      parts.push_back(attend(gather_rows(q, g), gather_rows(k, g), gather_rows(v, g)));
      order.insert(order.end(), g.begin(), g.end());
    }
    std::vector<int> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = static_cast<int>(i);
    out = gather_rows(concat_rows(parts), inverse);
  }
  return linear(tape, model, hooks, module + ".proj", out);
}

namespace {

Var attention(Tape& tape, const Model& model, const Hooks& hooks, const std::string& module, const Var& xq,
              const Var& xk, const Var& xv) {
  if (hooks.traces != nullptr) {
    AttentionTrace trace;
    Var out = attention_forward_traced(tape, model, module, xq, xk, xv, hooks, &trace);
    hooks.traces->push_back(std::move(trace));
    return out;
  }
  return attention_forward_traced(tape, model, module, xq, xk, xv, hooks, nullptr);
}

}  // namespace

Var patch_embed(Tape& tape, const Model& model, const Mat& image) {
  const ModelConfig& cfg = model.config();
  const int hw = cfg.image_size;
  const int p = cfg.patch_size;
  const int g = cfg.grid();
  if (image.rows() != cfg.in_channels || image.cols() != static_cast<Index>(hw) * hw) {
    throw DimensionError("image must be [" + std::to_string(cfg.in_channels) + " x " + std::to_string(hw * hw) + "]");
  }
  Mat patches(g * g, cfg.in_channels * p * p);
  for (int ty = 0; ty < g; ++ty) {
    for (int tx = 0; tx < g; ++tx) {
      Index col = 0;
      for (int c = 0; c < cfg.in_channels; ++c) {
        for (int py = 0; py < p; ++py) {
          for (int px = 0; px < p; ++px) {
            patches(ty * g + tx, col++) = image(c, (ty * p + py) * hw + tx * p + px);
          }
        }
      }
    }
  }
  // First layer stays in full precision.
  Var x = add_row(matmul(tape.constant(std::move(patches)), constant_param(tape, model, "patch.proj.w")),
                  constant_param(tape, model, "patch.proj.b"));
  return add(x, constant_param(tape, model, "patch.pos"));
}

Var encoder_layer(Tape& tape, const Model& model, const Hooks& hooks, int layer, const Var& x) {
  if (layer < 0 || layer >= model.config().encoder_layers) throw RangeError("encoder layer out of range");
  const std::string p = "enc." + std::to_string(layer);
  Var h = norm(tape, model, p + ".ln1", x);
  Var a = attention(tape, model, hooks, p + ".attn", h, h, h);
  Var y = add(hook_act(tape, hooks, p + ".res1.in", x), a);
  h = norm(tape, model, p + ".ln2", y);
  h = gelu(linear(tape, model, hooks, p + ".mlp.fc1", h));
  h = linear(tape, model, hooks, p + ".mlp.fc2", h);
  return add(hook_act(tape, hooks, p + ".res2.in", y), h);
}

Var neck(Tape& tape, const Model& model, const Hooks& hooks, const Var& tokens) {
  if (tokens.rows() != model.config().num_tokens() || tokens.cols() != model.config().embed_dim) {
    throw DimensionError("neck input must be [tokens x embed_dim]");
  }
  return norm(tape, model, "neck.ln", linear(tape, model, hooks, "neck.proj", tokens));
}

EncodeResult encode_image(Tape& tape, const Model& model, const Mat& image, const Hooks& hooks) {
  const ModelConfig& cfg = model.config();
  EncodeResult res;
  Var x = patch_embed(tape, model, image);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    x = encoder_layer(tape, model, hooks, l, x);
    if (cfg.is_global(l)) res.stage_outputs.push_back(x);
  }
  res.embedding = neck(tape, model, hooks, x);
  return res;
}

Var forward_from_stage(Tape& tape, const Model& model, const Var& stage_tokens, int stage, const Hooks& hooks) {
  const int stages = static_cast<int>(model.config().global_layer_indices.size());
  if (stage < 0 || stage >= stages) throw RangeError("stage index out of range");
  return neck(tape, model, hooks, stage_tokens);
}

Var encode_prompts(Tape& tape, const Model& model, const std::vector<PromptSpec>& prompts) {
  if (prompts.empty()) throw ContractError("at least one prompt is required");
  const double size = model.config().image_size;
  auto check = [&](double v) {
    if (!(v >= 0.0 && v <= size)) throw RangeError("prompt coordinate outside the image");
  };
  std::vector<std::pair<Eigen::RowVector2d, int>> points;
  for (const PromptSpec& p : prompts) {
    check(p.x0);
    check(p.y0);
    if (p.kind == PromptKind::Point) {
      points.push_back({Eigen::RowVector2d((p.x0 + 0.5) / size, (p.y0 + 0.5) / size), p.foreground ? 0 : 1});
    } else {
      check(p.x1);
      check(p.y1);
      points.push_back({Eigen::RowVector2d((p.x0 + 0.5) / size, (p.y0 + 0.5) / size), 2});
      points.push_back({Eigen::RowVector2d((p.x1 + 0.5) / size, (p.y1 + 0.5) / size), 3});
    }
  }
  Mat coords(static_cast<Index>(points.size()), 2);
  for (std::size_t i = 0; i < points.size(); ++i) coords.row(static_cast<Index>(i)) = points[i].first;
  Mat tokens = fourier_pe(model.param("prompt.pe_basis").data, coords);
  const Mat& types = model.param("prompt.type").data;
  for (std::size_t i = 0; i < points.size(); ++i) tokens.row(static_cast<Index>(i)) += types.row(points[i].second);
  return tape.constant(std::move(tokens));
}

DecoderState decoder_init(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens) {
  const int nd = model.config().neck_dim;
  if (embedding.cols() != nd || prompt_tokens.cols() != nd) {
    throw DimensionError("decoder inputs must have neck_dim columns");
  }
  if (embedding.rows() != model.config().num_tokens()) throw DimensionError("image embedding has wrong token count");
  DecoderState st;
  st.queries = concat_rows({constant_param(tape, model, "dec.mask_token"), prompt_tokens});
  st.query_pe = st.queries;
  st.keys = embedding;
  st.key_pe = tape.constant(dense_pe(model));
  return st;
}

void two_way_block(Tape& tape, const Model& model, const Hooks& hooks, int block, DecoderState& st) {
  if (block < 0 || block >= model.config().decoder_layers) throw RangeError("decoder block out of range");
  const std::string p = "dec." + std::to_string(block);
  Var q = st.queries;
  Var k = st.keys;
  {
    Var qq = add(q, st.query_pe);
    Var a = attention(tape, model, hooks, p + ".self", qq, qq, q);
    q = norm(tape, model, p + ".norm1", add(hook_act(tape, hooks, p + ".res_self.in", q), a));
  }
  {
    Var a = attention(tape, model, hooks, p + ".t2i", add(q, st.query_pe), add(k, st.key_pe), k);
    q = norm(tape, model, p + ".norm2", add(hook_act(tape, hooks, p + ".res_t2i.in", q), a));
  }
  {
    Var h = gelu(linear(tape, model, hooks, p + ".mlp.fc1", q));
    h = linear(tape, model, hooks, p + ".mlp.fc2", h);
    q = norm(tape, model, p + ".norm3", add(hook_act(tape, hooks, p + ".res_mlp.in", q), h));
  }
  {
    Var a = attention(tape, model, hooks, p + ".i2t", add(k, st.key_pe), add(q, st.query_pe), q);
    k = norm(tape, model, p + ".norm4", add(hook_act(tape, hooks, p + ".res_i2t.in", k), a));
  }
  st.queries = q;
  st.keys = k;
}

void final_attention(Tape& tape, const Model& model, const Hooks& hooks, DecoderState& st) {
  Var a = attention(tape, model, hooks, "dec.final", add(st.queries, st.query_pe), add(st.keys, st.key_pe), st.keys);
  st.queries = norm(tape, model, "dec.final_norm", add(hook_act(tape, hooks, "dec.final.res.in", st.queries), a));
}

Mat bilinear_upsample(const Mat& src, int out_h, int out_w) {
  const Index in_h = src.rows();
  const Index in_w = src.cols();
  Mat out(out_h, out_w);
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min<Index>(y0 + 1, in_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min<Index>(x0 + 1, in_w - 1);
      const double wx = fx - static_cast<double>(x0);
      out(y, x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

Mat mask_from_state(const Model& model, const DecoderState& st) {
  // Mask head stays in full precision (last layer).
  const ModelConfig& cfg = model.config();
  Mat token = st.queries.value().row(0);
  Mat hyper = linear_value(model, "head.hyper.fc2", gelu_value(linear_value(model, "head.hyper.fc1", token)));
  Mat up = linear_value(model, "head.up", st.keys.value());
  Eigen::VectorXd logits = up * hyper.row(0).transpose();
  const int g = cfg.grid();
  Mat low(g, g);
  for (int i = 0; i < g * g; ++i) low(i / g, i % g) = logits(i);
  return bilinear_upsample(low, cfg.image_size, cfg.image_size);
}

Var two_way_transformer(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens,
                        const Hooks& hooks) {
  DecoderState st = decoder_init(tape, model, embedding, prompt_tokens);
  for (int i = 0; i < model.config().decoder_layers; ++i) two_way_block(tape, model, hooks, i, st);
  return st.keys;
}

DecodeResult decode_masks(Tape& tape, const Model& model, const Var& embedding, const Var& prompt_tokens,
                          const Hooks& hooks) {
  DecodeResult res;
  res.state = decoder_init(tape, model, embedding, prompt_tokens);
  for (int i = 0; i < model.config().decoder_layers; ++i) two_way_block(tape, model, hooks, i, res.state);
  res.hybrid_tokens = res.state.keys;
  final_attention(tape, model, hooks, res.state);
  res.mask_logits = mask_from_state(model, res.state);
  return res;
}

}  // namespace saq
