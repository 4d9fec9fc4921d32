#include "saq/errors.hpp"
#include "saq/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace saq {

static_assert(std::endian::native == std::endian::little, "SAQW I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'A', 'Q', 'W'};
constexpr std::uint32_t kVersion = 1;
constexpr const char* kConfigTensor = "meta.config";

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) throw FormatError("SAQW: truncated file");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw FormatError("SAQW: truncated file");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  const std::string& data() const { return data_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

Mat encode_config(const ModelConfig& c) {
  std::vector<double> v = {double(c.image_size),     double(c.patch_size),    double(c.in_channels),
                           double(c.embed_dim),      double(c.num_heads),     double(c.encoder_layers),
                           double(c.window_size),    double(c.decoder_layers), double(c.neck_dim),
                           double(c.mlp_ratio),      c.qk_init_gain,          double(c.seed >> 32),
                           double(c.seed & 0xFFFFFFFFULL), double(c.global_layer_indices.size())};
  for (int g : c.global_layer_indices) v.push_back(double(g));
  Mat m(1, static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Index>(i)) = v[i];
  return m;
}

ModelConfig decode_config(const Mat& m) {
  if (m.size() < 14) throw FormatError("SAQW: malformed model config record");
  auto at = [&](Index i) { return m.data()[i]; };
  ModelConfig c;
  c.image_size = int(at(0));
  c.patch_size = int(at(1));
  c.in_channels = int(at(2));
  c.embed_dim = int(at(3));
  c.num_heads = int(at(4));
  c.encoder_layers = int(at(5));
  c.window_size = int(at(6));
  c.decoder_layers = int(at(7));
  c.neck_dim = int(at(8));
  c.mlp_ratio = int(at(9));
  c.qk_init_gain = at(10);
  c.seed = (std::uint64_t(at(11)) << 32) | std::uint64_t(at(12));
  const auto n = static_cast<Index>(at(13));
  if (m.size() != 14 + n) throw FormatError("SAQW: malformed model config record");
  c.global_layer_indices.clear();
  for (Index i = 0; i < n; ++i) c.global_layer_indices.push_back(int(at(14 + i)));
  return c;
}

}  // namespace

void save_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::string header;
  header.append(kMagic, 4);
  put<std::uint32_t>(header, kVersion);
  put<std::uint32_t>(header, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("SAQW: tensor name too long");
    put<std::uint16_t>(header, static_cast<std::uint16_t>(t.name.size()));
    header.append(t.name);
    if (t.rank1) {
      put<std::uint8_t>(header, 1);
      put<std::uint64_t>(header, static_cast<std::uint64_t>(t.value.size()));
    } else {
      put<std::uint8_t>(header, 2);
      put<std::uint64_t>(header, static_cast<std::uint64_t>(t.value.rows()));
      put<std::uint64_t>(header, static_cast<std::uint64_t>(t.value.cols()));
    }
    put<std::uint64_t>(header, offset);
    offset += static_cast<std::uint64_t>(t.value.size()) * sizeof(double);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("SAQW: cannot open '" + path + "' for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const NamedTensor& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  if (!out) throw FormatError("SAQW: write failed for '" + path + "'");
}

std::vector<NamedTensor> load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("SAQW: cannot open '" + path + "'");
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));
  if (r.bytes(4) != std::string(kMagic, 4)) throw FormatError("SAQW: bad magic");
  if (r.get<std::uint32_t>() != kVersion) throw FormatError("SAQW: unsupported version");
  const auto count = r.get<std::uint32_t>();
  struct Header {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::uint64_t offset;
  };
  std::vector<Header> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    h.name = r.bytes(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) h.dims.push_back(r.get<std::uint64_t>());
    h.offset = r.get<std::uint64_t>();
    headers.push_back(std::move(h));
  }
  const std::size_t blob = r.pos();
  std::vector<NamedTensor> out;
  for (const Header& h : headers) {
    Index rows = 1;
    Index cols = 1;
    if (h.dims.size() == 1) {
      cols = static_cast<Index>(h.dims[0]);
    } else if (h.dims.size() == 2) {
      rows = static_cast<Index>(h.dims[0]);
      cols = static_cast<Index>(h.dims[1]);
    } else if (!h.dims.empty()) {
      throw FormatError("SAQW: tensor '" + h.name + "' has unsupported rank");
    }
    Mat m(rows, cols);
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(double);
    if (blob + h.offset + bytes > r.data().size()) throw FormatError("SAQW: tensor data out of bounds");
    std::memcpy(m.data(), r.data().data() + blob + h.offset, bytes);
    out.push_back({h.name, std::move(m), h.dims.size() == 1});
  }
  return out;
}

void save_weights(const Model& model, const std::string& path) {
  std::vector<NamedTensor> tensors;
  tensors.push_back({kConfigTensor, encode_config(model.config()), true});
  for (const auto& [name, t] : model.params()) tensors.push_back({name, t.data, false});
  save_tensor_file(path, tensors);
}

Model load_weights(const std::string& path) {
  std::vector<NamedTensor> tensors = load_tensor_file(path);
  auto cfg = std::find_if(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.name == kConfigTensor; });
  if (cfg == tensors.end()) throw FormatError("SAQW: missing model config record");
  ModelConfig mc = decode_config(cfg->value);
  try {
    mc.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("SAQW: invalid model config record: ") + e.what());
  }
  Model model(mc);
  for (NamedTensor& t : tensors) {
    if (t.name == kConfigTensor) continue;
    model.params()[t.name] = Tensor(std::move(t.value));
  }
  // Shape check against a freshly built model of the same config.
  const Model reference = build_model(model.config());
  for (const auto& [name, t] : reference.params()) {
    auto it = model.params().find(name);
    if (it == model.params().end()) throw FormatError("SAQW: missing tensor '" + name + "'");
    if (it->second.data.rows() != t.data.rows() || it->second.data.cols() != t.data.cols()) {
      throw FormatError("SAQW: tensor '" + name + "' has the wrong shape");
    }
  }
  if (model.params().size() != reference.params().size()) throw FormatError("SAQW: unexpected extra tensors");
  return model;
}

}  // namespace saq
