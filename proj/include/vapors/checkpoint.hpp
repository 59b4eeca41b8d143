#pragma once

// Checkpoint container:
//
//   VAPORS-CHECKPOINT 1
//   config grid=64 num_primitives=2 ... init_seed=0
//   step <n>
//   param <name> <rows> <cols> f32 <byte offset>     (one per tensor, fixed order)
//   end
//   <little-endian float32 payload, column-major per tensor>
//
// Loaders reject unknown versions and any name, shape or offset mismatch.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "vapors/dynamics.hpp"

namespace vapors {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kCheckpointMagic = "VAPORS-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string config_line(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "config grid=" << c.grid << " num_primitives=" << c.num_primitives << " kernel1=" << c.kernel1
     << " kernel2=" << c.kernel2 << " enc_channels1=" << c.enc_channels1 << " enc_channels2=" << c.enc_channels2
     << " dec_channels2=" << c.dec_channels2 << " dec_channels1=" << c.dec_channels1 << " deter=" << c.deter
     << " stoch=" << c.stoch << " hidden=" << c.hidden << " min_logstd=" << c.min_logstd
     << " max_logstd=" << c.max_logstd << " overshooting=" << c.overshooting << " init_seed=" << c.init_seed;
  return os.str();
}

inline ModelConfig parse_config_line(const std::string& line) {
  std::istringstream is(line);
  std::string word;
  is >> word;
  if (word != "config") throw CheckpointError("checkpoint manifest: expected config line");
  std::map<std::string, std::string> kv;
  while (is >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint manifest: malformed config entry " + word);
    kv[word.substr(0, eq)] = word.substr(eq + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw CheckpointError(std::string("checkpoint manifest: missing config key ") + key);
    return it->second;
  };
  ModelConfig c;
  try {
    c.grid = std::stoi(get("grid"));
    c.num_primitives = std::stoi(get("num_primitives"));
    c.kernel1 = std::stoi(get("kernel1"));
    c.kernel2 = std::stoi(get("kernel2"));
    c.enc_channels1 = std::stoi(get("enc_channels1"));
    c.enc_channels2 = std::stoi(get("enc_channels2"));
    c.dec_channels2 = std::stoi(get("dec_channels2"));
    c.dec_channels1 = std::stoi(get("dec_channels1"));
    c.deter = std::stoi(get("deter"));
    c.stoch = std::stoi(get("stoch"));
    c.hidden = std::stoi(get("hidden"));
    c.min_logstd = std::stod(get("min_logstd"));
    c.max_logstd = std::stod(get("max_logstd"));
    c.overshooting = std::stoi(get("overshooting"));
    c.init_seed = std::stoull(get("init_seed"));
  } catch (const std::invalid_argument&) {
    throw CheckpointError("checkpoint manifest: non-numeric config value");
  } catch (const std::out_of_range&) {
    throw CheckpointError("checkpoint manifest: config value out of range");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint manifest: ") + e.what());
  }
  return c;
}

inline void put_f32_le(std::ostream& out, float f) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFFu);
  out.write(bytes, 4);
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

struct Checkpoint {
  ModelParams<float> params;
  std::int64_t step = 0;
};

inline void save_checkpoint(std::ostream& out, const ModelParams<float>& params, std::int64_t step) {
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << detail::config_line(params.config) << '\n';
  out << "step " << step << '\n';
  std::size_t offset = 0;
  for (int i = 0; i < kNumParams; ++i) {
    const auto& t = params.tensors[i];
    out << "param " << kParamNames[i] << ' ' << t.rows() << ' ' << t.cols() << " f32 " << offset << '\n';
    offset += static_cast<std::size_t>(t.size()) * 4;
  }
  out << "end\n";
  for (const auto& t : params.tensors)
    for (Eigen::Index j = 0; j < t.size(); ++j) detail::put_f32_le(out, t.data()[j]);
}

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params, std::int64_t step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  save_checkpoint(out, params, step);
  if (!out) throw CheckpointError("failed writing checkpoint: " + path);
}

/// `expected`, when given, must equal the stored model configuration.
inline Checkpoint load_checkpoint(std::istream& in, const ModelConfig* expected = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError("empty checkpoint");
  {
    std::istringstream is(line);
    std::string magic;
    int version = 0;
    is >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError("not a checkpoint file");
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  if (!std::getline(in, line)) throw CheckpointError("truncated checkpoint manifest");
  const ModelConfig cfg = detail::parse_config_line(line);
  if (expected && !(*expected == cfg)) throw CheckpointError("checkpoint model configuration does not match");

  Checkpoint ck{ModelParams<float>::zeros(cfg), 0};
  if (!std::getline(in, line) || line.rfind("step ", 0) != 0) throw CheckpointError("checkpoint manifest: missing step");
  ck.step = std::stoll(line.substr(5));

  std::size_t expected_offset = 0;
  for (int i = 0; i < kNumParams; ++i) {
    if (!std::getline(in, line)) throw CheckpointError("truncated checkpoint manifest");
    std::istringstream is(line);
    std::string tag, name, dtype;
    long long rows = -1, cols = -1;
    std::size_t offset = 0;
    is >> tag >> name >> rows >> cols >> dtype >> offset;
    if (tag != "param" || !is) throw CheckpointError("checkpoint manifest: malformed param line");
    if (name != kParamNames[i]) throw CheckpointError("checkpoint manifest: unexpected tensor " + name);
    const Shape want = param_shape(cfg, static_cast<ParamId>(i));
    if (rows != want.rows || cols != want.cols) throw CheckpointError("checkpoint manifest: shape mismatch for " + name);
    if (dtype != "f32") throw CheckpointError("checkpoint manifest: unsupported dtype " + dtype);
    if (offset != expected_offset) throw CheckpointError("checkpoint manifest: bad offset for " + name);
    expected_offset += static_cast<std::size_t>(rows * cols) * 4;
  }
  if (!std::getline(in, line) || line != "end") throw CheckpointError("checkpoint manifest: missing end marker");

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != expected_offset) throw CheckpointError("checkpoint payload size does not match manifest");
  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  for (auto& t : ck.params.tensors) {
    for (Eigen::Index j = 0; j < t.size(); ++j, bytes += 4) t.data()[j] = detail::get_f32_le(bytes);
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  return load_checkpoint(in, expected);
}

}  // namespace vapors
