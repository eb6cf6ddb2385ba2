#include "poolnet/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "poolnet/error.hpp"

namespace poolnet::checkpoint {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'P', 'N', 'C', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string origin)
      : bytes_(bytes), origin_(std::move(origin)) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }

  std::uint32_t u32(const std::string& context) {
    need(4, context);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint8_t u8(const std::string& context) {
    need(1, context);
    return bytes_[pos_++];
  }

  std::string text(std::size_t n, const std::string& context) {
    need(n, context);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32(const std::string& context) { return std::bit_cast<float>(u32(context)); }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  [[noreturn]] void corrupt(const std::string& what) const {
    throw CorruptCheckpoint(origin_ + ": " + what);
  }

 private:
  void need(std::size_t n, const std::string& context) const {
    if (!has(n)) corrupt("truncated while reading " + context);
  }

  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotACheckpoint("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor float_vector(const std::vector<double>& values) {
  return Tensor({values.size()}, std::vector<float>(values.begin(), values.end()));
}

std::vector<std::size_t> integral_entries(const Tensor& t, const std::string& name) {
  std::vector<std::size_t> out;
  for (float f : t.data()) {
    if (!(f >= 0) || f != std::floor(f) || f > 16777216.0f) {
      throw CorruptCheckpoint(name + " holds a non-integral value");
    }
    out.push_back(static_cast<std::size_t>(f));
  }
  return out;
}

void append_optimizer(NamedTensors& entries, const NamedTensors& params,
                      const OptimizerState& opt) {
  if (opt.first_moments.size() != params.size() || opt.second_moments.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  std::vector<double> step(4);
  for (int i = 0; i < 4; ++i) step[i] = double((opt.step_count >> (16 * i)) & 0xffff);
  entries.emplace_back("adam.step", float_vector(step));
  entries.emplace_back("adam.hparams",
                       float_vector({opt.hyper.learning_rate, opt.hyper.beta1,
                                     opt.hyper.beta2, opt.hyper.epsilon}));
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.emplace_back("adam.m." + params[i].first, opt.first_moments[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.emplace_back("adam.v." + params[i].first, opt.second_moments[i]);
  }
}

using EntryMap = std::map<std::string, Tensor>;

EntryMap index_entries(const NamedTensors& entries, const std::string& origin) {
  EntryMap map;
  for (const auto& [name, t] : entries) {
    if (!map.emplace(name, t).second) {
      throw CorruptCheckpoint(origin + ": duplicate entry '" + name + "'");
    }
  }
  return map;
}

const Tensor& require(const EntryMap& map, const std::string& name, const std::string& origin) {
  auto it = map.find(name);
  if (it == map.end()) throw CorruptCheckpoint(origin + ": missing entry '" + name + "'");
  return it->second;
}

// Copies stored values into the freshly shaped parameters.
void fill_parameters(const NamedTensors& targets, const EntryMap& map,
                     const std::string& prefix, const std::string& origin) {
  std::size_t expected = 0;
  for (const auto& [name, target] : targets) {
    const auto& stored = require(map, name, origin);
    if (stored.shape() != target.shape()) {
      throw CorruptCheckpoint(origin + ": entry '" + name + "' has shape " +
                              shape_to_string(stored.shape()) + ", expected " +
                              shape_to_string(target.shape()));
    }
    Tensor handle = target;  // shares storage with the parameter
    auto dst = handle.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
    ++expected;
  }
  std::size_t present = 0;
  for (const auto& [name, t] : map) {
    if (name.rfind(prefix, 0) == 0) ++present;
  }
  if (present != expected) {
    throw CorruptCheckpoint(origin + ": " + std::to_string(present) + " '" + prefix +
                            "' entries, expected " + std::to_string(expected));
  }
}

std::optional<OptimizerState> read_optimizer(const NamedTensors& params, const EntryMap& map,
                                             const std::string& origin) {
  auto it = map.find("adam.step");
  if (it == map.end()) return std::nullopt;
  OptimizerState opt;
  const auto limbs = integral_entries(it->second, "adam.step");
  if (limbs.size() != 4) throw CorruptCheckpoint(origin + ": adam.step must hold 4 values");
  for (int i = 0; i < 4; ++i) opt.step_count |= std::uint64_t(limbs[i]) << (16 * i);
  const auto& hp = require(map, "adam.hparams", origin);
  if (hp.numel() != 4) throw CorruptCheckpoint(origin + ": adam.hparams must hold 4 values");
  opt.hyper = {hp.data()[0], hp.data()[1], hp.data()[2], hp.data()[3]};
  for (const auto& [name, p] : params) {
    for (auto [tag, dst] : {std::pair{"adam.m.", &opt.first_moments},
                            std::pair{"adam.v.", &opt.second_moments}}) {
      const auto& t = require(map, tag + name, origin);
      if (t.shape() != p.shape()) {
        throw CorruptCheckpoint(origin + ": entry '" + tag + name + "' has the wrong shape");
      }
      dst->push_back(t.clone());
    }
  }
  return opt;
}

}  // namespace

std::vector<std::uint8_t> encode_archive(const NamedTensors& entries) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (t.rank() > 255) throw ContractError("tensor rank too large for checkpoint");
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data()) put_f32(out, f);
  }
  return out;
}

void write_archive(const fs::path& path, const NamedTensors& entries) {
  const auto bytes = encode_archive(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

NamedTensors decode_archive(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw NotACheckpoint(origin + ": bad magic (not a PNCK checkpoint)");
  }
  Reader r(bytes.subspan(4), origin);
  const auto version = r.u32("format version");
  if (version > kFormatVersion) {
    throw VersionError(origin + ": format version " + std::to_string(version) +
                       " is newer than supported version " + std::to_string(kFormatVersion));
  }
  if (version == 0) throw CorruptCheckpoint(origin + ": format version 0");
  const auto count = r.u32("entry count");
  NamedTensors entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto where = "entry #" + std::to_string(e);
    const auto name_len = r.u32(where + " name length");
    if (!r.has(name_len)) r.corrupt("truncated while reading " + where + " name");
    const auto name = r.text(name_len, where + " name");
    const auto context = "entry '" + name + "'";
    const auto rank = r.u8(context + " rank");
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) {
      const auto d = r.u32(context + " dims");
      if (d == 0) r.corrupt(context + " has a zero dimension");
      shape.push_back(d);
    }
    if (rank == 0) r.corrupt(context + " has rank 0");
    const auto n = shape_numel(shape);
    if (n > r.remaining() / 4) r.corrupt("truncated payload in " + context);
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32(context + " payload");
    Tensor t(std::move(shape), std::move(values));
    entries.emplace_back(name, std::move(t));
  }
  if (r.remaining() != 0) r.corrupt(std::to_string(r.remaining()) + " trailing bytes");
  return entries;
}

NamedTensors read_archive(const fs::path& path) {
  const auto bytes = slurp(path);
  return decode_archive(bytes, path.string());
}

OptimizerState OptimizerState::capture(const Adam& adam) {
  OptimizerState s;
  s.step_count = adam.step_count();
  s.hyper = adam.hyperparameters();
  for (const auto& m : adam.first_moments()) s.first_moments.push_back(m.clone());
  for (const auto& v : adam.second_moments()) s.second_moments.push_back(v.clone());
  return s;
}

void save_encoder(const fs::path& path, const model::Encoder& params,
                  const std::optional<OptimizerState>& optimizer) {
  std::vector<double> cfg{double(params.config.input_side), double(params.config.latent_dim)};
  for (auto c : params.config.channels) cfg.push_back(double(c));
  NamedTensors entries{{"config.encoder", float_vector(cfg)}};
  const auto named = params.named();
  entries.insert(entries.end(), named.begin(), named.end());
  if (optimizer) append_optimizer(entries, named, *optimizer);
  write_archive(path, entries);
}

void save_sequence_model(const fs::path& path, const model::SequenceModel& params,
                         const std::optional<OptimizerState>& optimizer) {
  const auto& c = params.config;
  NamedTensors entries{{"config.sequence",
                        float_vector({double(c.sequence_length), double(c.width),
                                      double(c.heads), double(c.blocks),
                                      double(c.ffn_multiplier)})}};
  const auto named = params.named();
  entries.insert(entries.end(), named.begin(), named.end());
  if (optimizer) append_optimizer(entries, named, *optimizer);
  write_archive(path, entries);
}

LoadedEncoder load_encoder(const fs::path& path) {
  const auto origin = path.string();
  const auto map = index_entries(read_archive(path), origin);
  const auto cfg = integral_entries(require(map, "config.encoder", origin), "config.encoder");
  if (cfg.size() < 3) throw CorruptCheckpoint(origin + ": config.encoder too short");
  model::EncoderConfig config;
  config.input_side = cfg[0];
  config.latent_dim = cfg[1];
  config.channels.assign(cfg.begin() + 2, cfg.end());
  LoadedEncoder out{model::Encoder::zeros(config), std::nullopt};
  const auto named = out.params.named();
  fill_parameters(named, map, "encoder.", origin);
  out.optimizer = read_optimizer(named, map, origin);
  return out;
}

LoadedSequenceModel load_sequence_model(const fs::path& path) {
  const auto origin = path.string();
  const auto map = index_entries(read_archive(path), origin);
  const auto cfg = integral_entries(require(map, "config.sequence", origin), "config.sequence");
  if (cfg.size() != 5) throw CorruptCheckpoint(origin + ": config.sequence must hold 5 values");
  model::SequenceModelConfig config;
  config.sequence_length = cfg[0];
  config.width = cfg[1];
  config.heads = cfg[2];
  config.blocks = cfg[3];
  config.ffn_multiplier = cfg[4];
  LoadedSequenceModel out{model::SequenceModel::zeros(config), std::nullopt};
  const auto named = out.params.named();
  fill_parameters(named, map, "sequence.", origin);
  out.optimizer = read_optimizer(named, map, origin);
  return out;
}

}  // namespace poolnet::checkpoint
