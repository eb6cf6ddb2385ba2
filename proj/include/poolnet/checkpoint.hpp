#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "poolnet/adam.hpp"
#include "poolnet/model.hpp"

// "PNCK" named-tensor archive:
//   magic "PNCK", u32 version, u32 entry count, then per entry
//   u32 name length, UTF-8 name, u8 rank, rank x u32 dims,
//   product(dims) little-endian f32 values.
// All integers are little-endian.
namespace poolnet::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_archive(const std::filesystem::path& path, const NamedTensors& entries);
std::vector<std::uint8_t> encode_archive(const NamedTensors& entries);

// Throws NotACheckpoint (bad magic), VersionError (newer format) or
// CorruptCheckpoint (truncated; the message names the entry being read).
NamedTensors read_archive(const std::filesystem::path& path);
NamedTensors decode_archive(std::span<const std::uint8_t> bytes,
                            const std::string& origin = "checkpoint");

struct OptimizerState {
  std::uint64_t step_count = 0;
  AdamHyperparameters hyper;
  std::vector<Tensor> first_moments;
  std::vector<Tensor> second_moments;

  static OptimizerState capture(const Adam& adam);
};

// Model-level wrappers: parameters plus a config echo and, optionally,
// optimizer moments stored as "adam.m.<name>" / "adam.v.<name>".
void save_encoder(const std::filesystem::path& path, const model::Encoder& params,
                  const std::optional<OptimizerState>& optimizer = std::nullopt);
void save_sequence_model(const std::filesystem::path& path,
                         const model::SequenceModel& params,
                         const std::optional<OptimizerState>& optimizer = std::nullopt);

struct LoadedEncoder {
  model::Encoder params;
  std::optional<OptimizerState> optimizer;
};

struct LoadedSequenceModel {
  model::SequenceModel params;
  std::optional<OptimizerState> optimizer;
};

// Throws the archive errors above, plus CorruptCheckpoint when an expected
// parameter is missing or has the wrong shape, and ConfigError when the
// config echo is invalid (e.g. latent width other than 64).
LoadedEncoder load_encoder(const std::filesystem::path& path);
LoadedSequenceModel load_sequence_model(const std::filesystem::path& path);

}  // namespace poolnet::checkpoint
