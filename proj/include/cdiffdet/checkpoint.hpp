#pragma once

// Binary checkpoint: "CDFD", u32 version, u32 length + canonical JSON config,
// then records of (u32 name length, name, u8 dtype, u32 rank, u32 dims...,
// little-endian f32 payload) until end of file.

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "cdiffdet/detector.hpp"
#include "cdiffdet/params.hpp"

namespace cdiffdet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;  // opaque to the format; train state lives under "train_state"
  ParamStore params;
  std::optional<OptimizerState> optimizer;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws ParseError on malformed input.
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace cdiffdet
