#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "rlab/codec.hpp"
#include "rlab/domain.hpp"

namespace rlab {

inline constexpr std::string_view kVersion = "1.0.0";

// Reproducibility stamp written into every CLI output: the sha256 of the
// canonical (sorted-key) configuration, the seed and the software version.
inline json make_stamp(const json& config, std::uint64_t seed) {
  return json{{"config_sha256", codec::sha256_hex(config.dump())},
              {"seed", seed},
              {"version", std::string(kVersion)},
              {"session_format_version", kSessionFormatVersion}};
}

}  // namespace rlab
