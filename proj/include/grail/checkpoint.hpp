#pragma once

// Versioned binary array blob shared by every checkpoint kind:
//
//   "GRAILCKP" | u32 version | u64 header_len | JSON header | f64 payload
//
// The JSON header carries free-form metadata under "meta" and the tensor
// table under "tensors" (name, rows, cols, in payload order). Payload values
// are little-endian IEEE-754 doubles, row-major.

#include "grail/autograd.hpp"
#include "grail/nn.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace grail {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> tensors;

  void put(const std::string& name, Mat value);
  void put(const std::string& prefix, const nn::ParamSet& params);
  const Mat& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  /// Loads every parameter of `params` from "<prefix><param name>".
  void restore(const std::string& prefix, nn::ParamSet& params) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

/// Checks meta["kind"] and throws ParseError naming the mismatch.
void expect_kind(const TensorArchive& archive, const std::string& kind,
                 const std::filesystem::path& path);

}  // namespace grail
