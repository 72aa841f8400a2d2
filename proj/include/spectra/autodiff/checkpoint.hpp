#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "spectra/autodiff/tensor.hpp"

namespace spectra::ad {

/// One named double array as stored in a checkpoint.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Container layout:
//   bytes 0..7   magic "SPCKPT01"
//   bytes 8..15  manifest length M, uint64 little-endian
//   next M bytes JSON manifest:
//                {"format":"spectra-checkpoint","version":1,
//                 "arrays":[{"name","shape","offset","nbytes"}...]}
//   payload      raw little-endian IEEE-754 doubles; offsets are relative to
//                the first payload byte.
std::string encode_checkpoint(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

}  // namespace spectra::ad
