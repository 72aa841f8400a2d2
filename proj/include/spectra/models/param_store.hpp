#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "spectra/autodiff/checkpoint.hpp"
#include "spectra/autodiff/tensor.hpp"

namespace spectra::models {

/// Ordered collection of named trainable leaves. Layer structs hold handles
/// into the same buffers, so imports overwrite values in place.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Tensor tensor;
    bool decay = true;  // subject to decoupled weight decay
  };

  ad::Tensor add(std::string name, ad::Tensor tensor, bool decay);

  const ad::Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad();

  std::vector<ad::NamedArray> export_arrays() const;
  /// Requires the exact set of names and shapes; throws CheckpointError otherwise.
  void import_arrays(const std::vector<ad::NamedArray>& arrays);

  /// FNV-1a over names and the raw bits of every value.
  std::uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
};

}  // namespace spectra::models
