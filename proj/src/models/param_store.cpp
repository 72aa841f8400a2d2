#include "spectra/models/param_store.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

namespace spectra::models {

ad::Tensor ParamStore::add(std::string name, ad::Tensor tensor, bool decay) {
  if (contains(name)) throw std::logic_error("ParamStore: duplicate parameter '" + name + "'");
  tensor.set_requires_grad(true);
  entries_.push_back({std::move(name), tensor, decay});
  return tensor;
}

const ad::Tensor& ParamStore::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw std::out_of_range("ParamStore: no parameter named '" + std::string(name) + "'");
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<ad::NamedArray> ParamStore::export_arrays() const {
  std::vector<ad::NamedArray> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    const auto d = e.tensor.data();
    out.push_back({e.name, e.tensor.shape(), std::vector<double>(d.begin(), d.end())});
  }
  return out;
}

void ParamStore::import_arrays(const std::vector<ad::NamedArray>& arrays) {
  if (arrays.size() != entries_.size()) {
    throw ad::CheckpointError("checkpoint holds " + std::to_string(arrays.size()) +
                              " arrays, model expects " + std::to_string(entries_.size()));
  }
  for (const auto& a : arrays) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == a.name; });
    if (it == entries_.end()) throw ad::CheckpointError("checkpoint array '" + a.name + "' is not a model parameter");
    if (it->tensor.shape() != a.shape) {
      throw ad::CheckpointError("checkpoint array '" + a.name + "' has shape " + ad::shape_str(a.shape) +
                                ", expected " + ad::shape_str(it->tensor.shape()));
    }
  }
  for (const auto& a : arrays) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == a.name; });
    auto dst = it->tensor.mutable_data();
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  }
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t byte) {
    h ^= byte;
    h *= 1099511628211ULL;
  };
  for (const auto& e : entries_) {
    for (char c : e.name) mix(static_cast<unsigned char>(c));
    for (double v : e.tensor.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix((bits >> (8 * i)) & 0xffU);
    }
  }
  return h;
}

}  // namespace spectra::models
