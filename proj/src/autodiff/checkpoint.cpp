#include "spectra/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace spectra::ad {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

void put_double(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace

std::string encode_checkpoint(const std::vector<NamedArray>& arrays) {
  nlohmann::json manifest;
  manifest["format"] = "spectra-checkpoint";
  manifest["version"] = 1;
  manifest["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    if (a.values.size() != numel_of(a.shape)) {
      throw CheckpointError("checkpoint: array '" + a.name + "' has " +
                            std::to_string(a.values.size()) + " values for shape " +
                            shape_str(a.shape));
    }
    const std::uint64_t nbytes = a.values.size() * sizeof(double);
    manifest["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& a : arrays) {
    for (double d : a.values) put_double(out, d);
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: missing magic header");
  }
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw CheckpointError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "spectra-checkpoint") {
    throw CheckpointError("checkpoint: unknown format tag");
  }
  const std::size_t payload = 16 + header_len;
  std::vector<NamedArray> arrays;
  for (const auto& entry : manifest.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != numel_of(a.shape) * sizeof(double)) {
      throw CheckpointError("checkpoint: size mismatch for '" + a.name + "'");
    }
    if (payload + offset + nbytes > bytes.size()) {
      throw CheckpointError("checkpoint: payload of '" + a.name + "' is truncated");
    }
    a.values.resize(numel_of(a.shape));
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      a.values[i] = std::bit_cast<double>(get_u64(bytes, payload + offset + i * sizeof(double)));
    }
    arrays.push_back(std::move(a));
  }
  return arrays;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  const std::string bytes = encode_checkpoint(arrays);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace spectra::ad
