#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ewr::store {

// Well-known metadata keys.
inline constexpr const char* kRoleKey = "role";
inline constexpr const char* kBaseFingerprintKey = "base_fingerprint";
inline constexpr const char* kSourceFingerprintKey = "source_fingerprint";
inline constexpr const char* kModelFingerprintKey = "model_fingerprint";
inline constexpr const char* kAllowNonFiniteKey = "allow_nonfinite";

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

// Named collection of flat float32 tensors plus string metadata. Used for
// checkpoints, task vectors and Fisher maps alike. Immutable by convention
// once built; all operations below return fresh maps.
//
// On-disk container: 8-byte little-endian header length, a JSON index mapping
// tensor name -> {dtype:"F32", shape, data_offsets}, then one contiguous
// little-endian float buffer. "__metadata__" in the index carries the
// string->string metadata. Index keys and buffer layout follow
// lexicographically sorted tensor names, so serialisation is byte
// deterministic.
class TensorMap {
 public:
  using Entries = std::map<std::string, Tensor>;
  using Metadata = std::map<std::string, std::string>;

  TensorMap() = default;

  // Validates name (non-empty, unique), shape (positive dims, product equals
  // data length) and finiteness (unless the allow_nonfinite flag is set).
  void set(const std::string& name, Tensor tensor);

  bool contains(const std::string& name) const {
    return entries_.count(name) > 0;
  }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const Entries& entries() const { return entries_; }

  const Metadata& metadata() const { return metadata_; }
  Metadata& metadata() { return metadata_; }
  void set_metadata(const std::string& key, const std::string& value) {
    metadata_[key] = value;
  }
  std::string metadata_or(const std::string& key, const std::string& fallback) const {
    auto it = metadata_.find(key);
    return it == metadata_.end() ? fallback : it->second;
  }

  bool allow_nonfinite() const {
    auto it = metadata_.find(kAllowNonFiniteKey);
    return it != metadata_.end() && (it->second == "1" || it->second == "true");
  }

  // Re-checks every invariant (used before save).
  void validate() const;

  std::int64_t total_elements() const;

 private:
  Entries entries_;
  Metadata metadata_;
};

// Bitwise equality over names, shapes and raw float bits, plus metadata.
bool bitwise_equal(const TensorMap& a, const TensorMap& b);

struct ShapeMismatch {
  std::string name;
  std::vector<std::int64_t> shape_a;
  std::vector<std::int64_t> shape_b;
};

struct AlignmentReport {
  std::vector<std::string> shared_names;
  std::vector<std::string> only_in_a;
  std::vector<std::string> only_in_b;
  std::vector<ShapeMismatch> shape_mismatches;

  // a and b can be combined elementwise iff nothing is missing or mis-shaped.
  bool mergeable() const {
    return only_in_a.empty() && only_in_b.empty() && shape_mismatches.empty();
  }
};

AlignmentReport align(const TensorMap& a, const TensorMap& b);

// Throws ErrorKind::alignment with a descriptive message unless mergeable.
void require_mergeable(const TensorMap& a, const TensorMap& b,
                       const std::string& what);

// SHA-256 hex digest over (sorted names, shapes, raw data bytes); metadata is
// deliberately excluded so re-tagging a checkpoint keeps its identity.
std::string fingerprint(const TensorMap& map);

TensorMap load(const std::filesystem::path& path);

// Writes atomically (temp file + rename). Byte deterministic for a given map.
void save(const TensorMap& map, const std::filesystem::path& path);

}  // namespace ewr::store
