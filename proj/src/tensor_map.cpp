#include "ewr/tensor_map.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "ewr/error.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace ewr::store {

namespace {

using nlohmann::json;

bool all_finite(const std::vector<float>& data) {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string shape_to_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace

void TensorMap::set(const std::string& name, Tensor tensor) {
  if (name.empty()) fail(ErrorKind::invalid_config, "tensor name must be non-empty");
  if (entries_.count(name))
    fail(ErrorKind::duplicate_name, "duplicate tensor name: " + name);
  std::int64_t n = 1;
  for (auto d : tensor.shape) {
    if (d <= 0)
      fail(ErrorKind::invalid_config,
           "tensor " + name + " has non-positive dimension in " +
               shape_to_string(tensor.shape));
    n *= d;
  }
  if (n != static_cast<std::int64_t>(tensor.data.size()))
    fail(ErrorKind::invalid_config,
         "tensor " + name + ": shape " + shape_to_string(tensor.shape) +
             " implies " + std::to_string(n) + " elements but data has " +
             std::to_string(tensor.data.size()));
  if (!allow_nonfinite() && !all_finite(tensor.data))
    fail(ErrorKind::non_finite, "tensor " + name + " contains NaN or Inf");
  entries_.emplace(name, std::move(tensor));
}

const Tensor& TensorMap::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    fail(ErrorKind::alignment, "missing tensor: " + name);
  return it->second;
}

void TensorMap::validate() const {
  bool allow = allow_nonfinite();
  for (const auto& [name, t] : entries_) {
    if (name.empty()) fail(ErrorKind::invalid_config, "empty tensor name");
    if (t.numel() != static_cast<std::int64_t>(t.data.size()))
      fail(ErrorKind::invalid_config, "tensor " + name + ": shape/data size mismatch");
    if (!allow && !all_finite(t.data))
      fail(ErrorKind::non_finite, "tensor " + name + " contains NaN or Inf");
  }
}

std::int64_t TensorMap::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

bool bitwise_equal(const TensorMap& a, const TensorMap& b) {
  if (a.metadata() != b.metadata()) return false;
  if (a.size() != b.size()) return false;
  auto ia = a.entries().begin();
  auto ib = b.entries().begin();
  for (; ia != a.entries().end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (ia->second.shape != ib->second.shape) return false;
    const auto& da = ia->second.data;
    const auto& db = ib->second.data;
    if (da.size() != db.size()) return false;
    if (!da.empty() &&
        std::memcmp(da.data(), db.data(), da.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

AlignmentReport align(const TensorMap& a, const TensorMap& b) {
  AlignmentReport report;
  for (const auto& [name, ta] : a.entries()) {
    auto it = b.entries().find(name);
    if (it == b.entries().end()) {
      report.only_in_a.push_back(name);
    } else {
      report.shared_names.push_back(name);
      if (ta.shape != it->second.shape)
        report.shape_mismatches.push_back({name, ta.shape, it->second.shape});
    }
  }
  for (const auto& [name, _] : b.entries()) {
    if (!a.contains(name)) report.only_in_b.push_back(name);
  }
  return report;
}

void require_mergeable(const TensorMap& a, const TensorMap& b,
                       const std::string& what) {
  AlignmentReport r = align(a, b);
  if (r.mergeable()) return;
  std::string msg = what + ": tensor maps are not mergeable";
  if (!r.only_in_a.empty()) msg += "; only in first: " + r.only_in_a.front();
  if (!r.only_in_b.empty()) msg += "; only in second: " + r.only_in_b.front();
  if (!r.shape_mismatches.empty()) {
    const auto& m = r.shape_mismatches.front();
    msg += "; shape mismatch on " + m.name + ": " + shape_to_string(m.shape_a) +
           " vs " + shape_to_string(m.shape_b);
  }
  fail(ErrorKind::alignment, msg);
}

std::string fingerprint(const TensorMap& map) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) fail(ErrorKind::io, "failed to allocate digest context");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  auto feed = [&](const void* data, std::size_t len) {
    EVP_DigestUpdate(ctx, data, len);
  };
  auto feed_u64 = [&](std::uint64_t v) { feed(&v, sizeof(v)); };
  for (const auto& [name, t] : map.entries()) {
    feed_u64(name.size());
    feed(name.data(), name.size());
    feed_u64(t.shape.size());
    for (std::int64_t d : t.shape) feed(&d, sizeof(d));
    feed_u64(t.data.size() * sizeof(float));
    if (!t.data.empty()) feed(t.data.data(), t.data.size() * sizeof(float));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

namespace {

// Parses the header JSON while rejecting duplicate keys at the root object
// (nlohmann's default parser silently keeps the last one).
json parse_index(const std::string& text, const std::filesystem::path& path) {
  std::set<std::string> seen;
  int object_depth = 0;
  json::parser_callback_t cb = [&](int /*depth*/, json::parse_event_t event,
                                   json& parsed) {
    if (event == json::parse_event_t::object_start) {
      ++object_depth;
    } else if (event == json::parse_event_t::object_end) {
      --object_depth;
    } else if (event == json::parse_event_t::key && object_depth == 1) {
      std::string key = parsed.get<std::string>();
      if (!seen.insert(key).second)
        fail(ErrorKind::duplicate_name,
             path.string() + ": duplicate tensor name: " + key);
    }
    return true;
  };
  json index = json::parse(text, cb, /*allow_exceptions=*/false);
  if (index.is_discarded() || !index.is_object())
    fail(ErrorKind::malformed_header, path.string() + ": header is not a JSON object");
  return index;
}

}  // namespace

TensorMap load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "read failure on " + path.string());

  if (bytes.size() < 8)
    fail(ErrorKind::malformed_header, path.string() + ": file shorter than header length field");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8)
    fail(ErrorKind::malformed_header,
         path.string() + ": header length " + std::to_string(header_len) +
             " exceeds file size");

  json index = parse_index(bytes.substr(8, header_len), path);

  const char* buffer = bytes.data() + 8 + header_len;
  std::uint64_t buffer_len = bytes.size() - 8 - header_len;

  TensorMap map;
  if (index.contains("__metadata__")) {
    const json& meta = index["__metadata__"];
    if (!meta.is_object())
      fail(ErrorKind::malformed_header, path.string() + ": __metadata__ is not an object");
    for (auto it = meta.begin(); it != meta.end(); ++it) {
      if (!it.value().is_string())
        fail(ErrorKind::malformed_header,
             path.string() + ": metadata value for " + it.key() + " is not a string");
      map.set_metadata(it.key(), it.value().get<std::string>());
    }
  }

  std::uint64_t max_end = 0;
  for (auto it = index.begin(); it != index.end(); ++it) {
    const std::string& name = it.key();
    if (name == "__metadata__") continue;
    const json& info = it.value();
    if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") ||
        !info.contains("data_offsets"))
      fail(ErrorKind::malformed_header,
           path.string() + ": malformed index entry for tensor " + name);
    if (info["dtype"].get<std::string>() != "F32")
      fail(ErrorKind::malformed_header,
           path.string() + ": tensor " + name + " has unsupported dtype " +
               info["dtype"].get<std::string>());
    Tensor t;
    for (const auto& d : info["shape"]) {
      if (!d.is_number_integer() || d.get<std::int64_t>() <= 0)
        fail(ErrorKind::malformed_header,
             path.string() + ": tensor " + name + " has invalid shape");
      t.shape.push_back(d.get<std::int64_t>());
    }
    const json& offs = info["data_offsets"];
    if (!offs.is_array() || offs.size() != 2)
      fail(ErrorKind::malformed_header,
           path.string() + ": tensor " + name + " has invalid data_offsets");
    std::uint64_t begin = offs[0].get<std::uint64_t>();
    std::uint64_t end = offs[1].get<std::uint64_t>();
    std::uint64_t expected_bytes =
        static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    if (end < begin || end - begin != expected_bytes)
      fail(ErrorKind::malformed_header,
           path.string() + ": tensor " + name + " byte range disagrees with shape " +
               shape_to_string(t.shape));
    if (end > buffer_len)
      fail(ErrorKind::truncated_buffer,
           path.string() + ": tensor " + name + " needs bytes up to " +
               std::to_string(end) + " but buffer holds " +
               std::to_string(buffer_len));
    max_end = std::max(max_end, end);
    t.data.resize(t.numel());
    if (!t.data.empty())
      std::memcpy(t.data.data(), buffer + begin, expected_bytes);
    if (!map.allow_nonfinite() && !all_finite(t.data))
      fail(ErrorKind::non_finite,
           path.string() + ": tensor " + name + " contains NaN or Inf");
    if (map.contains(name))
      fail(ErrorKind::duplicate_name, path.string() + ": duplicate tensor name: " + name);
    map.set(name, std::move(t));
  }
  if (buffer_len != max_end)
    fail(ErrorKind::malformed_header,
         path.string() + ": buffer has " + std::to_string(buffer_len - max_end) +
             " trailing bytes beyond the declared tensors");
  return map;
}

void save(const TensorMap& map, const std::filesystem::path& path) {
  map.validate();

  json index = json::object();
  json meta = json::object();
  for (const auto& [k, v] : map.metadata()) meta[k] = v;
  index["__metadata__"] = meta;

  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.entries()) {
    std::uint64_t bytes = t.data.size() * sizeof(float);
    index[name] = {{"dtype", "F32"},
                   {"shape", t.shape},
                   {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header = index.dump();
  std::uint64_t header_len = header.size();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(header.data(), header.size());
    for (const auto& [_, t] : map.entries()) {
      if (!t.data.empty())
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  t.data.size() * sizeof(float));
    }
    if (!out) fail(ErrorKind::io, "write failure on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(ErrorKind::io, "rename to " + path.string() + " failed: " + ec.message());
  }
}

}  // namespace ewr::store
