#pragma once

// Embedding storage (JSONL and little-endian binary formats) and a
// deterministic feature-hashing text encoder.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dicl/corpus.hpp"
#include "dicl/error.hpp"
#include "dicl/seeding.hpp"

namespace dicl {

using Embedding = std::vector<double>;

// id -> fixed-dimension vector. Vectors are kept in one contiguous buffer in
// insertion order.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw ValidationError("embedding dimension must be positive");
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<ExampleId>& ids() const noexcept { return ids_; }

  void insert(ExampleId id, std::span<const double> v) {
    if (v.size() != dim_)
      throw ValidationError("embedding for id " + std::to_string(id) + " has dimension " +
                            std::to_string(v.size()) + ", store expects " + std::to_string(dim_));
    for (double x : v)
      if (!std::isfinite(x))
        throw ValidationError("embedding for id " + std::to_string(id) + " has a non-finite component");
    if (!index_.emplace(id, ids_.size()).second)
      throw ValidationError("duplicate embedding id " + std::to_string(id));
    ids_.push_back(id);
    data_.insert(data_.end(), v.begin(), v.end());
  }

  bool contains(ExampleId id) const { return index_.count(id) != 0; }

  std::span<const double> at(ExampleId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("no embedding for id " + std::to_string(id));
    return {data_.data() + it->second * dim_, dim_};
  }

  std::span<const double> row(std::size_t pos) const { return {data_.data() + pos * dim_, dim_}; }

  // Adds every entry of `other`; dimensions must agree.
  void merge(const EmbeddingStore& other) {
    if (other.dim_ != dim_)
      throw ValidationError("cannot mix embedding stores of dimension " + std::to_string(dim_) +
                            " and " + std::to_string(other.dim_));
    for (std::size_t i = 0; i < other.size(); ++i) insert(other.ids_[i], other.row(i));
  }

  // Entries for exactly the ids of `d`, in dataset order.
  EmbeddingStore subset(const Dataset& d) const {
    EmbeddingStore out(dim_);
    out.ids_.reserve(d.size());
    out.data_.reserve(d.size() * dim_);
    for (const auto& ex : d) out.insert(ex.id, at(ex.id));
    return out;
  }

  // Throws unless the store holds exactly the ids of `d`.
  void require_bound(const Dataset& d) const {
    if (d.size() != size())
      throw ValidationError("embedding store has " + std::to_string(size()) +
                            " entries but dataset has " + std::to_string(d.size()));
    for (const auto& ex : d)
      if (!contains(ex.id))
        throw ValidationError("dataset id " + std::to_string(ex.id) + " has no embedding");
  }

  bool operator==(const EmbeddingStore& o) const {
    return dim_ == o.dim_ && ids_ == o.ids_ && data_ == o.data_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<ExampleId> ids_;
  std::vector<double> data_;
  std::unordered_map<ExampleId, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// File formats
//
// JSONL: {"id": int, "vector": [float, ...]} per line.
// Binary (little-endian): "DEMB" magic, u32 dim, u64 count, then `count`
// records of (u64 id, dim x f32).
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kEmbeddingMagic = {'D', 'E', 'M', 'B'};

namespace detail {

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    throw ParseError("truncated binary file", 0);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline EmbeddingStore load_embeddings_binary(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (magic != kEmbeddingMagic) throw ParseError("bad embedding file magic", 0);
  const auto dim = read_le<std::uint32_t>(in);
  const auto count = read_le<std::uint64_t>(in);
  EmbeddingStore store(dim);
  std::vector<double> v(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id = read_le<std::uint64_t>(in);
    for (auto& x : v) x = static_cast<double>(read_le<float>(in));
    store.insert(id, v);
  }
  return store;
}

inline EmbeddingStore load_embeddings_jsonl(std::istream& in) {
  std::optional<EmbeddingStore> store;
  std::string line;
  std::size_t lineno = 0;
  std::vector<double> v;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ExampleId id = 0;
    try {
      auto rec = nlohmann::json::parse(line);
      if (rec.contains("schema_version") && !rec.contains("id")) continue;
      id = rec.at("id").get<ExampleId>();
      v.clear();
      // JSON has no NaN/Inf literals; serializers emit null for them.
      for (const auto& x : rec.at("vector")) {
        if (x.is_null()) throw ValidationError("embedding for id " + std::to_string(id) + " has a non-finite component");
        v.push_back(x.get<double>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad embedding record: ") + e.what(), lineno);
    }
    if (!store) store.emplace(v.size());
    store->insert(id, v);
  }
  return store ? std::move(*store) : EmbeddingStore{};
}

}  // namespace detail

// Detects the format from the leading bytes.
inline EmbeddingStore load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open embedding file " + path.string());
  std::array<char, 4> head{};
  in.read(head.data(), head.size());
  const bool binary = in.gcount() == 4 && head == kEmbeddingMagic;
  in.clear();
  in.seekg(0);
  return binary ? detail::load_embeddings_binary(in) : detail::load_embeddings_jsonl(in);
}

inline void save_embeddings_jsonl(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write embedding file " + path.string());
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto row = store.row(i);
    out << nlohmann::json{{"id", store.ids()[i]}, {"vector", std::vector<double>(row.begin(), row.end())}}.dump()
        << '\n';
  }
}

// Narrowing to f32 is lossy; use JSONL where bit-exact reload matters.
inline void save_embeddings_binary(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write embedding file " + path.string());
  out.write(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  detail::write_le<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    detail::write_le<std::uint64_t>(out, store.ids()[i]);
    for (double x : store.row(i)) detail::write_le<float>(out, static_cast<float>(x));
  }
}

// ---------------------------------------------------------------------------
// Hashing encoder
// ---------------------------------------------------------------------------

// Signed feature hashing of character bigrams and trigrams, L2-normalized.
// The text is framed with '\x02' / '\x03' so single characters still produce
// n-grams. Works on raw bytes; no Unicode normalization.
inline Embedding hash_encode(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw ValidationError("hash encoder dimension must be >= 2");
  if (text.empty()) throw ValidationError("cannot encode empty text (zero vector)");

  std::string framed;
  framed.reserve(text.size() + 2);
  framed.push_back('\x02');
  framed.append(text);
  framed.push_back('\x03');

  const std::uint64_t salt = detail::splitmix64(seed);
  Embedding v(dim, 0.0);
  for (std::size_t n = 2; n <= 3; ++n) {
    if (framed.size() < n) continue;
    for (std::size_t i = 0; i + n <= framed.size(); ++i) {
      const std::uint64_t h = detail::splitmix64(detail::fnv1a(std::string_view(framed).substr(i, n)) ^ salt);
      const double sign = (h >> 63) ? -1.0 : 1.0;
      v[h % dim] += sign;
    }
  }

  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw ValidationError("hashed n-gram counts cancel to a zero vector");
  for (double& x : v) x /= norm;
  return v;
}

struct HashEncoder {
  std::size_t dim = 768;
  std::uint64_t seed = 0;

  Embedding operator()(std::string_view text) const { return hash_encode(text, dim, seed); }
};

template <typename Encoder>
EmbeddingStore encode_dataset(const Dataset& d, const Encoder& encoder) {
  EmbeddingStore store(encoder.dim);
  for (const auto& ex : d) store.insert(ex.id, encoder(ex.text));
  return store;
}

}  // namespace dicl
