#include "knnlm/datastore.hpp"

#include <cmath>

namespace knnlm {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagWeights = 1u << 0;
constexpr std::uint32_t kFlagHalfKeys = 1u << 1;

}  // namespace

Datastore::Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
                     std::vector<float> weights, std::string provenance,
                     std::optional<PcaTransform> transform)
    : dim_(dim),
      keys_(std::move(keys)),
      values_(std::move(values)),
      weights_(std::move(weights)),
      provenance_(std::move(provenance)),
      transform_(std::move(transform)) {
  if (dim_ == 0) throw InvalidInput("datastore dimension must be positive");
  if (values_.empty()) throw InvalidInput("datastore must contain at least one record");
  if (keys_.size() != values_.size() * dim_) throw InvalidInput("key matrix does not match record count");
  if (weights_.size() != values_.size()) throw InvalidInput("weight vector does not match record count");
  for (float k : keys_) {
    if (!std::isfinite(k)) throw InvalidInput("datastore keys must be finite");
  }
  for (float w : weights_) {
    if (!(w >= 0.0f) || !std::isfinite(w)) throw InvalidInput("datastore weights must be finite and >= 0");
  }
  if (transform_ && transform_->out_dim != dim_) {
    throw InvalidInput("datastore transform output dimension does not match key dimension");
  }
}

Datastore Datastore::subset(std::span<const std::size_t> ids, const std::string& note) const {
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<float> weights;
  keys.reserve(ids.size() * dim_);
  values.reserve(ids.size());
  weights.reserve(ids.size());
  for (std::size_t id : ids) {
    if (id >= size()) throw InvalidInput("record id out of range");
    const auto k = key(id);
    keys.insert(keys.end(), k.begin(), k.end());
    values.push_back(values_[id]);
    weights.push_back(weights_[id]);
  }
  return Datastore(dim_, std::move(keys), std::move(values), std::move(weights),
                   provenance_ + "\n" + note, transform_);
}

bool Datastore::operator==(const Datastore& other) const {
  auto same_transform = [](const std::optional<PcaTransform>& a, const std::optional<PcaTransform>& b) {
    if (a.has_value() != b.has_value()) return false;
    if (!a) return true;
    return a->in_dim == b->in_dim && a->out_dim == b->out_dim && a->mean == b->mean &&
           a->components == b->components && a->rotation == b->rotation && a->explained == b->explained;
  };
  return dim_ == other.dim_ && keys_ == other.keys_ && values_ == other.values_ &&
         weights_ == other.weights_ && provenance_ == other.provenance_ &&
         same_transform(transform_, other.transform_);
}

Datastore build_datastore(const Corpus& corpus, const ContextEncoder& encoder, const std::string& corpus_id) {
  const std::size_t total = token_count(corpus);
  if (total == 0) throw InvalidInput("cannot build a datastore from an empty corpus");
  check_corpus(corpus, encoder.vocab_size());

  const std::size_t dim = encoder.dim();
  std::vector<float> keys(total * dim);
  std::vector<TokenId> values;
  values.reserve(total);
  std::size_t row = 0;
  for (const auto& doc : corpus) {
    for (std::size_t t = 0; t < doc.size(); ++t, ++row) {
      encoder.encode_into(std::span<const TokenId>(doc.data(), t), std::span<float>(keys.data() + row * dim, dim));
      values.push_back(doc[t]);
    }
  }
  std::string provenance = "built from " + corpus_id + " (" + std::to_string(total) +
                           " tokens); encoder dim=" + std::to_string(dim) +
                           " decay=" + std::to_string(encoder.decay()) +
                           " window=" + std::to_string(encoder.window()) +
                           " seed=" + std::to_string(encoder.seed());
  return Datastore(dim, std::move(keys), std::move(values), std::vector<float>(total, 1.0f), std::move(provenance));
}

DatastoreStats datastore_stats(const Datastore& ds) {
  DatastoreStats s;
  s.count = ds.size();
  s.dim = ds.dim();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    s.total_weight += ds.weight(i);
    ++s.value_histogram[ds.value(i)];
  }
  s.bytes = ds.keys().size() * sizeof(float) + ds.size() * (sizeof(TokenId) + sizeof(float));
  return s;
}

std::vector<char> serialize_datastore(const Datastore& ds, bool half_precision_keys) {
  bool weighted = false;
  for (float w : ds.weights()) weighted = weighted || w != 1.0f;

  io::Writer out;
  out.put_magic("KNND");
  out.put<std::uint32_t>(kVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(ds.dim()));
  out.put<std::uint64_t>(ds.size());
  out.put<std::uint32_t>((weighted ? kFlagWeights : 0u) | (half_precision_keys ? kFlagHalfKeys : 0u));
  if (half_precision_keys) {
    std::vector<std::uint16_t> half(ds.keys().size());
    for (std::size_t i = 0; i < half.size(); ++i) half[i] = io::float_to_half(ds.keys()[i]);
    out.put_span<std::uint16_t>(half);
  } else {
    out.put_span<float>(ds.keys());
  }
  out.put_span<TokenId>(ds.values());
  if (weighted) out.put_span<float>(ds.weights());
  out.put_string(ds.provenance());
  if (ds.transform()) ds.transform()->serialize(out);
  return out.bytes();
}

Datastore deserialize_datastore(std::span<const char> bytes) {
  io::Reader in(bytes);
  in.expect_magic("KNND");
  if (const auto version = in.get<std::uint32_t>(); version != kVersion) {
    in.fail("unsupported datastore version " + std::to_string(version));
  }
  const auto dim = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  const auto flags = in.get<std::uint32_t>();
  if (flags & ~(kFlagWeights | kFlagHalfKeys)) in.fail("unknown datastore flags");
  if (dim == 0 || count == 0) in.fail("empty datastore header");

  std::vector<float> keys;
  if (flags & kFlagHalfKeys) {
    const auto half = in.get_vector<std::uint16_t>(count * dim);
    keys.resize(half.size());
    for (std::size_t i = 0; i < half.size(); ++i) keys[i] = io::half_to_float(half[i]);
  } else {
    keys = in.get_vector<float>(count * dim);
  }
  auto values = in.get_vector<TokenId>(count);
  std::vector<float> weights = (flags & kFlagWeights) ? in.get_vector<float>(count) : std::vector<float>(count, 1.0f);
  std::string provenance = in.get_string();
  std::optional<PcaTransform> transform;
  if (!in.at_end()) transform = PcaTransform::deserialize(in);
  if (!in.at_end()) in.fail("trailing bytes after datastore");
  try {
    return Datastore(dim, std::move(keys), std::move(values), std::move(weights), std::move(provenance),
                     std::move(transform));
  } catch (const InvalidInput& e) {
    throw FormatError(e.what(), in.offset());
  }
}

void save_datastore(const Datastore& ds, const std::string& path, bool half_precision_keys) {
  io::write_file(path, serialize_datastore(ds, half_precision_keys));
}

Datastore load_datastore(const std::string& path) { return deserialize_datastore(io::read_file(path)); }

}  // namespace knnlm
