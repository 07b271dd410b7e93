#include "knnlm/ann_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knnlm/kmeans.hpp"

namespace knnlm {

namespace {

using Candidate = std::pair<double, std::uint32_t>;

std::vector<NeighborHit> top_k(std::vector<Candidate>& candidates, std::size_t k, const Datastore& ds) {
  const std::size_t keep = std::min(k, candidates.size());
  auto by_distance_then_id = [](const Candidate& a, const Candidate& b) {
    return a.first < b.first || (a.first == b.first && a.second < b.second);
  };
  if (keep < candidates.size()) {
    std::nth_element(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                     by_distance_then_id);
    candidates.resize(keep);
  }
  std::sort(candidates.begin(), candidates.end(), by_distance_then_id);
  std::vector<NeighborHit> hits;
  hits.reserve(keep);
  for (const auto& [d, id] : candidates) hits.push_back({id, d, ds.value(id), ds.weight(id)});
  return hits;
}

void check_query(std::size_t expected, std::span<const float> query) {
  if (query.size() != expected) {
    throw InvalidInput("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                       std::to_string(expected));
  }
}

}  // namespace

std::vector<NeighborHit> flat_search(const Datastore& ds, std::span<const float> query, std::size_t k) {
  check_query(ds.dim(), query);
  if (k == 0) throw InvalidInput("k must be positive");
  std::vector<Candidate> candidates(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    candidates[i] = {squared_l2(ds.key(i), query), static_cast<std::uint32_t>(i)};
  }
  return top_k(candidates, k, ds);
}

// ---------------------------------------------------------------------------
// Product quantization

std::vector<std::uint8_t> PqCodebook::encode(std::span<const float> vec) const {
  check_query(dim, vec);
  const std::size_t ds = dsub();
  std::vector<std::uint8_t> code(m);
  for (std::size_t s = 0; s < m; ++s) {
    const auto sub = vec.subspan(s * ds, ds);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < ksub(); ++c) {
      const double d = squared_l2(codeword(s, c), sub);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    code[s] = static_cast<std::uint8_t>(best);
  }
  return code;
}

std::vector<float> PqCodebook::decode(std::span<const std::uint8_t> code) const {
  if (code.size() != m) throw InvalidInput("PQ code has wrong length");
  std::vector<float> out;
  out.reserve(dim);
  for (std::size_t s = 0; s < m; ++s) {
    const auto cw = codeword(s, code[s]);
    out.insert(out.end(), cw.begin(), cw.end());
  }
  return out;
}

std::vector<float> PqCodebook::distance_table(std::span<const float> query) const {
  check_query(dim, query);
  const std::size_t ds = dsub();
  std::vector<float> table(m * ksub());
  for (std::size_t s = 0; s < m; ++s) {
    const auto sub = query.subspan(s * ds, ds);
    for (std::size_t c = 0; c < ksub(); ++c) {
      table[s * ksub() + c] = static_cast<float>(squared_l2(codeword(s, c), sub));
    }
  }
  return table;
}

PqCodebook train_pq(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t m, int bits,
                    std::uint64_t seed, std::size_t sample_cap) {
  if (m == 0 || dim % m != 0) throw InvalidInput("PQ sub-space count must divide the dimension");
  if (bits != 4 && bits != 8) throw InvalidInput("PQ bits must be 4 or 8");
  if (n == 0) throw InvalidInput("PQ training needs at least one vector");

  PqCodebook pq;
  pq.dim = dim;
  pq.m = m;
  pq.bits = bits;
  const std::size_t ksub = pq.ksub();
  const std::size_t ds = pq.dsub();
  pq.codewords.assign(m * ksub * ds, 0.0f);

  const auto rows = sample_rows(n, std::max<std::size_t>(sample_cap, 1), seed);
  const std::size_t k_eff = std::min(ksub, rows.size());
  std::vector<float> sub(rows.size() * ds);
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(keys.begin() + rows[r] * dim + s * ds, ds, sub.begin() + r * ds);
    }
    const auto km = kmeans(sub, rows.size(), ds, k_eff, {25, seed + 1 + s});
    float* dst = pq.codewords.data() + s * ksub * ds;
    std::copy(km.centroids.begin(), km.centroids.end(), dst);
    // Unused codewords duplicate the last trained one; encode never selects them.
    for (std::size_t c = k_eff; c < ksub; ++c) std::copy_n(dst + (k_eff - 1) * ds, ds, dst + c * ds);
  }
  return pq;
}

double pq_distance(const PqCodebook& codebook, std::span<const std::uint8_t> code, std::span<const float> query) {
  check_query(codebook.dim, query);
  if (code.size() != codebook.m) throw InvalidInput("PQ code has wrong length");
  const std::size_t ds = codebook.dsub();
  double acc = 0.0;
  for (std::size_t s = 0; s < codebook.m; ++s) {
    acc += squared_l2(codebook.codeword(s, code[s]), query.subspan(s * ds, ds));
  }
  return acc;
}

// ---------------------------------------------------------------------------
// IVF

std::size_t default_nlist(std::size_t n) {
  const auto v = static_cast<std::size_t>(std::llround(4.0 * std::sqrt(static_cast<double>(n))));
  return std::clamp<std::size_t>(v, 1, std::max<std::size_t>(n, 1));
}

IvfIndex train_ivf(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t nlist,
                   std::uint64_t seed, int max_iters, std::size_t sample_cap) {
  if (nlist == 0) throw InvalidInput("nlist must be at least 1");
  if (nlist > n) throw InvalidInput("nlist (" + std::to_string(nlist) + ") exceeds record count (" +
                                    std::to_string(n) + ")");
  IvfIndex index;
  index.dim = dim;
  index.nlist = nlist;

  const std::size_t cap = sample_cap == 0 ? n : std::max(sample_cap, nlist);
  const auto rows = sample_rows(n, cap, seed);
  std::vector<float> sample;
  if (rows.size() < n) {
    sample.resize(rows.size() * dim);
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(keys.begin() + rows[r] * dim, dim, sample.begin() + r * dim);
  }
  const std::span<const float> train = rows.size() < n ? std::span<const float>(sample) : keys;
  const auto km = kmeans(train, rows.size(), dim, nlist, {max_iters, seed});
  index.centroids = km.centroids;

  std::vector<std::uint32_t> assignment;
  std::vector<double> distance;
  if (rows.size() == n) {
    assignment = km.assignment;
  } else {
    assign_nearest(keys, n, index.centroids, nlist, dim, assignment, distance);
  }
  index.list_offsets.assign(nlist + 1, 0);
  for (auto a : assignment) ++index.list_offsets[a + 1];
  for (std::size_t l = 0; l < nlist; ++l) index.list_offsets[l + 1] += index.list_offsets[l];
  index.list_ids.resize(n);
  std::vector<std::uint64_t> cursor(index.list_offsets.begin(), index.list_offsets.end() - 1);
  for (std::size_t i = 0; i < n; ++i) index.list_ids[cursor[assignment[i]]++] = static_cast<std::uint32_t>(i);
  return index;
}

IvfIndex build_ivf(const Datastore& ds, const IvfOptions& options) {
  const std::size_t nlist = options.nlist == 0 ? default_nlist(ds.size()) : options.nlist;
  IvfIndex index = train_ivf(ds.keys(), ds.size(), ds.dim(), nlist, options.seed, options.max_iters,
                             options.train_points_per_list * nlist);
  if (options.pq_m > 0) {
    index.pq = train_pq(ds.keys(), ds.size(), ds.dim(), options.pq_m, options.pq_bits, options.seed + 7919);
    index.codes.reserve(ds.size() * options.pq_m);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto code = index.pq->encode(ds.key(i));
      index.codes.insert(index.codes.end(), code.begin(), code.end());
    }
  }
  return index;
}

namespace {

// Shared IVF scan. `list_keys`, when given, holds the keys in inverted-list
// order so each probed list is read contiguously; distances are identical
// either way.
std::vector<NeighborHit> ivf_scan(const IvfIndex& index, const Datastore& ds, const float* list_keys,
                                  std::span<const float> query, std::size_t k, std::size_t nprobe) {
  std::vector<Candidate> coarse(index.nlist);
  for (std::size_t l = 0; l < index.nlist; ++l) {
    coarse[l] = {squared_l2({index.centroids.data() + l * index.dim, index.dim}, query), static_cast<std::uint32_t>(l)};
  }
  if (nprobe < index.nlist) {
    std::nth_element(coarse.begin(), coarse.begin() + static_cast<std::ptrdiff_t>(nprobe), coarse.end());
    coarse.resize(nprobe);
  }
  std::size_t total = 0;
  for (const auto& c : coarse) total += index.list(c.second).size();

  std::vector<Candidate> candidates;
  candidates.reserve(total);
  if (index.pq) {
    const auto table = index.pq->distance_table(query);
    const std::size_t m = index.pq->m;
    const std::size_t ksub = index.pq->ksub();
    for (const auto& [cd, l] : coarse) {
      for (std::uint32_t id : index.list(l)) {
        const std::uint8_t* code = index.codes.data() + static_cast<std::size_t>(id) * m;
        double d = 0.0;
        for (std::size_t s = 0; s < m; ++s) d += table[s * ksub + code[s]];
        candidates.emplace_back(d, id);
      }
    }
  } else if (list_keys) {
    const std::size_t dim = index.dim;
    for (const auto& [cd, l] : coarse) {
      const auto ids = index.list(l);
      const float* base = list_keys + index.list_offsets[l] * dim;
      for (std::size_t j = 0; j < ids.size(); ++j) {
        candidates.emplace_back(squared_l2({base + j * dim, dim}, query), ids[j]);
      }
    }
  } else {
    for (const auto& [cd, l] : coarse) {
      for (std::uint32_t id : index.list(l)) candidates.emplace_back(squared_l2(ds.key(id), query), id);
    }
  }
  return top_k(candidates, k, ds);
}

void check_ivf_query(const IvfIndex& index, const Datastore& ds, std::span<const float> query, std::size_t k,
                     std::size_t nprobe) {
  check_query(index.dim, query);
  if (ds.size() != index.size() || ds.dim() != index.dim) throw InvalidInput("index was not built for this datastore");
  if (k == 0) throw InvalidInput("k must be positive");
  if (nprobe == 0 || nprobe > index.nlist) throw InvalidInput("nprobe must be in [1, nlist]");
}

}  // namespace

std::vector<NeighborHit> ivf_search(const IvfIndex& index, const Datastore& ds, std::span<const float> query,
                                    std::size_t k, std::size_t nprobe) {
  check_ivf_query(index, ds, query, k, nprobe);
  return ivf_scan(index, ds, nullptr, query, k, nprobe);
}

// ---------------------------------------------------------------------------
// Serialization

std::vector<char> serialize_index(const IvfIndex& index) {
  io::Writer out;
  out.put_magic("KNNI");
  out.put<std::uint32_t>(1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(index.dim));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(index.nlist));
  out.put<std::uint32_t>(index.pq ? static_cast<std::uint32_t>(index.pq->m) : 0u);
  out.put<std::uint32_t>(index.pq ? static_cast<std::uint32_t>(index.pq->bits) : 0u);
  out.put<std::uint64_t>(index.size());
  out.put_span<float>(index.centroids);
  out.put_span<std::uint64_t>(index.list_offsets);
  out.put_span<std::uint32_t>(index.list_ids);
  if (index.pq) {
    out.put_span<float>(index.pq->codewords);
    out.put_span<std::uint8_t>(index.codes);
  }
  return out.bytes();
}

IvfIndex deserialize_index(std::span<const char> bytes) {
  io::Reader in(bytes);
  in.expect_magic("KNNI");
  if (in.get<std::uint32_t>() != 1) in.fail("unsupported index version");
  IvfIndex index;
  index.dim = in.get<std::uint32_t>();
  index.nlist = in.get<std::uint32_t>();
  const auto m = in.get<std::uint32_t>();
  const auto bits = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  if (index.dim == 0 || index.nlist == 0 || index.nlist > count) in.fail("inconsistent index header");
  index.centroids = in.get_vector<float>(index.nlist * index.dim);
  index.list_offsets = in.get_vector<std::uint64_t>(index.nlist + 1);
  if (index.list_offsets.front() != 0 || index.list_offsets.back() != count ||
      !std::is_sorted(index.list_offsets.begin(), index.list_offsets.end())) {
    in.fail("inverted list offsets are inconsistent");
  }
  index.list_ids = in.get_vector<std::uint32_t>(count);
  std::vector<bool> seen(count, false);
  for (auto id : index.list_ids) {
    if (id >= count || seen[id]) in.fail("record id missing or repeated across inverted lists");
    seen[id] = true;
  }
  if (m > 0) {
    if (index.dim % m != 0 || (bits != 4 && bits != 8)) in.fail("bad PQ parameters");
    PqCodebook pq;
    pq.dim = index.dim;
    pq.m = m;
    pq.bits = static_cast<int>(bits);
    pq.codewords = in.get_vector<float>(m * pq.ksub() * pq.dsub());
    index.codes = in.get_vector<std::uint8_t>(count * m);
    for (auto c : index.codes) {
      if (c >= pq.ksub()) in.fail("PQ code out of range");
    }
    index.pq = std::move(pq);
  }
  if (!in.at_end()) in.fail("trailing bytes after index");
  return index;
}

void save_index(const IvfIndex& index, const std::string& path) { io::write_file(path, serialize_index(index)); }

IvfIndex load_index(const std::string& path) { return deserialize_index(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Retrievers

std::vector<NeighborHit> Retriever::search(std::span<const float> query, std::size_t k) const {
  queries_.fetch_add(1, std::memory_order_relaxed);
  if (const auto& t = ds_.transform()) {
    if (query.size() != t->in_dim) check_query(t->in_dim, query);
    const auto reduced = t->apply(query);
    return search_transformed(reduced, k);
  }
  return search_transformed(query, k);
}

std::vector<NeighborHit> FlatRetriever::search_transformed(std::span<const float> query, std::size_t k) const {
  return flat_search(ds_, query, k);
}

IvfRetriever::IvfRetriever(const Datastore& ds, const IvfIndex& index, std::size_t nprobe)
    : Retriever(ds), index_(index), nprobe_(std::clamp<std::size_t>(nprobe, 1, index.nlist)) {
  if (index.size() != ds.size() || index.dim != ds.dim()) throw InvalidInput("index was not built for this datastore");
  if (!index.pq) {
    list_keys_.resize(ds.size() * ds.dim());
    for (std::size_t j = 0; j < index.list_ids.size(); ++j) {
      const auto key = ds.key(index.list_ids[j]);
      std::copy(key.begin(), key.end(), list_keys_.begin() + static_cast<std::ptrdiff_t>(j * ds.dim()));
    }
  }
}

std::vector<NeighborHit> IvfRetriever::search_transformed(std::span<const float> query, std::size_t k) const {
  check_ivf_query(index_, ds_, query, k, nprobe_);
  return ivf_scan(index_, ds_, list_keys_.empty() ? nullptr : list_keys_.data(), query, k, nprobe_);
}

}  // namespace knnlm
