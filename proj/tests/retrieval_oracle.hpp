#pragma once

#include <random>
#include <vector>

#include "anet/evaluator.hpp"

namespace anet::test {

struct Instance {
  Eigen::MatrixXd q, g;
  std::vector<int> qid, qcam, gid, gcam;
};

inline RetrievalSet query_of(const Instance& in) { return {&in.q, in.qid, in.qcam}; }
inline RetrievalSet gallery_of(const Instance& in) { return {&in.g, in.gid, in.gcam}; }

// Definition-level oracle: rank position of gallery item j for query i is the
// number of kept items strictly closer, plus equally close items with a lower
// index, plus one.
struct OracleResult {
  std::vector<double> ap;
  std::vector<double> cmc;
  int excluded = 0;
};

inline OracleResult oracle(const Instance& in, bool filter) {
  const Index nq = in.q.rows(), ng = in.g.rows();
  OracleResult out;
  std::vector<int> first_hits;
  for (Index i = 0; i < nq; ++i) {
    std::vector<double> d(static_cast<std::size_t>(ng));
    std::vector<bool> kept(static_cast<std::size_t>(ng)), rel(static_cast<std::size_t>(ng));
    for (Index j = 0; j < ng; ++j) {
      double s = 0.0;
      for (Index c = 0; c < in.q.cols(); ++c) s += (in.q(i, c) - in.g(j, c)) * (in.q(i, c) - in.g(j, c));
      d[j] = s;
      rel[j] = in.gid[j] == in.qid[i];
      kept[j] = !(filter && rel[j] && in.gcam[j] == in.qcam[i]);
    }
    auto ahead = [&](Index a, Index b) { return d[a] < d[b] || (d[a] == d[b] && a < b); };
    double sum = 0.0;
    int hits = 0, best = -1;
    for (Index j = 0; j < ng; ++j) {
      if (!kept[j] || !rel[j]) continue;
      int pos = 1, rel_at = 1;
      for (Index k = 0; k < ng; ++k) {
        if (k == j || !kept[k] || !ahead(k, j)) continue;
        ++pos;
        if (rel[k]) ++rel_at;
      }
      sum += static_cast<double>(rel_at) / pos;
      ++hits;
      if (best < 0 || pos - 1 < best) best = pos - 1;
    }
    if (hits == 0) {
      ++out.excluded;
      continue;
    }
    out.ap.push_back(sum / hits);
    first_hits.push_back(best);
  }
  out.cmc.assign(static_cast<std::size_t>(ng), 0.0);
  for (std::size_t k = 0; k < out.cmc.size(); ++k) {
    int c = 0;
    for (int h : first_hits) c += h <= static_cast<int>(k);
    out.cmc[k] = first_hits.empty() ? 0.0 : static_cast<double>(c) / first_hits.size();
  }
  return out;
}

inline Instance random_instance(std::mt19937_64& rng, bool quantized) {
  std::uniform_int_distribution<int> nq_d(1, 20), ng_d(1, 50), dim_d(1, 6), id_d(0, 5), cam_d(0, 2), level(0, 2);
  std::normal_distribution<double> normal;
  Instance in;
  const int nq = nq_d(rng), ng = ng_d(rng), dim = dim_d(rng);
  auto value = [&] { return quantized ? 0.5 * level(rng) : normal(rng); };
  in.q.resize(nq, dim);
  in.g.resize(ng, dim);
  for (Index i = 0; i < in.q.size(); ++i) in.q.data()[i] = value();
  for (Index i = 0; i < in.g.size(); ++i) in.g.data()[i] = value();
  for (int i = 0; i < nq; ++i) {
    in.qid.push_back(id_d(rng));
    in.qcam.push_back(cam_d(rng));
  }
  for (int j = 0; j < ng; ++j) {
    in.gid.push_back(id_d(rng));
    in.gcam.push_back(cam_d(rng));
  }
  return in;
}

}  // namespace anet::test
