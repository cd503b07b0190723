#include "anet/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "anet/parallel.hpp"
#include "json.hpp"

namespace anet {

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["map"] = map;
  j["r1"] = r1;
  j["r5"] = r5;
  j["cmc"] = cmc;
  j["per_query_ap"] = per_query_ap;
  j["protocol"] = protocol;
  j["repeats"] = repeats;
  j["seed"] = seed;
  j["excluded_queries"] = excluded_queries;
  if (map_std) j["map_std"] = *map_std;
  if (r1_std) j["r1_std"] = *r1_std;
  if (r5_std) j["r5_std"] = *r5_std;
  if (!warnings.empty()) j["warnings"] = warnings;
  return j.dump(2);
}

Eigen::MatrixXd extract_features(const Dataset& dataset, Model<float>& model, Selector selector, int batch_size) {
  if (!selector_supported(model.config().variant, selector)) {
    throw std::invalid_argument(std::string("selector ") + selector_name(selector) + " is not available for variant " +
                                variant_name(model.config().variant));
  }
  if (batch_size < 1) throw std::invalid_argument("eval: batch size must be >= 1");
  const Index n = static_cast<Index>(dataset.samples.size());
  const int batches = static_cast<int>((n + batch_size - 1) / batch_size);
  std::vector<Eigen::MatrixXd> parts(static_cast<std::size_t>(batches));

  ForwardOptions opts;
  opts.train = false;
  opts.update_stats = false;
  parallel_for(batches, [&](int b) {
    const Index begin = static_cast<Index>(b) * batch_size;
    const Index end = std::min(n, begin + batch_size);
    std::vector<const Image*> images;
    for (Index i = begin; i < end; ++i) images.push_back(&dataset.samples[static_cast<std::size_t>(i)].image);
    Graph<float> g;
    const Features<float> features = model.forward(g, stack_images(images), opts);
    parts[static_cast<std::size_t>(b)] = model.select(features, selector).value().matrix().cast<double>();
  });

  Eigen::MatrixXd out;
  for (int b = 0; b < batches; ++b) {
    const auto& p = parts[static_cast<std::size_t>(b)];
    if (b == 0) out.resize(n, p.cols());
    out.middleRows(static_cast<Index>(b) * batch_size, p.rows()) = p;
  }
  for (Index i = 0; i < n; ++i) {
    const double norm = out.row(i).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      const auto& s = dataset.samples[static_cast<std::size_t>(i)];
      throw std::runtime_error("eval: feature of sample " + std::to_string(i) + " (" +
                               (s.path.empty() ? "id " + std::to_string(s.identity) : s.path) +
                               ") has zero or non-finite norm");
    }
    out.row(i) /= norm;
  }
  return out;
}

RetrievalSet retrieval_set(const Dataset& dataset, const Eigen::MatrixXd& features) {
  if (features.rows() != static_cast<Index>(dataset.samples.size())) {
    throw std::invalid_argument("eval: feature rows do not match sample count");
  }
  RetrievalSet r;
  r.features = &features;
  for (const auto& s : dataset.samples) {
    r.ids.push_back(s.identity);
    r.cameras.push_back(s.camera);
  }
  return r;
}

EvalReport rank_and_score(const RetrievalSet& query, const RetrievalSet& gallery, bool cross_camera_filter) {
  const Eigen::MatrixXd& q = *query.features;
  const Eigen::MatrixXd& gal = *gallery.features;
  if (q.cols() != gal.cols()) throw std::invalid_argument("eval: query and gallery feature widths differ");
  const Index nq = q.rows(), ng = gal.rows();
  if (ng == 0) throw std::invalid_argument("eval: empty gallery");

  Eigen::MatrixXd dist(nq, ng);
  for (Index i = 0; i < nq; ++i)
    for (Index j = 0; j < ng; ++j) dist(i, j) = (q.row(i) - gal.row(j)).squaredNorm();

  EvalReport report;
  std::vector<double> hits_at(static_cast<std::size_t>(ng), 0.0);
  std::vector<int> order(static_cast<std::size_t>(ng));
  for (Index i = 0; i < nq; ++i) {
    const int qid = query.ids[static_cast<std::size_t>(i)];
    const int qcam = query.cameras[static_cast<std::size_t>(i)];
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return dist(i, a) < dist(i, b); });
    int rank = 0, hits = 0, first_hit = -1;
    double precision_sum = 0.0;
    for (int gi : order) {
      const bool same_id = gallery.ids[static_cast<std::size_t>(gi)] == qid;
      if (cross_camera_filter && same_id && gallery.cameras[static_cast<std::size_t>(gi)] == qcam) continue;
      ++rank;
      if (same_id) {
        ++hits;
        precision_sum += static_cast<double>(hits) / rank;
        if (first_hit < 0) first_hit = rank - 1;
      }
    }
    if (hits == 0) {
      ++report.excluded_queries;
      continue;
    }
    report.per_query_ap.push_back(precision_sum / hits);
    for (Index k = first_hit; k < ng; ++k) hits_at[static_cast<std::size_t>(k)] += 1.0;
  }
  const std::size_t valid = report.per_query_ap.size();
  if (valid == 0) throw std::runtime_error("eval: no query has a relevant gallery entry");
  report.map = std::accumulate(report.per_query_ap.begin(), report.per_query_ap.end(), 0.0) / valid;
  report.cmc.resize(static_cast<std::size_t>(ng));
  for (std::size_t k = 0; k < hits_at.size(); ++k) report.cmc[k] = hits_at[k] / valid;
  report.r1 = report.cmc[0];
  report.r5 = report.cmc[std::min<std::size_t>(4, report.cmc.size() - 1)];
  return report;
}

EvalReport evaluate_fixed(const Dataset& query, const Dataset& gallery, Model<float>& model, Selector selector) {
  const Eigen::MatrixXd qf = extract_features(query, model, selector);
  const Eigen::MatrixXd gf = extract_features(gallery, model, selector);
  EvalReport r = rank_and_score(retrieval_set(query, qf), retrieval_set(gallery, gf), true);
  r.protocol = "fixed";
  return r;
}

namespace {

std::pair<double, double> mean_and_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

EvalReport vehicleid_protocol(const Dataset& test_set, const Eigen::MatrixXd& features, int repeats,
                              std::uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("eval: repeats must be >= 1");
  const RetrievalSet all = retrieval_set(test_set, features);
  const auto groups = test_set.by_identity();

  std::vector<std::string> warnings;
  for (const auto& [id, members] : groups) {
    if (members.size() == 1) {
      warnings.push_back("identity " + std::to_string(id) + " has one image; used as gallery only");
    }
  }

  Rng rng(seed);
  std::vector<EvalReport> runs;
  for (int r = 0; r < repeats; ++r) {
    std::vector<Index> q_rows, g_rows;
    for (const auto& [id, members] : groups) {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      const std::size_t chosen = pick(rng);
      for (std::size_t m = 0; m < members.size(); ++m) {
        (m == chosen ? g_rows : q_rows).push_back(static_cast<Index>(members[m]));
      }
    }
    if (q_rows.empty()) throw std::runtime_error("eval: every identity has a single image; no queries");
    Eigen::MatrixXd qf(static_cast<Index>(q_rows.size()), features.cols());
    Eigen::MatrixXd gf(static_cast<Index>(g_rows.size()), features.cols());
    RetrievalSet q{&qf, {}, {}}, g{&gf, {}, {}};
    for (std::size_t i = 0; i < q_rows.size(); ++i) {
      qf.row(static_cast<Index>(i)) = features.row(q_rows[i]);
      q.ids.push_back(all.ids[static_cast<std::size_t>(q_rows[i])]);
      q.cameras.push_back(0);
    }
    for (std::size_t i = 0; i < g_rows.size(); ++i) {
      gf.row(static_cast<Index>(i)) = features.row(g_rows[i]);
      g.ids.push_back(all.ids[static_cast<std::size_t>(g_rows[i])]);
      g.cameras.push_back(0);
    }
    runs.push_back(rank_and_score(q, g, false));
  }

  EvalReport out;
  out.protocol = "vehicleid";
  out.repeats = repeats;
  out.seed = seed;
  out.warnings = std::move(warnings);
  std::vector<double> maps, r1s, r5s;
  for (const auto& run : runs) {
    maps.push_back(run.map);
    r1s.push_back(run.r1);
    r5s.push_back(run.r5);
  }
  std::tie(out.map, out.map_std) = mean_and_std(maps);
  std::tie(out.r1, out.r1_std) = mean_and_std(r1s);
  std::tie(out.r5, out.r5_std) = mean_and_std(r5s);
  // Gallery size is the identity count in every repeat, so CMC curves align.
  out.cmc.assign(runs.front().cmc.size(), 0.0);
  for (const auto& run : runs)
    for (std::size_t k = 0; k < out.cmc.size(); ++k) out.cmc[k] += run.cmc[k] / repeats;
  out.per_query_ap = runs.front().per_query_ap;
  return out;
}

EvalReport vehicleid_protocol(const Dataset& test_set, Model<float>& model, Selector selector, int repeats,
                              std::uint64_t seed) {
  return vehicleid_protocol(test_set, extract_features(test_set, model, selector), repeats, seed);
}

Eigen::MatrixXd scale_map(const Eigen::MatrixXd& map) {
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  if (hi - lo <= 0.0) {
    return Eigen::MatrixXd::Constant(map.rows(), map.cols(), map.isZero(0.0) ? 0.0 : 128.0);
  }
  return (map.array() - lo) * (255.0 / (hi - lo));
}

Eigen::MatrixXd channel_mean_map(const Tensor<float>& maps, Index sample) {
  if (maps.rank() != 4) throw std::invalid_argument("channel_mean_map: expected an N x C x H x W tensor");
  const Index c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h, w);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out(y, x) += maps.at(sample, ch, y, x);
  return out / static_cast<double>(c);
}

std::vector<ActivationMaps> activation_maps(Model<float>& model, const std::vector<const Image*>& images) {
  if (!has_distillation(model.config().variant)) {
    throw std::invalid_argument(std::string("activation maps need a distilled joint module; variant ") +
                                variant_name(model.config().variant) + " has none");
  }
  if (images.empty()) return {};
  ForwardOptions opts;
  opts.train = false;
  opts.update_stats = false;
  Graph<float> g;
  const Features<float> f = model.forward(g, stack_images(images), opts);
  std::vector<ActivationMaps> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Index n = static_cast<Index>(i);
    out.push_back({scale_map(channel_mean_map(f.G.value(), n)), scale_map(channel_mean_map(f.G_reid.value(), n))});
  }
  return out;
}

std::vector<std::filesystem::path> export_activation_maps(Model<float>& model, const std::vector<const Image*>& images,
                                                          const std::filesystem::path& out_dir) {
  const auto maps = activation_maps(model, images);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    paths.push_back(out_dir / (std::to_string(i) + "_G.pgm"));
    write_pgm(paths.back(), maps[i].G);
    paths.push_back(out_dir / (std::to_string(i) + "_Greid.pgm"));
    write_pgm(paths.back(), maps[i].G_reid);
  }
  return paths;
}

}  // namespace anet
