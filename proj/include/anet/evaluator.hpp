#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "anet/data.hpp"
#include "anet/model.hpp"

namespace anet {

struct EvalReport {
  double map = 0.0;
  std::vector<double> cmc;  // cmc[k] = fraction of queries with a hit in the top k + 1
  double r1 = 0.0;
  double r5 = 0.0;
  std::vector<double> per_query_ap;
  std::string protocol = "fixed";
  int repeats = 1;
  std::uint64_t seed = 0;
  int excluded_queries = 0;
  // Spread across repeats (vehicleid protocol only).
  std::optional<double> map_std, r1_std, r5_std;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

/// Raw selector features in inference mode, one row per sample, then
/// L2-normalized. A zero raw row is rejected naming the sample.
Eigen::MatrixXd extract_features(const Dataset& dataset, Model<float>& model, Selector selector, int batch_size = 64);

struct RetrievalSet {
  const Eigen::MatrixXd* features = nullptr;
  std::vector<int> ids;
  std::vector<int> cameras;
};

/// Squared-Euclidean ranking (ties broken by gallery index), AP as the mean
/// precision at each relevant hit, CMC over the full gallery length. With
/// the cross-camera filter, same-id same-camera gallery entries are dropped
/// per query. Queries left with no relevant entry are excluded and counted.
EvalReport rank_and_score(const RetrievalSet& query, const RetrievalSet& gallery, bool cross_camera_filter);

RetrievalSet retrieval_set(const Dataset& dataset, const Eigen::MatrixXd& features);

/// Fixed query/gallery split with the cross-camera filter.
EvalReport evaluate_fixed(const Dataset& query, const Dataset& gallery, Model<float>& model, Selector selector);

/// Per repeat: one random gallery image per identity, the rest are queries;
/// no camera filter. Reports mean and spread over repeats.
EvalReport vehicleid_protocol(const Dataset& test_set, Model<float>& model, Selector selector, int repeats,
                              std::uint64_t seed);
/// Same protocol on precomputed normalized features.
EvalReport vehicleid_protocol(const Dataset& test_set, const Eigen::MatrixXd& features, int repeats, std::uint64_t seed);

struct ActivationMaps {
  Eigen::MatrixXd G;       // h x w, scaled to [0, 255]
  Eigen::MatrixXd G_reid;  // h x w, scaled to [0, 255]
};

/// Min-max scales to [0, 255]; a flat map becomes 0 when it is all zero and
/// 128 otherwise.
Eigen::MatrixXd scale_map(const Eigen::MatrixXd& map);
/// Channel-mean of a c x h x w slice of an N x c x h x w tensor.
Eigen::MatrixXd channel_mean_map(const Tensor<float>& maps, Index sample);

std::vector<ActivationMaps> activation_maps(Model<float>& model, const std::vector<const Image*>& images);
/// Writes <i>_G.pgm and <i>_Greid.pgm per image; returns the paths.
std::vector<std::filesystem::path> export_activation_maps(Model<float>& model, const std::vector<const Image*>& images,
                                                          const std::filesystem::path& out_dir);

}  // namespace anet
