#pragma once

#include <optional>
#include <string>
#include <vector>

#include "anet/model.hpp"

namespace anet {

struct LossWeights {
  double lambda_a = 1.0;
  double lambda_g = 1.0;
  double lambda = 1.0;
  double margin = 0.3;
  double epsilon = 0.1;  // label smoothing
};

enum class Objective {
  kBaseline,     // tri_f + id_f
  kVan,          // tri_f + id_f + lambda_a * sum att
  kJointModule,  // tri_j + id_j + lambda_g * tri_g
  kFull,         // JM + lambda * VAN
  kStage2,       // JM + lambda * lambda_a * sum att + ac_id + ac_tri
  kStage2NoAc,   // kStage2 without the AC terms
};

const char* objective_name(Objective o);
/// True for objectives only valid once the backbone is frozen.
inline bool is_stage2(Objective o) { return o == Objective::kStage2 || o == Objective::kStage2NoAc; }

/// Space in which AC_tri positives/negatives are mined.
enum class PairSpace { kJ, kF };
const char* pair_space_name(PairSpace s);
PairSpace parse_pair_space(const std::string& s);

enum class Term { kTriF, kIdF, kAtt, kTriG, kTriJ, kIdJ, kAcId, kAcTri };
const char* term_name(Term t);

struct WeightedTerm {
  Term term;
  int attribute = -1;  // kAtt only
  double weight = 1.0;
};

/// Terms and coefficients of an objective. Stage-2 objectives outside stage 2
/// are rejected.
std::vector<WeightedTerm> objective_terms(Objective objective, const LossWeights& weights, int attribute_count,
                                          int stage);

struct LossReport {
  std::optional<double> tri_f, id_f, tri_g, tri_j, id_j, ac_id, ac_tri;
  std::vector<std::optional<double>> att;
  /// Samples whose label for attribute i is absent.
  std::vector<int> masked_counts;
  /// Anchors excluded from the attribute-pattern triplet.
  int pattern_excluded = 0;
  double total = 0.0;
  Objective objective = Objective::kBaseline;
  int stage = 1;

  std::optional<double> value(Term term, int attribute = -1) const;
  std::optional<double>& slot(Term term, int attribute = -1);
};

/// Weighted sum of report parts; throws if a required part is missing.
double composite(const LossReport& parts, const LossWeights& weights, Objective objective, int stage);
/// L' written as L + AC_tri + AC_ID - lambda (L_tri^f + L_ID^f); needs every part.
double composite_stage2_uncancelled(const LossReport& parts, const LossWeights& weights);

// ---- differentiable terms --------------------------------------------------

/// Mean label-smoothed cross-entropy over rows with a present target (-1 = absent).
template <typename Scalar>
Var<Scalar> ce_label_smooth(Var<Scalar> logits, const std::vector<int>& targets, double epsilon);

/// sqrt(max(||x_i - x_j||^2, 1e-12)).
template <typename Scalar>
Var<Scalar> euclidean_distances(Var<Scalar> embeddings);

struct Mining {
  std::vector<Index> anchors, positives, negatives;
  int excluded = 0;  // anchors without a valid positive/negative pair
  int masked = 0;    // anchors with an absent label
};

/// Per anchor: farthest positive (same class) and nearest negative. A class
/// of std::nullopt excludes the sample both as anchor and as partner. When
/// `allow_self_positive`, an anchor with no other same-class sample uses
/// itself (d_p = 0); otherwise it is excluded.
template <typename Scalar>
Mining mine_batch_hard(const Tensor<Scalar>& distances, const std::vector<std::optional<int>>& classes,
                       bool allow_self_positive);

/// mean over mined anchors of max(0, margin + d_ap - d_an); constant 0 with no anchors.
template <typename Scalar>
Var<Scalar> triplet_from_mining(Var<Scalar> distances, const Mining& mining, double margin);

template <typename Scalar>
struct TripletResult {
  Var<Scalar> loss;
  Mining mining;
};

/// Throws std::invalid_argument when the batch holds a single identity.
template <typename Scalar>
TripletResult<Scalar> triplet_batch_hard(Var<Scalar> embeddings, const std::vector<int>& ids, double margin);

/// Same-class means all attribute labels equal. Anchors with an absent label
/// or without another same-pattern and a different-pattern partner are excluded.
template <typename Scalar>
TripletResult<Scalar> triplet_attribute_pattern(Var<Scalar> embeddings,
                                                const std::vector<std::vector<std::optional<int>>>& labels,
                                                double margin);

/// mean(softplus(ce_j - ce_f)) with ce_f held constant.
template <typename Scalar>
Var<Scalar> ac_id(Var<Scalar> ce_j, Var<Scalar> ce_f);

/// mean over anchors of softplus(Dj(a,p) - Df(a,p)) + softplus(Df(a,n) - Dj(a,n)),
/// f-side distances held constant.
template <typename Scalar>
Var<Scalar> ac_tri(Var<Scalar> j, Var<Scalar> f, const Mining& pairs);
/// Mines pairs by batch-hard selection in the chosen space; throws for a
/// single-identity batch.
template <typename Scalar>
Var<Scalar> ac_tri(Var<Scalar> j, Var<Scalar> f, const std::vector<int>& ids, PairSpace space);

// ---- batch objective -------------------------------------------------------

struct BatchTargets {
  std::vector<int> ids;  // contiguous class indices
  std::vector<std::vector<std::optional<int>>> attributes;
};

template <typename Scalar>
struct LossOutput {
  Var<Scalar> total;
  LossReport report;
};

template <typename Scalar>
LossOutput<Scalar> compute_loss(const Features<Scalar>& features, const BatchTargets& targets,
                                const LossWeights& weights, Objective objective, int stage,
                                PairSpace pair_space = PairSpace::kJ);

}  // namespace anet
