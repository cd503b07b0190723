#include "anet/losses.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <stdexcept>

namespace anet {

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::kBaseline: return "baseline";
    case Objective::kVan: return "L_VAN";
    case Objective::kJointModule: return "L_JM";
    case Objective::kFull: return "L";
    case Objective::kStage2: return "L_prime";
    case Objective::kStage2NoAc: return "L_prime_no_ac";
  }
  return "?";
}

const char* pair_space_name(PairSpace s) { return s == PairSpace::kJ ? "j" : "f"; }

PairSpace parse_pair_space(const std::string& s) {
  if (s == "j") return PairSpace::kJ;
  if (s == "f") return PairSpace::kF;
  throw std::invalid_argument("unknown pair space '" + s + "' (j|f)");
}

const char* term_name(Term t) {
  switch (t) {
    case Term::kTriF: return "tri_f";
    case Term::kIdF: return "id_f";
    case Term::kAtt: return "att";
    case Term::kTriG: return "tri_g";
    case Term::kTriJ: return "tri_j";
    case Term::kIdJ: return "id_j";
    case Term::kAcId: return "ac_id";
    case Term::kAcTri: return "ac_tri";
  }
  return "?";
}

std::vector<WeightedTerm> objective_terms(Objective objective, const LossWeights& w, int attribute_count, int stage) {
  if (is_stage2(objective) && stage != 2) {
    throw std::invalid_argument(std::string("objective ") + objective_name(objective) + " is only valid in stage 2 (got stage " +
                                std::to_string(stage) + ")");
  }
  std::vector<WeightedTerm> terms;
  auto attributes = [&](double coef) {
    for (int i = 0; i < attribute_count; ++i) terms.push_back({Term::kAtt, i, coef});
  };
  auto joint = [&] {
    terms.push_back({Term::kTriJ, -1, 1.0});
    terms.push_back({Term::kIdJ, -1, 1.0});
    terms.push_back({Term::kTriG, -1, w.lambda_g});
  };
  switch (objective) {
    case Objective::kBaseline:
      terms = {{Term::kTriF, -1, 1.0}, {Term::kIdF, -1, 1.0}};
      break;
    case Objective::kVan:
      terms = {{Term::kTriF, -1, 1.0}, {Term::kIdF, -1, 1.0}};
      attributes(w.lambda_a);
      break;
    case Objective::kJointModule:
      joint();
      break;
    case Objective::kFull:
      joint();
      terms.push_back({Term::kTriF, -1, w.lambda});
      terms.push_back({Term::kIdF, -1, w.lambda});
      attributes(w.lambda * w.lambda_a);
      break;
    case Objective::kStage2:
    case Objective::kStage2NoAc:
      joint();
      attributes(w.lambda * w.lambda_a);
      if (objective == Objective::kStage2) {
        terms.push_back({Term::kAcId, -1, 1.0});
        terms.push_back({Term::kAcTri, -1, 1.0});
      }
      break;
  }
  return terms;
}

std::optional<double>& LossReport::slot(Term term, int attribute) {
  switch (term) {
    case Term::kTriF: return tri_f;
    case Term::kIdF: return id_f;
    case Term::kTriG: return tri_g;
    case Term::kTriJ: return tri_j;
    case Term::kIdJ: return id_j;
    case Term::kAcId: return ac_id;
    case Term::kAcTri: return ac_tri;
    case Term::kAtt:
      if (attribute < 0) throw std::invalid_argument("attribute term needs an index");
      if (static_cast<std::size_t>(attribute) >= att.size()) att.resize(static_cast<std::size_t>(attribute) + 1);
      return att[static_cast<std::size_t>(attribute)];
  }
  throw std::logic_error("bad term");
}

std::optional<double> LossReport::value(Term term, int attribute) const {
  if (term == Term::kAtt) {
    if (attribute < 0 || static_cast<std::size_t>(attribute) >= att.size()) return std::nullopt;
    return att[static_cast<std::size_t>(attribute)];
  }
  return const_cast<LossReport*>(this)->slot(term, attribute);
}

double composite(const LossReport& parts, const LossWeights& weights, Objective objective, int stage) {
  double total = 0.0;
  for (const auto& t : objective_terms(objective, weights, static_cast<int>(parts.att.size()), stage)) {
    const auto v = parts.value(t.term, t.attribute);
    if (!v) throw std::invalid_argument(std::string("composite: missing part ") + term_name(t.term));
    total += t.weight * *v;
  }
  return total;
}

double composite_stage2_uncancelled(const LossReport& parts, const LossWeights& w) {
  const double l = composite(parts, w, Objective::kFull, 1);
  if (!parts.ac_id || !parts.ac_tri) throw std::invalid_argument("composite: missing AC parts");
  return l + *parts.ac_tri + *parts.ac_id - w.lambda * (*parts.tri_f + *parts.id_f);
}

// ---- differentiable terms --------------------------------------------------

template <typename Scalar>
Var<Scalar> ce_label_smooth(Var<Scalar> logits, const std::vector<int>& targets, double epsilon) {
  std::vector<bool> present;
  for (int t : targets) present.push_back(t >= 0);
  return masked_mean(cross_entropy(logits, targets, static_cast<Scalar>(epsilon)), present);
}

template <typename Scalar>
Var<Scalar> euclidean_distances(Var<Scalar> embeddings) {
  return sqrt_floor(pairwise_sq_dist(embeddings), static_cast<Scalar>(1e-12));
}

template <typename Scalar>
Mining mine_batch_hard(const Tensor<Scalar>& d, const std::vector<std::optional<int>>& classes,
                       bool allow_self_positive) {
  const Index n = static_cast<Index>(classes.size());
  require_shape(d.shape(), {n, n}, "mine_batch_hard distances");
  Mining m;
  for (Index a = 0; a < n; ++a) {
    const auto& ca = classes[static_cast<std::size_t>(a)];
    if (!ca) {
      ++m.masked;
      ++m.excluded;
      continue;
    }
    Index pos = -1, neg = -1;
    for (Index b = 0; b < n; ++b) {
      const auto& cb = classes[static_cast<std::size_t>(b)];
      if (!cb || b == a) continue;
      if (*cb == *ca) {
        if (pos < 0 || d.at(a, b) > d.at(a, pos)) pos = b;
      } else if (neg < 0 || d.at(a, b) < d.at(a, neg)) {
        neg = b;
      }
    }
    if (pos < 0 && allow_self_positive) pos = a;
    if (pos < 0 || neg < 0) {
      ++m.excluded;
      continue;
    }
    m.anchors.push_back(a);
    m.positives.push_back(pos);
    m.negatives.push_back(neg);
  }
  return m;
}

template <typename Scalar>
Var<Scalar> triplet_from_mining(Var<Scalar> distances, const Mining& mining, double margin) {
  if (mining.anchors.empty()) return distances.graph().constant(Tensor<Scalar>::scalar(0));
  std::vector<std::pair<Index, Index>> ap, an;
  for (std::size_t i = 0; i < mining.anchors.size(); ++i) {
    ap.emplace_back(mining.anchors[i], mining.positives[i]);
    an.emplace_back(mining.anchors[i], mining.negatives[i]);
  }
  return mean(relu(add_scalar(sub(gather(distances, ap), gather(distances, an)), static_cast<Scalar>(margin))));
}

namespace {

void require_two_identities(const std::vector<int>& ids, const char* what) {
  if (std::set<int>(ids.begin(), ids.end()).size() < 2) {
    throw std::invalid_argument(std::string(what) + ": batch holds a single identity, no negatives to mine");
  }
}

std::vector<std::optional<int>> as_classes(const std::vector<int>& ids) {
  return {ids.begin(), ids.end()};
}

}  // namespace

template <typename Scalar>
TripletResult<Scalar> triplet_batch_hard(Var<Scalar> embeddings, const std::vector<int>& ids, double margin) {
  require_two_identities(ids, "triplet_batch_hard");
  Var<Scalar> d = euclidean_distances(embeddings);
  TripletResult<Scalar> r;
  r.mining = mine_batch_hard(d.value(), as_classes(ids), true);
  r.loss = triplet_from_mining(d, r.mining, margin);
  return r;
}

template <typename Scalar>
TripletResult<Scalar> triplet_attribute_pattern(Var<Scalar> embeddings,
                                                const std::vector<std::vector<std::optional<int>>>& labels,
                                                double margin) {
  // Encode each complete pattern as one class id.
  std::vector<std::vector<int>> seen;
  std::vector<std::optional<int>> classes;
  for (const auto& row : labels) {
    std::vector<int> key;
    bool complete = !row.empty();
    for (const auto& v : row) {
      if (!v) complete = false;
      else key.push_back(*v);
    }
    if (!complete) {
      classes.emplace_back();
      continue;
    }
    auto it = std::find(seen.begin(), seen.end(), key);
    if (it == seen.end()) it = seen.insert(seen.end(), key);
    classes.emplace_back(static_cast<int>(it - seen.begin()));
  }
  Var<Scalar> d = euclidean_distances(embeddings);
  TripletResult<Scalar> r;
  r.mining = mine_batch_hard(d.value(), classes, false);
  r.loss = triplet_from_mining(d, r.mining, margin);
  return r;
}

template <typename Scalar>
Var<Scalar> ac_id(Var<Scalar> ce_j, Var<Scalar> ce_f) {
  require_shape(ce_f.shape(), ce_j.shape(), "ac_id");
  return mean(softplus(sub(ce_j, detach(ce_f))));
}

template <typename Scalar>
Var<Scalar> ac_tri(Var<Scalar> j, Var<Scalar> f, const Mining& pairs) {
  if (pairs.anchors.empty()) return j.graph().constant(Tensor<Scalar>::scalar(0));
  Var<Scalar> dj = euclidean_distances(j);
  Var<Scalar> df = detach(euclidean_distances(f));
  std::vector<std::pair<Index, Index>> ap, an;
  for (std::size_t i = 0; i < pairs.anchors.size(); ++i) {
    ap.emplace_back(pairs.anchors[i], pairs.positives[i]);
    an.emplace_back(pairs.anchors[i], pairs.negatives[i]);
  }
  Var<Scalar> pull = softplus(sub(gather(dj, ap), gather(df, ap)));
  Var<Scalar> push = softplus(sub(gather(df, an), gather(dj, an)));
  return mean(add(pull, push));
}

template <typename Scalar>
Var<Scalar> ac_tri(Var<Scalar> j, Var<Scalar> f, const std::vector<int>& ids, PairSpace space) {
  require_two_identities(ids, "ac_tri");
  const Tensor<Scalar> d = euclidean_distances(detach(space == PairSpace::kJ ? j : f)).value();
  return ac_tri(j, f, mine_batch_hard(d, as_classes(ids), true));
}

// ---- batch objective -------------------------------------------------------

template <typename Scalar>
LossOutput<Scalar> compute_loss(const Features<Scalar>& x, const BatchTargets& targets, const LossWeights& w,
                                Objective objective, int stage, PairSpace pair_space) {
  const int n_att = static_cast<int>(x.attributes.size());
  const auto terms = objective_terms(objective, w, n_att, stage);
  const Scalar eps = static_cast<Scalar>(w.epsilon);

  LossOutput<Scalar> out;
  LossReport& rep = out.report;
  rep.objective = objective;
  rep.stage = stage;
  rep.att.assign(static_cast<std::size_t>(n_att), std::nullopt);
  rep.masked_counts.assign(static_cast<std::size_t>(n_att), 0);

  auto require = [&](const Var<Scalar>& v, const char* what) {
    if (!v.valid()) {
      throw std::invalid_argument(std::string("objective ") + objective_name(objective) + " needs " + what +
                                  ", which this model does not produce");
    }
  };

  Var<Scalar> ce_rows_f, ce_rows_j;
  std::vector<Var<Scalar>> term_vars;

  for (const auto& t : terms) {
    Var<Scalar> v;
    switch (t.term) {
      case Term::kTriF:
        v = triplet_batch_hard(x.f, targets.ids, w.margin).loss;
        break;
      case Term::kIdF:
        ce_rows_f = cross_entropy(x.id_logits_f, targets.ids, eps);
        v = mean(ce_rows_f);
        break;
      case Term::kAtt: {
        const auto i = static_cast<std::size_t>(t.attribute);
        std::vector<int> labels;
        for (const auto& row : targets.attributes) {
          const auto& l = i < row.size() ? row[i] : std::nullopt;
          labels.push_back(l ? *l : -1);
          if (!l) ++rep.masked_counts[i];
        }
        v = ce_label_smooth(x.attributes[i].logits, labels, w.epsilon);
        break;
      }
      case Term::kTriG: {
        require(x.g, "g");
        auto r = triplet_attribute_pattern(x.g, targets.attributes, w.margin);
        rep.pattern_excluded = r.mining.excluded;
        v = r.loss;
        break;
      }
      case Term::kTriJ:
        require(x.j, "j");
        v = triplet_batch_hard(x.j, targets.ids, w.margin).loss;
        break;
      case Term::kIdJ:
        require(x.j, "j");
        ce_rows_j = cross_entropy(x.id_logits_j, targets.ids, eps);
        v = mean(ce_rows_j);
        break;
      case Term::kAcId:
        if (!ce_rows_j.valid()) ce_rows_j = cross_entropy(x.id_logits_j, targets.ids, eps);
        v = ac_id(ce_rows_j, cross_entropy(x.id_logits_f, targets.ids, eps));
        break;
      case Term::kAcTri:
        v = ac_tri(x.j, x.f, targets.ids, pair_space);
        break;
    }
    rep.slot(t.term, t.attribute) = static_cast<double>(v.value().item());
    term_vars.push_back(scale(v, static_cast<Scalar>(t.weight)));
  }

  out.total = term_vars.front();
  for (std::size_t i = 1; i < term_vars.size(); ++i) out.total = add(out.total, term_vars[i]);
  rep.total = static_cast<double>(out.total.value().item());
  return out;
}

#define ANET_INSTANTIATE_LOSSES(S)                                                                              \
  template Var<S> ce_label_smooth(Var<S>, const std::vector<int>&, double);                                    \
  template Var<S> euclidean_distances(Var<S>);                                                                  \
  template Mining mine_batch_hard(const Tensor<S>&, const std::vector<std::optional<int>>&, bool);             \
  template Var<S> triplet_from_mining(Var<S>, const Mining&, double);                                          \
  template TripletResult<S> triplet_batch_hard(Var<S>, const std::vector<int>&, double);                       \
  template TripletResult<S> triplet_attribute_pattern(Var<S>, const std::vector<std::vector<std::optional<int>>>&, \
                                                      double);                                                  \
  template Var<S> ac_id(Var<S>, Var<S>);                                                                        \
  template Var<S> ac_tri(Var<S>, Var<S>, const Mining&);                                                        \
  template Var<S> ac_tri(Var<S>, Var<S>, const std::vector<int>&, PairSpace);                                  \
  template LossOutput<S> compute_loss(const Features<S>&, const BatchTargets&, const LossWeights&, Objective, int, \
                                      PairSpace);

ANET_INSTANTIATE_LOSSES(float)
ANET_INSTANTIATE_LOSSES(double)

}  // namespace anet
