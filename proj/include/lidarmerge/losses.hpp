#pragma once

// Loss kernels for multi-dataset alignment and segmentation, each returning
// its value together with analytic gradients for every differentiable input.
//
// Text embeddings and image-encoder features are frozen upstream; where a
// kernel still returns a gradient for such an input it is for verification,
// and callers are free to drop it.

#include "lidarmerge/core.hpp"

#include <map>
#include <limits>
#include <numeric>

namespace lidarmerge::losses {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kDefaultTemperature = 0.07;

struct LossResult {
  double value = 0.0;
  /// One entry per differentiable input, in the order the kernel documents.
  std::vector<FeatureMatrix> gradients;
};

namespace detail {

inline void require_same_shape(const FeatureMatrix& a, const FeatureMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::length_mismatch, "losses",
                std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " and " +
                    std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + " differ");
  }
}

inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(xs.begin(), xs.end());
  CompensatedSum s;
  for (double x : xs) s.add(std::exp(x - mx));
  return mx + std::log(s.value());
}

}  // namespace detail

/// Mean over rows of 1 - cos(a_i, b_i). Gradients: {d/da, d/db}.
inline LossResult cosine_alignment_loss(const FeatureMatrix& a, const FeatureMatrix& b) {
  detail::require_same_shape(a, b, "cosine_alignment_loss");
  require_finite(a, "losses", "cosine input a");
  require_finite(b, "losses", "cosine input b");
  const Eigen::Index m = a.rows();
  LossResult r;
  r.gradients = {FeatureMatrix::Zero(m, a.cols()), FeatureMatrix::Zero(m, b.cols())};
  if (m == 0) return r;
  CompensatedSum total;
  const double inv_m = 1.0 / static_cast<double>(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double na = a.row(i).norm();
    const double nb = b.row(i).norm();
    if (na <= kNormEpsilon || nb <= kNormEpsilon) {
      throw Error(ErrorKind::degenerate_row, "losses", "row " + std::to_string(i) + " has zero norm");
    }
    const double dot = a.row(i).dot(b.row(i));
    const double cos = dot / (na * nb);
    total.add(1.0 - cos);
    r.gradients[0].row(i) = -inv_m * (b.row(i) / (na * nb) - cos * a.row(i) / (na * na));
    r.gradients[1].row(i) = -inv_m * (a.row(i) / (na * nb) - cos * b.row(i) / (nb * nb));
  }
  r.value = total.value() * inv_m;
  return r;
}

enum class Activation { none, relu, sigmoid, softmax };

struct AffineLayer {
  FeatureMatrix weights;  // out x in
  Eigen::VectorXd bias;   // out
  Activation activation = Activation::none;

  Eigen::Index in_dim() const noexcept { return weights.cols(); }
  Eigen::Index out_dim() const noexcept { return weights.rows(); }

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y = weights * x + bias;
    switch (activation) {
      case Activation::none: break;
      case Activation::relu: y = y.cwiseMax(0.0); break;
      case Activation::sigmoid: y = (1.0 + (-y.array()).exp()).inverse().matrix(); break;
      case Activation::softmax: {
        const double mx = y.maxCoeff();
        y = (y.array() - mx).exp().matrix();
        y /= y.sum();
        break;
      }
    }
    return y;
  }
};

namespace detail {

inline Eigen::Index check_chain(std::span<const AffineLayer> layers, Eigen::Index in_dim, const char* name) {
  if (layers.empty()) throw Error(ErrorKind::chain, "losses", std::string(name) + " has no layers");
  Eigen::Index dim = in_dim;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.in_dim() != dim || layer.bias.size() != layer.out_dim()) {
      throw Error(ErrorKind::chain, "losses",
                  std::string(name) + " layer " + std::to_string(l) + " expects input " +
                      std::to_string(layer.in_dim()) + ", receives " + std::to_string(dim));
    }
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
      throw Error(ErrorKind::non_finite, "losses", std::string(name) + " has non-finite parameters");
    }
    dim = layer.out_dim();
  }
  return dim;
}

inline Eigen::VectorXd run_mlp(std::span<const AffineLayer> layers, Eigen::VectorXd x) {
  for (const auto& layer : layers) x = layer.apply(x);
  return x;
}

}  // namespace detail

struct FusionOutput {
  FeatureMatrix features;  // (h*w) x c
  Eigen::VectorXd gate;    // F_m, length c_v (before the sigmoid)
};

/// Domain-aware fusion of channel-concatenated image features.
///
/// `concat` holds one row per spatial position (h*w rows) and c_v channels.
/// Gate F_m = branch1(pool) * branch2(pool) elementwise, with pool the mean
/// over positions and branch2 ending in softmax. Output row = head(sigmoid(F_m)
/// * x + x) for each position x.
inline FusionOutput domain_fusion_forward(const FeatureMatrix& concat, std::span<const AffineLayer> branch1,
                                          std::span<const AffineLayer> branch2, std::span<const AffineLayer> head) {
  require_finite(concat, "losses", "fusion input");
  const Eigen::Index cv = concat.cols();
  if (cv < 1 || concat.rows() < 1) throw Error(ErrorKind::chain, "losses", "fusion input must be non-empty");
  if (detail::check_chain(branch1, cv, "branch1") != cv) {
    throw Error(ErrorKind::chain, "losses", "branch1 must output c_v channels");
  }
  if (detail::check_chain(branch2, cv, "branch2") != cv) {
    throw Error(ErrorKind::chain, "losses", "branch2 must output c_v channels");
  }
  if (branch2.back().activation != Activation::softmax) {
    throw Error(ErrorKind::chain, "losses", "branch2 must end in softmax");
  }
  const Eigen::Index c = detail::check_chain(head, cv, "head");

  const Eigen::VectorXd pooled = concat.colwise().mean().transpose();
  FusionOutput out;
  out.gate = detail::run_mlp(branch1, pooled).cwiseProduct(detail::run_mlp(branch2, pooled));
  const Eigen::RowVectorXd sig = (1.0 + (-out.gate.array()).exp()).inverse().matrix().transpose();
  out.features.resize(concat.rows(), c);
  for (Eigen::Index r = 0; r < concat.rows(); ++r) {
    const Eigen::RowVectorXd x = concat.row(r);
    const Eigen::VectorXd mixed = (sig.cwiseProduct(x) + x).transpose();
    out.features.row(r) = detail::run_mlp(head, mixed).transpose();
  }
  return out;
}

struct ContrastiveOptions {
  double tau = kDefaultTemperature;
  /// L2-normalize item and text rows before the scalar product.
  bool normalize_embeddings = true;
};

/// Class-wise InfoNCE between items (points or pixels) and class text
/// embeddings. For every class q with members S_q:
///
///     num_q = sum_{i in S_q} exp(<t_q, x_i> / tau)
///     den_q = sum_{i in S_q} sum_{k allowed} exp(<t_k, x_i> / tau)
///
/// with `allowed` the dataset's negative mask (q itself included). The loss
/// is the mean of -log(num_q / den_q) over contributing classes. Gradient:
/// {d/d items}; text is treated as frozen.
inline LossResult text_contrastive_loss(const FeatureMatrix& items, const FeatureMatrix& text,
                                        std::span<const ClassId> item_class, const std::vector<bool>& negative_mask,
                                        ContrastiveOptions opts = {}) {
  if (!(opts.tau > 0.0) || !std::isfinite(opts.tau)) {
    throw Error(ErrorKind::parameter, "losses", "temperature must be positive");
  }
  if (items.cols() != text.cols()) {
    throw Error(ErrorKind::length_mismatch, "losses", "item and text embeddings differ in width");
  }
  if (static_cast<std::size_t>(items.rows()) != item_class.size()) {
    throw Error(ErrorKind::length_mismatch, "losses", "one class id per item is required");
  }
  if (negative_mask.size() != static_cast<std::size_t>(text.rows())) {
    throw Error(ErrorKind::length_mismatch, "losses", "negative mask must have one entry per text class");
  }
  require_finite(items, "losses", "contrastive items");
  require_finite(text, "losses", "text embeddings");

  const Eigen::Index m = items.rows();
  const auto q_count = static_cast<std::size_t>(text.rows());
  LossResult r;
  r.gradients = {FeatureMatrix::Zero(m, items.cols())};
  if (m == 0) return r;

  for (std::size_t i = 0; i < item_class.size(); ++i) {
    if (item_class[i] >= q_count || !negative_mask[item_class[i]]) {
      throw Error(ErrorKind::parameter, "losses",
                  "item " + std::to_string(i) + " has class " + std::to_string(item_class[i]) +
                      " outside the permitted class set");
    }
  }

  FeatureMatrix x = items;
  std::vector<double> item_norm(static_cast<std::size_t>(m), 1.0);
  FeatureMatrix t = text;
  if (opts.normalize_embeddings) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double n = items.row(i).norm();
      if (n <= kNormEpsilon) throw Error(ErrorKind::degenerate_row, "losses", "item " + std::to_string(i) + " has zero norm");
      item_norm[static_cast<std::size_t>(i)] = n;
      x.row(i) /= n;
    }
    for (Eigen::Index k = 0; k < text.rows(); ++k) {
      if (!negative_mask[static_cast<std::size_t>(k)]) continue;
      const double n = text.row(k).norm();
      if (n <= kNormEpsilon) throw Error(ErrorKind::degenerate_row, "losses", "text row " + std::to_string(k) + " has zero norm");
      t.row(k) /= n;
    }
  }

  std::vector<Eigen::Index> allowed;
  for (std::size_t k = 0; k < q_count; ++k) {
    if (negative_mask[k]) allowed.push_back(static_cast<Eigen::Index>(k));
  }

  // scores(i, j) = <t_allowed[j], x_i> / tau
  FeatureMatrix scores(m, static_cast<Eigen::Index>(allowed.size()));
  for (std::size_t j = 0; j < allowed.size(); ++j) {
    scores.col(static_cast<Eigen::Index>(j)) = (x * t.row(allowed[j]).transpose()) / opts.tau;
  }
  std::vector<Eigen::Index> column_of(q_count, -1);
  for (std::size_t j = 0; j < allowed.size(); ++j) column_of[static_cast<std::size_t>(allowed[j])] = static_cast<Eigen::Index>(j);

  std::map<ClassId, std::vector<Eigen::Index>> members;
  for (std::size_t i = 0; i < item_class.size(); ++i) members[item_class[i]].push_back(static_cast<Eigen::Index>(i));

  const double inv_classes = 1.0 / static_cast<double>(members.size());
  FeatureMatrix dscores = FeatureMatrix::Zero(m, scores.cols());
  CompensatedSum total;
  std::vector<double> buf;
  for (const auto& [q, idx] : members) {
    const Eigen::Index qc = column_of[q];
    buf.clear();
    for (Eigen::Index i : idx) buf.push_back(scores(i, qc));
    const double log_num = detail::log_sum_exp(buf);
    buf.clear();
    for (Eigen::Index i : idx)
      for (Eigen::Index j = 0; j < scores.cols(); ++j) buf.push_back(scores(i, j));
    const double log_den = detail::log_sum_exp(buf);
    total.add(log_den - log_num);
    for (Eigen::Index i : idx) {
      for (Eigen::Index j = 0; j < scores.cols(); ++j) dscores(i, j) += inv_classes * std::exp(scores(i, j) - log_den);
      dscores(i, qc) -= inv_classes * std::exp(scores(i, qc) - log_num);
    }
  }
  r.value = total.value() * inv_classes;

  FeatureMatrix dx = FeatureMatrix::Zero(m, items.cols());
  for (std::size_t j = 0; j < allowed.size(); ++j) {
    dx += dscores.col(static_cast<Eigen::Index>(j)) * t.row(allowed[j]) / opts.tau;
  }
  if (opts.normalize_embeddings) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const double radial = x.row(i).dot(dx.row(i));
      dx.row(i) = (dx.row(i) - radial * x.row(i)) / item_norm[static_cast<std::size_t>(i)];
    }
  }
  r.gradients[0] = std::move(dx);
  return r;
}

struct LabelAlignmentInputs {
  const FeatureMatrix& point_logits;  // m_p x Q, paired
  const FeatureMatrix& pixel_logits;  // m_p x Q, paired
  const FeatureMatrix& point_feats;   // items for the point-text term
  const FeatureMatrix& pixel_feats;   // items for the pixel-text term
  const FeatureMatrix& text;          // Q x c
  std::span<const ClassId> point_classes;
  std::span<const ClassId> pixel_classes;
  const std::vector<bool>& negative_mask;
  ContrastiveOptions options{};
};

struct LabelAlignmentResult {
  LossResult point_text;   // gradients: {point_feats}
  LossResult pixel_point;  // gradients: {pixel_logits, point_logits}
  LossResult pixel_text;   // gradients: {pixel_feats}
  double value = 0.0;

  /// Gradients of the sum, ordered {point_logits, pixel_logits, point_feats, pixel_feats}.
  std::vector<FeatureMatrix> gradients() const {
    return {pixel_point.gradients[1], pixel_point.gradients[0], point_text.gradients[0], pixel_text.gradients[0]};
  }
};

/// Point-text contrast + pixel-to-point logit cosine + pixel-text contrast.
inline LabelAlignmentResult label_alignment_loss(const LabelAlignmentInputs& in) {
  LabelAlignmentResult r;
  r.point_text = text_contrastive_loss(in.point_feats, in.text, in.point_classes, in.negative_mask, in.options);
  r.pixel_point = cosine_alignment_loss(in.pixel_logits, in.point_logits);
  r.pixel_text = text_contrastive_loss(in.pixel_feats, in.text, in.pixel_classes, in.negative_mask, in.options);
  r.value = r.point_text.value + r.pixel_point.value + r.pixel_text.value;
  return r;
}

/// Mean negative log-softmax of the target class over non-ignored rows.
/// Gradient: {d/d logits}.
inline LossResult cross_entropy_loss(const FeatureMatrix& logits, std::span<const ClassId> targets,
                                     ClassId ignore_id = kDefaultIgnoreId) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw Error(ErrorKind::length_mismatch, "losses", "one target per logit row is required");
  }
  require_finite(logits, "losses", "logits");
  const auto q = static_cast<std::size_t>(logits.cols());
  std::size_t valid = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] >= q) {
      throw Error(ErrorKind::invalid_label, "losses", "target " + std::to_string(targets[i]) + " >= class count");
    }
    ++valid;
  }
  if (valid == 0) throw Error(ErrorKind::empty_target, "losses", "every row is ignored");

  LossResult r;
  r.gradients = {FeatureMatrix::Zero(logits.rows(), logits.cols())};
  const double inv = 1.0 / static_cast<double>(valid);
  CompensatedSum total;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const ClassId y = targets[static_cast<std::size_t>(i)];
    if (y == ignore_id) continue;
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    total.add(std::log(z) - (logits(i, y) - mx));
    r.gradients[0].row(i) = inv * e / z;
    r.gradients[0](i, y) -= inv;
  }
  r.value = total.value() * inv;
  return r;
}

struct LovaszOptions {
  /// Reject rows that are not probability vectors (within 1e-6).
  bool check_probabilities = true;
};

/// Lovász-softmax: for each class present in the targets, the Lovász
/// extension of the Jaccard loss evaluated at the per-point errors, averaged
/// over present classes. Gradient: {d/d probs} (a subgradient at ties).
inline LossResult lovasz_softmax_loss(const FeatureMatrix& probs, std::span<const ClassId> targets,
                                      ClassId ignore_id = kDefaultIgnoreId, LovaszOptions opts = {}) {
  if (static_cast<std::size_t>(probs.rows()) != targets.size()) {
    throw Error(ErrorKind::length_mismatch, "losses", "one target per probability row is required");
  }
  require_finite(probs, "losses", "probabilities");
  const auto q = static_cast<std::size_t>(probs.cols());
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] >= q) {
      throw Error(ErrorKind::invalid_label, "losses", "target " + std::to_string(targets[i]) + " >= class count");
    }
    rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (opts.check_probabilities) {
    for (Eigen::Index i : rows) {
      const double s = probs.row(i).sum();
      if (std::abs(s - 1.0) > 1e-6 || probs.row(i).minCoeff() < -1e-6 || probs.row(i).maxCoeff() > 1.0 + 1e-6) {
        throw Error(ErrorKind::invalid_probability, "losses", "row " + std::to_string(i) + " is not a probability vector");
      }
    }
  }

  LossResult r;
  r.gradients = {FeatureMatrix::Zero(probs.rows(), probs.cols())};
  std::vector<bool> present(q, false);
  for (Eigen::Index i : rows) present[targets[static_cast<std::size_t>(i)]] = true;
  const auto n_present = static_cast<std::size_t>(std::count(present.begin(), present.end(), true));
  if (n_present == 0) return r;

  const std::size_t n = rows.size();
  std::vector<double> err(n);
  std::vector<std::size_t> order(n);
  CompensatedSum total;
  const double inv_classes = 1.0 / static_cast<double>(n_present);
  for (std::size_t c = 0; c < q; ++c) {
    if (!present[c]) continue;
    const auto cc = static_cast<Eigen::Index>(c);
    double gts = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const bool fg = targets[static_cast<std::size_t>(rows[k])] == c;
      gts += fg ? 1.0 : 0.0;
      err[k] = fg ? 1.0 - probs(rows[k], cc) : probs(rows[k], cc);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });

    // Jaccard loss after the first k+1 sorted errors, and its increments.
    double cum_fg = 0.0;
    double cum_bg = 0.0;
    double prev_jaccard = 0.0;
    CompensatedSum class_loss;
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = order[k];
      const bool fg = targets[static_cast<std::size_t>(rows[idx])] == c;
      (fg ? cum_fg : cum_bg) += 1.0;
      const double inter = gts - cum_fg;
      const double uni = gts + cum_bg;
      const double jaccard = 1.0 - inter / uni;
      const double delta = jaccard - prev_jaccard;
      prev_jaccard = jaccard;
      class_loss.add(err[idx] * delta);
      r.gradients[0](rows[idx], cc) += inv_classes * delta * (fg ? -1.0 : 1.0);
    }
    total.add(class_loss.value());
  }
  r.value = total.value() * inv_classes;
  return r;
}

/// Mean absolute error over the masked rows and all three components.
/// Gradient: {d/d pred}, zero wherever pred == target.
inline LossResult l1_offset_loss(const FeatureMatrix& pred, const FeatureMatrix& target,
                                 const std::vector<bool>& thing_mask) {
  detail::require_same_shape(pred, target, "l1_offset_loss");
  if (thing_mask.size() != static_cast<std::size_t>(pred.rows())) {
    throw Error(ErrorKind::length_mismatch, "losses", "thing mask must have one entry per row");
  }
  require_finite(pred, "losses", "predicted offsets");
  require_finite(target, "losses", "target offsets");
  LossResult r;
  r.gradients = {FeatureMatrix::Zero(pred.rows(), pred.cols())};
  const auto masked = static_cast<std::size_t>(std::count(thing_mask.begin(), thing_mask.end(), true));
  if (masked == 0 || pred.cols() == 0) return r;
  const double inv = 1.0 / static_cast<double>(masked * static_cast<std::size_t>(pred.cols()));
  CompensatedSum total;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    if (!thing_mask[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      const double d = pred(i, j) - target(i, j);
      total.add(std::abs(d));
      r.gradients[0](i, j) = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
    }
  }
  r.value = total.value() * inv;
  return r;
}

struct ObjectiveBreakdown {
  double total = 0.0;
  std::vector<std::pair<std::string, double>> parts;
};

/// Unweighted sum of named loss terms. Terms are summed in value order, so
/// the total does not depend on the order the parts are given in.
inline ObjectiveBreakdown total_objective(std::vector<std::pair<std::string, double>> parts) {
  std::vector<double> values;
  values.reserve(parts.size());
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw Error(ErrorKind::non_finite, "losses", "objective part '" + name + "' is not finite");
    values.push_back(v);
  }
  std::sort(values.begin(), values.end());
  ObjectiveBreakdown out;
  out.total = compensated_sum(values);
  out.parts = std::move(parts);
  return out;
}

struct ObjectiveParts {
  double v2p = 0.0;
  double label = 0.0;
  double ce = 0.0;
  double lovasz = 0.0;
  double l1 = 0.0;
};

inline ObjectiveBreakdown total_objective(const ObjectiveParts& p) {
  return total_objective({{"v2p", p.v2p}, {"label", p.label}, {"ce", p.ce}, {"lovasz", p.lovasz}, {"l1", p.l1}});
}

}  // namespace lidarmerge::losses
