#pragma once

// Semantic (IoU / accuracy), panoptic (PQ, SQ, RQ, PQ-dagger) and
// corruption-robustness (CE / RR) evaluation.

#include "lidarmerge/core.hpp"
#include "lidarmerge/panoptic.hpp"

#include <array>
#include <map>

namespace lidarmerge::metrics {

/// Rows are ground truth, columns prediction. Points whose ground truth is
/// valid but whose prediction is the ignore id land in `unassigned` and count
/// as false negatives.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0, ClassId ignore_id = kDefaultIgnoreId)
      : classes_(classes), ignore_id_(ignore_id), counts_(classes * classes, 0), unassigned_(classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }
  ClassId ignore_id() const noexcept { return ignore_id_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  std::uint64_t unassigned(std::size_t gt) const { return unassigned_.at(gt); }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    for (auto c : unassigned_) t += c;
    return t;
  }

  void add(std::span<const ClassId> gt, std::span<const ClassId> pred) {
    if (gt.size() != pred.size()) {
      throw Error(ErrorKind::length_mismatch, "metrics", "ground truth and prediction differ in length");
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore_id_) continue;
      if (gt[i] >= classes_) {
        throw Error(ErrorKind::out_of_range, "metrics",
                    "ground-truth id " + std::to_string(gt[i]) + " at " + std::to_string(i) + " out of range");
      }
      if (pred[i] == ignore_id_) {
        ++unassigned_[gt[i]];
        continue;
      }
      if (pred[i] >= classes_) {
        throw Error(ErrorKind::out_of_range, "metrics",
                    "predicted id " + std::to_string(pred[i]) + " at " + std::to_string(i) + " out of range");
      }
      ++counts_[gt[i] * classes_ + pred[i]];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_ || other.ignore_id_ != ignore_id_) {
      throw Error(ErrorKind::schema, "metrics", "cannot merge confusion matrices of different shape");
    }
    for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
    for (std::size_t k = 0; k < unassigned_.size(); ++k) unassigned_[k] += other.unassigned_[k];
  }

  /// Direct construction from a dense count table (rows = gt).
  static ConfusionMatrix from_counts(const std::vector<std::vector<std::uint64_t>>& table,
                                     ClassId ignore_id = kDefaultIgnoreId) {
    ConfusionMatrix cm(table.size(), ignore_id);
    for (std::size_t g = 0; g < table.size(); ++g) {
      if (table[g].size() != table.size()) throw Error(ErrorKind::schema, "metrics", "confusion table must be square");
      for (std::size_t p = 0; p < table.size(); ++p) cm.counts_[g * cm.classes_ + p] = table[g][p];
    }
    return cm;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  ClassId ignore_id_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> unassigned_;
};

inline ConfusionMatrix accumulate_confusion(std::span<const ClassId> gt, std::span<const ClassId> pred,
                                            std::size_t classes, ClassId ignore_id = kDefaultIgnoreId) {
  ConfusionMatrix cm(classes, ignore_id);
  cm.add(gt, pred);
  return cm;
}

/// Fractions in [0, 1]. Entries are nullopt for classes that take no part
/// in the corresponding mean.
struct SemanticScores {
  std::vector<std::optional<double>> iou;
  std::vector<std::optional<double>> acc;
  std::optional<double> miou;
  std::optional<double> macc;
};

/// IoU_c = TP / (TP + FP + FN). Classes with neither ground truth nor
/// predictions are left out of mIoU; classes with no ground truth are left
/// out of mAcc.
inline SemanticScores semantic_scores(const ConfusionMatrix& cm) {
  const std::size_t q = cm.classes();
  SemanticScores s;
  s.iou.resize(q);
  s.acc.resize(q);
  std::vector<double> ious, accs;
  for (std::size_t c = 0; c < q; ++c) {
    std::uint64_t row = cm.unassigned(c), col = 0;
    for (std::size_t k = 0; k < q; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) {
      s.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
      ious.push_back(*s.iou[c]);
    }
    if (row > 0) {
      s.acc[c] = static_cast<double>(tp) / static_cast<double>(row);
      accs.push_back(*s.acc[c]);
    }
  }
  if (!ious.empty()) s.miou = compensated_sum(ious) / static_cast<double>(ious.size());
  if (!accs.empty()) s.macc = compensated_sum(accs) / static_cast<double>(accs.size());
  return s;
}

struct ClassPanopticStats {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  double iou_sum = 0.0;

  friend bool operator==(const ClassPanopticStats&, const ClassPanopticStats&) = default;
};

struct PanopticStats {
  std::vector<ClassPanopticStats> per_class;

  void merge(const PanopticStats& other) {
    if (other.per_class.size() != per_class.size()) {
      throw Error(ErrorKind::schema, "metrics", "cannot merge panoptic stats of different class counts");
    }
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      per_class[c].tp += other.per_class[c].tp;
      per_class[c].fp += other.per_class[c].fp;
      per_class[c].fn += other.per_class[c].fn;
      per_class[c].iou_sum += other.per_class[c].iou_sum;
    }
  }
};

/// Segments are (class, instance) groups; stuff classes carry instance 0 and
/// so form one segment per class. Same-class pairs with IoU > 0.5 match
/// (the threshold makes matches unique). Points whose ground truth is the
/// ignore id are dropped from both labelings, and predicted segments of the
/// ignore class are not counted.
inline PanopticStats panoptic_match(const panoptic::PanopticLabels& gt, const panoptic::PanopticLabels& pred,
                                    std::size_t classes, ClassId ignore_id = kDefaultIgnoreId) {
  const std::size_t n = gt.semantic.size();
  if (gt.instance.size() != n || pred.semantic.size() != n || pred.instance.size() != n) {
    throw Error(ErrorKind::length_mismatch, "metrics", "panoptic labelings differ in length");
  }
  using Segment = std::pair<ClassId, InstanceId>;
  std::map<Segment, std::uint64_t> gt_area, pred_area;
  std::map<std::pair<Segment, Segment>, std::uint64_t> overlap;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt.semantic[i] == ignore_id) continue;
    if (gt.semantic[i] >= classes) throw Error(ErrorKind::out_of_range, "metrics", "ground-truth class out of range");
    const Segment g{gt.semantic[i], gt.instance[i]};
    ++gt_area[g];
    if (pred.semantic[i] == ignore_id) continue;
    if (pred.semantic[i] >= classes) throw Error(ErrorKind::out_of_range, "metrics", "predicted class out of range");
    const Segment p{pred.semantic[i], pred.instance[i]};
    ++pred_area[p];
    if (g.first == p.first) ++overlap[{g, p}];
  }

  PanopticStats stats;
  stats.per_class.assign(classes, {});
  std::map<Segment, bool> gt_matched, pred_matched;
  for (const auto& [pair, inter] : overlap) {
    const auto& [g, p] = pair;
    const std::uint64_t uni = gt_area[g] + pred_area[p] - inter;
    // IoU > 0.5 without rounding: 2 * inter > uni.
    if (2 * inter > uni) {
      auto& cs = stats.per_class[g.first];
      ++cs.tp;
      cs.iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
      gt_matched[g] = true;
      pred_matched[p] = true;
    }
  }
  for (const auto& [g, _] : gt_area) {
    if (!gt_matched.count(g)) ++stats.per_class[g.first].fn;
  }
  for (const auto& [p, _] : pred_area) {
    if (!pred_matched.count(p)) ++stats.per_class[p.first].fp;
  }
  return stats;
}

struct ClassPanopticScores {
  double pq = 0.0;
  double sq = 0.0;
  double rq = 0.0;
};

struct PanopticAggregate {
  std::optional<double> pq, sq, rq;
};

struct PanopticScores {
  std::vector<std::optional<ClassPanopticScores>> per_class;  // nullopt when absent from gt and pred
  PanopticAggregate all, things, stuff;
  std::optional<double> pq_dagger;
};

/// Per class SQ = sum IoU / TP, RQ = TP / (TP + FP/2 + FN/2), PQ = SQ * RQ.
/// Means run over classes present in gt or prediction. PQ-dagger swaps each
/// stuff class's PQ for its semantic IoU (`stuff_iou`, indexed by class).
inline PanopticScores panoptic_scores(const PanopticStats& stats, std::span<const std::optional<double>> stuff_iou,
                                      const std::vector<bool>& thing_mask) {
  const std::size_t q = stats.per_class.size();
  if (thing_mask.size() != q) throw Error(ErrorKind::length_mismatch, "metrics", "thing mask size differs from class count");
  PanopticScores out;
  out.per_class.resize(q);
  struct Acc {
    std::vector<double> pq, sq, rq;
  } all, th, st;
  std::vector<double> dagger;
  for (std::size_t c = 0; c < q; ++c) {
    const auto& s = stats.per_class[c];
    if (s.tp + s.fp + s.fn == 0) continue;
    ClassPanopticScores cs;
    cs.sq = s.tp == 0 ? 0.0 : s.iou_sum / static_cast<double>(s.tp);
    cs.rq = static_cast<double>(s.tp) /
            (static_cast<double>(s.tp) + 0.5 * static_cast<double>(s.fp) + 0.5 * static_cast<double>(s.fn));
    cs.pq = cs.sq * cs.rq;
    out.per_class[c] = cs;
    for (Acc* a : {&all, thing_mask[c] ? &th : &st}) {
      a->pq.push_back(cs.pq);
      a->sq.push_back(cs.sq);
      a->rq.push_back(cs.rq);
    }
    if (thing_mask[c]) {
      dagger.push_back(cs.pq);
    } else {
      if (c >= stuff_iou.size() || !stuff_iou[c]) {
        throw Error(ErrorKind::invalid_input, "metrics", "no semantic IoU for stuff class " + std::to_string(c));
      }
      dagger.push_back(*stuff_iou[c]);
    }
  }
  auto mean = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    return compensated_sum(v) / static_cast<double>(v.size());
  };
  out.all = {mean(all.pq), mean(all.sq), mean(all.rq)};
  out.things = {mean(th.pq), mean(th.sq), mean(th.rq)};
  out.stuff = {mean(st.pq), mean(st.sq), mean(st.rq)};
  out.pq_dagger = mean(dagger);
  return out;
}

inline constexpr std::size_t kSeverityLevels = 3;

/// Fractional mIoU per corruption type and severity level.
struct RobustnessTable {
  std::map<std::string, std::array<double, kSeverityLevels>> corruption;
  double clean = 0.0;

  void validate(const char* which) const {
    auto bad = [](double v) { return !(v >= 0.0 && v <= 1.0); };
    if (bad(clean)) throw Error(ErrorKind::out_of_range, "metrics", std::string(which) + ": clean mIoU outside [0, 1]");
    for (const auto& [k, levels] : corruption) {
      for (double v : levels) {
        if (bad(v)) {
          throw Error(ErrorKind::out_of_range, "metrics", std::string(which) + ": '" + k + "' entry outside [0, 1]");
        }
      }
    }
  }
};

struct RobustnessScores {
  std::map<std::string, double> ce;
  std::map<std::string, double> rr;
  double mce = 0.0;
  double mrr = 0.0;
};

/// CE_k = sum_l (1 - Acc_kl) / sum_l (1 - Acc_kl^baseline);
/// RR_k = sum_l Acc_kl / (3 Acc_clean); mCE, mRR are means over types.
/// Results are fractions (1.0 == 100%).
inline RobustnessScores robustness_scores(const RobustnessTable& candidate, const RobustnessTable& baseline) {
  candidate.validate("candidate");
  baseline.validate("baseline");
  if (candidate.corruption.empty()) throw Error(ErrorKind::invalid_input, "metrics", "no corruption types");
  if (!(candidate.clean > 0.0)) throw Error(ErrorKind::degenerate_clean, "metrics", "clean mIoU is zero");
  RobustnessScores out;
  std::vector<double> ces, rrs;
  for (const auto& [name, acc] : candidate.corruption) {
    auto b = baseline.corruption.find(name);
    if (b == baseline.corruption.end()) {
      throw Error(ErrorKind::invalid_input, "metrics", "baseline has no entry for corruption '" + name + "'");
    }
    double num = 0.0, den = 0.0, kept = 0.0;
    for (std::size_t l = 0; l < kSeverityLevels; ++l) {
      num += 1.0 - acc[l];
      den += 1.0 - b->second[l];
      kept += acc[l];
    }
    if (!(den > 0.0)) {
      throw Error(ErrorKind::degenerate_baseline, "metrics", "baseline error of '" + name + "' is zero");
    }
    out.ce[name] = num / den;
    out.rr[name] = kept / (static_cast<double>(kSeverityLevels) * candidate.clean);
    ces.push_back(out.ce[name]);
    rrs.push_back(out.rr[name]);
  }
  if (baseline.corruption.size() != candidate.corruption.size()) {
    throw Error(ErrorKind::invalid_input, "metrics", "candidate and baseline cover different corruption types");
  }
  out.mce = compensated_sum(ces) / static_cast<double>(ces.size());
  out.mrr = compensated_sum(rrs) / static_cast<double>(rrs.size());
  return out;
}

}  // namespace lidarmerge::metrics
