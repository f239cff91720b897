#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <set>

namespace lm = lidarmerge;
namespace ll = lidarmerge::losses;
namespace gc = lidarmerge::gradcheck;
using lm::FeatureMatrix;
using lmtest::Rng;

namespace {

constexpr int kInstances = 20;

double row_norm(const FeatureMatrix& m, Eigen::Index i) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < m.cols(); ++j) s += m(i, j) * m(i, j);
  return std::sqrt(s);
}

double cosine_oracle(const FeatureMatrix& a, const FeatureMatrix& b) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double dot = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) dot += a(i, j) * b(i, j);
    total += 1.0 - dot / (row_norm(a, i) * row_norm(b, i));
  }
  return total / static_cast<double>(a.rows());
}

// Plain exponentials, no log-sum-exp: fine for the small scores used here.
double contrastive_oracle(const FeatureMatrix& items, const FeatureMatrix& text, const std::vector<lm::ClassId>& cls,
                          const std::vector<bool>& allowed, double tau, bool normalize) {
  auto score = [&](Eigen::Index i, Eigen::Index k) {
    double dot = 0.0;
    for (Eigen::Index j = 0; j < items.cols(); ++j) dot += items(i, j) * text(k, j);
    if (normalize) dot /= row_norm(items, i) * row_norm(text, k);
    return dot / tau;
  };
  std::set<lm::ClassId> classes(cls.begin(), cls.end());
  double total = 0.0;
  for (auto q : classes) {
    double num = 0.0, den = 0.0;
    for (Eigen::Index i = 0; i < items.rows(); ++i) {
      if (cls[static_cast<std::size_t>(i)] != q) continue;
      num += std::exp(score(i, q));
      for (Eigen::Index k = 0; k < text.rows(); ++k)
        if (allowed[static_cast<std::size_t>(k)]) den += std::exp(score(i, k));
    }
    total += -std::log(num / den);
  }
  return total / static_cast<double>(classes.size());
}

double ce_oracle(const FeatureMatrix& logits, const std::vector<lm::ClassId>& t, lm::ClassId ignore) {
  double total = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (t[static_cast<std::size_t>(i)] == ignore) continue;
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j));
    total += std::log(z) - logits(i, t[static_cast<std::size_t>(i)]);
    ++n;
  }
  return total / n;
}

// Lovász extension built from the Jaccard set function on explicit sets of
// "mistaken" rows, prefix by prefix.
double lovasz_oracle(const FeatureMatrix& probs, const std::vector<lm::ClassId>& t) {
  std::set<lm::ClassId> present(t.begin(), t.end());
  const auto n = static_cast<std::size_t>(probs.rows());
  double total = 0.0;
  for (auto c : present) {
    std::vector<double> err(n);
    std::set<std::size_t> gt;
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i] == c) gt.insert(i);
      err[i] = t[i] == c ? 1.0 - probs(static_cast<Eigen::Index>(i), c) : probs(static_cast<Eigen::Index>(i), c);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return err[a] > err[b]; });
    auto jaccard_loss = [&](const std::set<std::size_t>& mistakes) {
      std::size_t inter = 0, uni = gt.size();
      for (auto g : gt) inter += mistakes.count(g) ? 0 : 1;
      for (auto m : mistakes) uni += gt.count(m) ? 0 : 1;
      return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
    };
    std::set<std::size_t> mistakes;
    double prev = 0.0, cls = 0.0;
    for (auto i : order) {
      mistakes.insert(i);
      const double j = jaccard_loss(mistakes);
      cls += err[i] * (j - prev);
      prev = j;
    }
    total += cls;
  }
  return total / static_cast<double>(present.size());
}

FeatureMatrix softmax_rows(const FeatureMatrix& logits) {
  FeatureMatrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j));
    for (Eigen::Index j = 0; j < logits.cols(); ++j) p(i, j) = std::exp(logits(i, j)) / z;
  }
  return p;
}

std::vector<bool> random_allowed(Rng& rng, std::size_t q, const std::vector<lm::ClassId>& must) {
  std::vector<bool> allowed(q);
  for (std::size_t k = 0; k < q; ++k) allowed[k] = rng.coin(0.7);
  for (auto c : must) allowed[c] = true;
  return allowed;
}

void expect_grad_ok(const gc::Objective& f, const std::vector<FeatureMatrix>& inputs,
                    const std::vector<FeatureMatrix>& analytic) {
  const auto report = gc::check(f, inputs, analytic);
  EXPECT_LT(report.max_error, gc::kDefaultTolerance);
}

}  // namespace

TEST(CosineLoss, IdenticalRowsGiveZero) {
  Rng rng(1);
  const auto a = rng.matrix(8, 5);
  EXPECT_NEAR(ll::cosine_alignment_loss(a, a).value, 0.0, 1e-15);
}

TEST(CosineLoss, OppositeRowsGiveTwo) {
  Rng rng(2);
  const auto a = rng.matrix(8, 5);
  EXPECT_NEAR(ll::cosine_alignment_loss(a, -a).value, 2.0, 1e-14);
}

TEST(CosineLoss, MatchesOracleAndIgnoresScale) {
  Rng rng(3);
  for (int t = 0; t < kInstances; ++t) {
    const auto a = rng.matrix(1 + rng.integer(0, 30), 1 + rng.integer(0, 8));
    const auto b = rng.matrix(a.rows(), a.cols());
    const double v = ll::cosine_alignment_loss(a, b).value;
    EXPECT_NEAR(v, cosine_oracle(a, b), 1e-12);
    FeatureMatrix scaled = a;
    for (Eigen::Index i = 0; i < scaled.rows(); ++i) scaled.row(i) *= rng.uniform(0.1, 10.0);
    EXPECT_NEAR(ll::cosine_alignment_loss(scaled, b * 3.5).value, v, 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(CosineLoss, EmptyAndShape) {
  EXPECT_EQ(ll::cosine_alignment_loss(FeatureMatrix(0, 4), FeatureMatrix(0, 4)).value, 0.0);
  EXPECT_THROW(ll::cosine_alignment_loss(FeatureMatrix::Ones(2, 3), FeatureMatrix::Ones(3, 3)), lm::Error);
}

TEST(CosineLoss, GradientCheck) {
  Rng rng(4);
  for (int t = 0; t < kInstances; ++t) {
    const std::vector<FeatureMatrix> in{rng.matrix(6, 4), rng.matrix(6, 4)};
    const auto r = ll::cosine_alignment_loss(in[0], in[1]);
    expect_grad_ok([](const auto& x) { return ll::cosine_alignment_loss(x[0], x[1]).value; }, in, r.gradients);
  }
}

TEST(Contrastive, MatchesOracle) {
  Rng rng(5);
  for (int t = 0; t < kInstances; ++t) {
    const std::size_t q = 2 + rng.index(5);
    const auto items = rng.matrix(4 + rng.integer(0, 12), 6);
    const auto text = rng.matrix(static_cast<Eigen::Index>(q), 6);
    const auto cls = rng.labels(static_cast<std::size_t>(items.rows()), static_cast<lm::ClassId>(q));
    const auto allowed = random_allowed(rng, q, cls);
    for (bool norm : {true, false}) {
      ll::ContrastiveOptions opts;
      opts.tau = norm ? 0.2 : 1.0;
      opts.normalize_embeddings = norm;
      EXPECT_NEAR(ll::text_contrastive_loss(items, text, cls, allowed, opts).value,
                  contrastive_oracle(items, text, cls, allowed, opts.tau, norm), 1e-10);
    }
  }
}

TEST(Contrastive, SingleClassIsZero) {
  Rng rng(6);
  const auto items = rng.matrix(7, 4);
  const auto text = rng.matrix(1, 4);
  const std::vector<lm::ClassId> cls(7, 0);
  EXPECT_NEAR(ll::text_contrastive_loss(items, text, cls, {true}).value, 0.0, 1e-12);
}

TEST(Contrastive, SharperWithLowerTemperatureWhenAligned) {
  Rng rng(7);
  const std::size_t q = 4;
  const FeatureMatrix text = FeatureMatrix::Identity(q, q);
  const auto cls = rng.labels(40, q);
  FeatureMatrix items(40, q);
  for (Eigen::Index i = 0; i < 40; ++i) {
    items.row(i) = text.row(cls[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(q); ++j) items(i, j) += rng.uniform(-0.1, 0.1);
  }
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 0.5, 0.1}) {
    ll::ContrastiveOptions opts;
    opts.tau = tau;
    const double v = ll::text_contrastive_loss(items, text, cls, std::vector<bool>(q, true), opts).value;
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Contrastive, PermutationInvariant) {
  Rng rng(8);
  const auto items = rng.matrix(20, 5);
  const auto text = rng.matrix(4, 5);
  const auto cls = rng.labels(20, 4);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  FeatureMatrix p_items(20, 5);
  std::vector<lm::ClassId> p_cls(20);
  for (std::size_t i = 0; i < 20; ++i) {
    p_items.row(static_cast<Eigen::Index>(i)) = items.row(static_cast<Eigen::Index>(perm[i]));
    p_cls[i] = cls[perm[i]];
  }
  const std::vector<bool> all(4, true);
  EXPECT_NEAR(ll::text_contrastive_loss(items, text, cls, all).value,
              ll::text_contrastive_loss(p_items, text, p_cls, all).value, 1e-12);
}

TEST(Contrastive, MaskedNegativesLowerTheLoss) {
  Rng rng(9);
  const auto items = rng.matrix(10, 3);
  const auto text = rng.matrix(5, 3);
  const std::vector<lm::ClassId> cls(10, 1);
  EXPECT_LT(ll::text_contrastive_loss(items, text, cls, {false, true, true, false, false}).value,
            ll::text_contrastive_loss(items, text, cls, std::vector<bool>(5, true)).value);
}

TEST(Contrastive, RejectsBadInputs) {
  const FeatureMatrix items = FeatureMatrix::Ones(2, 3), text = FeatureMatrix::Ones(2, 3);
  const std::vector<lm::ClassId> cls{0, 1};
  ll::ContrastiveOptions opts;
  opts.tau = 0.0;
  EXPECT_THROW(ll::text_contrastive_loss(items, text, cls, {true, true}, opts), lm::Error);
  EXPECT_THROW(ll::text_contrastive_loss(items, text, cls, {true, false}), lm::Error);
  EXPECT_THROW(ll::text_contrastive_loss(items, text, std::vector<lm::ClassId>{0, 2}, {true, true}), lm::Error);
  EXPECT_THROW(ll::text_contrastive_loss(items, FeatureMatrix::Ones(2, 4), cls, {true, true}), lm::Error);
  FeatureMatrix zero_row = items;
  zero_row.row(0).setZero();
  EXPECT_THROW(ll::text_contrastive_loss(zero_row, text, cls, {true, true}), lm::Error);
}

TEST(Contrastive, GradientCheck) {
  Rng rng(10);
  for (int t = 0; t < kInstances; ++t) {
    const std::size_t q = 2 + rng.index(4);
    const std::vector<FeatureMatrix> in{rng.matrix(8, 4)};
    const auto text = rng.matrix(static_cast<Eigen::Index>(q), 4);
    const auto cls = rng.labels(8, static_cast<lm::ClassId>(q));
    const auto allowed = random_allowed(rng, q, cls);
    ll::ContrastiveOptions opts;
    opts.tau = rng.uniform(0.1, 1.0);
    opts.normalize_embeddings = t % 2 == 0;
    auto f = [&](const std::vector<FeatureMatrix>& x) {
      return ll::text_contrastive_loss(x[0], text, cls, allowed, opts).value;
    };
    expect_grad_ok(f, in, ll::text_contrastive_loss(in[0], text, cls, allowed, opts).gradients);
  }
}

TEST(LabelAlignment, SumOfParts) {
  Rng rng(11);
  const auto pl = rng.matrix(6, 4), xl = rng.matrix(6, 4), pf = rng.matrix(9, 3), xf = rng.matrix(6, 3);
  const auto text = rng.matrix(4, 3);
  const auto pc = rng.labels(9, 4), xc = rng.labels(6, 4);
  const std::vector<bool> all(4, true);
  const ll::LabelAlignmentInputs in{pl, xl, pf, xf, text, pc, xc, all};
  const auto r = ll::label_alignment_loss(in);
  EXPECT_NEAR(r.value,
              contrastive_oracle(pf, text, pc, all, 0.07, true) + cosine_oracle(xl, pl) +
                  contrastive_oracle(xf, text, xc, all, 0.07, true),
              1e-9);
}

TEST(LabelAlignment, GradientCheck) {
  Rng rng(12);
  for (int t = 0; t < kInstances; ++t) {
    const std::vector<FeatureMatrix> in{rng.matrix(5, 3), rng.matrix(5, 3), rng.matrix(7, 3), rng.matrix(5, 3)};
    const auto text = rng.matrix(3, 3);
    const auto pc = rng.labels(7, 3), xc = rng.labels(5, 3);
    const std::vector<bool> all(3, true);
    ll::ContrastiveOptions opts;
    opts.tau = 0.5;
    auto eval = [&](const std::vector<FeatureMatrix>& x) {
      return ll::label_alignment_loss({x[0], x[1], x[2], x[3], text, pc, xc, all, opts});
    };
    const auto r = eval(in);
    const auto& pp = r.pixel_point.gradients;
    expect_grad_ok([&](const auto& x) { return eval(x).value; }, in,
                   {pp[1], pp[0], r.point_text.gradients[0], r.pixel_text.gradients[0]});
  }
}

TEST(CrossEntropy, UniformLogits) {
  const FeatureMatrix logits = FeatureMatrix::Constant(5, 4, 0.3);
  const std::vector<lm::ClassId> t{0, 1, 2, 3, 1};
  EXPECT_NEAR(ll::cross_entropy_loss(logits, t).value, std::log(4.0), 1e-14);
}

TEST(CrossEntropy, ConfidentAndWrong) {
  FeatureMatrix logits = FeatureMatrix::Zero(1, 3);
  logits(0, 1) = 50.0;
  EXPECT_LT(ll::cross_entropy_loss(logits, std::vector<lm::ClassId>{1}).value, 1e-20);
  EXPECT_NEAR(ll::cross_entropy_loss(logits, std::vector<lm::ClassId>{0}).value, 50.0, 1e-12);
  logits(0, 1) = 1000.0;
  EXPECT_NEAR(ll::cross_entropy_loss(logits, std::vector<lm::ClassId>{2}).value, 1000.0, 1e-9);
}

TEST(CrossEntropy, MatchesOracleWithIgnore) {
  Rng rng(13);
  for (int t = 0; t < kInstances; ++t) {
    const auto logits = rng.matrix(10, 5, -3.0, 3.0);
    auto tg = rng.labels(10, 5);
    tg[rng.index(10)] = 255;
    EXPECT_NEAR(ll::cross_entropy_loss(logits, tg).value, ce_oracle(logits, tg, 255), 1e-12);
  }
  EXPECT_THROW(ll::cross_entropy_loss(FeatureMatrix::Zero(2, 3), std::vector<lm::ClassId>{255, 255}), lm::Error);
  EXPECT_THROW(ll::cross_entropy_loss(FeatureMatrix::Zero(2, 3), std::vector<lm::ClassId>{0, 3}), lm::Error);
}

TEST(CrossEntropy, GradientCheck) {
  Rng rng(14);
  for (int t = 0; t < kInstances; ++t) {
    const std::vector<FeatureMatrix> in{rng.matrix(8, 4, -2.0, 2.0)};
    auto tg = rng.labels(8, 4);
    tg[0] = 255;
    expect_grad_ok([&](const auto& x) { return ll::cross_entropy_loss(x[0], tg).value; }, in,
                   ll::cross_entropy_loss(in[0], tg).gradients);
  }
}

TEST(Lovasz, VertexEqualsOneMinusJaccard) {
  Rng rng(15);
  for (int t = 0; t < kInstances; ++t) {
    const lm::ClassId q = 4;
    const auto gt = rng.labels(30, q);
    const auto pred = rng.labels(30, q);
    FeatureMatrix probs = FeatureMatrix::Zero(30, q);
    for (Eigen::Index i = 0; i < 30; ++i) probs(i, pred[static_cast<std::size_t>(i)]) = 1.0;
    std::set<lm::ClassId> present(gt.begin(), gt.end());
    double expect = 0.0;
    for (auto c : present) {
      int inter = 0, uni = 0;
      for (std::size_t i = 0; i < 30; ++i) {
        inter += gt[i] == c && pred[i] == c;
        uni += gt[i] == c || pred[i] == c;
      }
      expect += 1.0 - static_cast<double>(inter) / uni;
    }
    expect /= static_cast<double>(present.size());
    EXPECT_NEAR(ll::lovasz_softmax_loss(probs, gt).value, expect, 1e-12);
  }
}

TEST(Lovasz, MatchesPrefixOracle) {
  Rng rng(16);
  for (int t = 0; t < kInstances; ++t) {
    const auto probs = softmax_rows(rng.matrix(12, 3, -2.0, 2.0));
    const auto tg = rng.labels(12, 3);
    EXPECT_NEAR(ll::lovasz_softmax_loss(probs, tg).value, lovasz_oracle(probs, tg), 1e-12);
  }
}

TEST(Lovasz, PerfectPredictionAndValidation) {
  FeatureMatrix probs = FeatureMatrix::Zero(3, 2);
  probs(0, 0) = probs(1, 1) = probs(2, 1) = 1.0;
  EXPECT_NEAR(ll::lovasz_softmax_loss(probs, std::vector<lm::ClassId>{0, 1, 1}).value, 0.0, 1e-15);
  probs(0, 0) = 0.5;
  try {
    ll::lovasz_softmax_loss(probs, std::vector<lm::ClassId>{0, 1, 1});
    FAIL();
  } catch (const lm::Error& e) {
    EXPECT_EQ(e.kind(), lm::ErrorKind::invalid_probability);
  }
}

TEST(Lovasz, GradientCheck) {
  Rng rng(17);
  ll::LovaszOptions opts;
  opts.check_probabilities = false;
  for (int t = 0; t < kInstances; ++t) {
    const std::vector<FeatureMatrix> in{softmax_rows(rng.matrix(10, 3, -2.0, 2.0))};
    const auto tg = rng.labels(10, 3);
    expect_grad_ok([&](const auto& x) { return ll::lovasz_softmax_loss(x[0], tg, 255, opts).value; }, in,
                   ll::lovasz_softmax_loss(in[0], tg, 255, opts).gradients);
  }
}

TEST(L1Offset, MaskedMean) {
  FeatureMatrix pred(3, 3), target = FeatureMatrix::Zero(3, 3);
  pred << 1, -2, 3, 100, 100, 100, 0.5, 0.5, -0.5;
  const auto r = ll::l1_offset_loss(pred, target, {true, false, true});
  EXPECT_NEAR(r.value, (1 + 2 + 3 + 0.5 + 0.5 + 0.5) / 6.0, 1e-15);
  EXPECT_EQ(r.gradients[0].row(1).norm(), 0.0);
  EXPECT_EQ(ll::l1_offset_loss(pred, target, {false, false, false}).value, 0.0);
  EXPECT_THROW(ll::l1_offset_loss(pred, target, {true}), lm::Error);
}

TEST(L1Offset, GradientCheck) {
  Rng rng(18);
  for (int t = 0; t < kInstances; ++t) {
    const std::vector<FeatureMatrix> in{rng.matrix(9, 3), rng.matrix(9, 3)};
    std::vector<bool> mask(9);
    for (std::size_t i = 0; i < 9; ++i) mask[i] = rng.coin();
    mask[0] = true;
    expect_grad_ok([&](const auto& x) { return ll::l1_offset_loss(x[0], x[1], mask).value; }, {in[0], in[1]},
                   {ll::l1_offset_loss(in[0], in[1], mask).gradients[0]});
  }
}

TEST(Objective, SumOfParts) {
  const auto o = ll::total_objective(ll::ObjectiveParts{1, 2, 3, 4, 5});
  EXPECT_EQ(o.total, 15.0);
  ASSERT_EQ(o.parts.size(), 5u);
  EXPECT_EQ(o.parts[1].first, "label");
}

TEST(Objective, OrderSymmetricAndExact) {
  Rng rng(19);
  std::vector<std::pair<std::string, double>> parts;
  for (int k = 0; k < 5; ++k) parts.emplace_back("p" + std::to_string(k), rng.uniform(0.0, 1.0) * std::pow(10.0, k * 3));
  const double ref = ll::total_objective(parts).total;
  for (int t = 0; t < 10; ++t) {
    std::shuffle(parts.begin(), parts.end(), rng.engine());
    EXPECT_EQ(ll::total_objective(parts).total, ref);
  }
  EXPECT_THROW(ll::total_objective({{"x", std::nan("")}}), lm::Error);
}

namespace {

ll::AffineLayer layer(Rng& rng, Eigen::Index out, Eigen::Index in, ll::Activation act) {
  return {rng.matrix(out, in), Eigen::VectorXd(rng.matrix(out, 1)), act};
}

std::vector<double> apply_ref(const ll::AffineLayer& l, const std::vector<double>& x) {
  std::vector<double> y(static_cast<std::size_t>(l.weights.rows()));
  for (std::size_t r = 0; r < y.size(); ++r) {
    double s = l.bias(static_cast<Eigen::Index>(r));
    for (std::size_t c = 0; c < x.size(); ++c) s += l.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * x[c];
    y[r] = s;
  }
  if (l.activation == ll::Activation::relu)
    for (auto& v : y) v = std::max(v, 0.0);
  if (l.activation == ll::Activation::sigmoid)
    for (auto& v : y) v = 1.0 / (1.0 + std::exp(-v));
  if (l.activation == ll::Activation::softmax) {
    double z = 0.0;
    for (auto v : y) z += std::exp(v);
    for (auto& v : y) v = std::exp(v) / z;
  }
  return y;
}

std::vector<double> run_ref(const std::vector<ll::AffineLayer>& ls, std::vector<double> x) {
  for (const auto& l : ls) x = apply_ref(l, x);
  return x;
}

}  // namespace

TEST(Fusion, MatchesReferenceEvaluator) {
  Rng rng(20);
  for (int t = 0; t < kInstances; ++t) {
    const Eigen::Index cv = 2 + rng.integer(0, 4), hw = 1 + rng.integer(0, 10), c = 1 + rng.integer(0, 4);
    const auto concat = rng.matrix(hw, cv);
    const std::vector<ll::AffineLayer> b1{layer(rng, 5, cv, ll::Activation::relu), layer(rng, cv, 5, ll::Activation::none)};
    const std::vector<ll::AffineLayer> b2{layer(rng, cv, cv, ll::Activation::softmax)};
    const std::vector<ll::AffineLayer> head{layer(rng, c, cv, ll::Activation::none)};
    const auto out = ll::domain_fusion_forward(concat, b1, b2, head);

    std::vector<double> pool(static_cast<std::size_t>(cv), 0.0);
    for (Eigen::Index r = 0; r < hw; ++r)
      for (Eigen::Index j = 0; j < cv; ++j) pool[static_cast<std::size_t>(j)] += concat(r, j) / static_cast<double>(hw);
    const auto g1 = run_ref(b1, pool), g2 = run_ref(b2, pool);
    for (Eigen::Index r = 0; r < hw; ++r) {
      std::vector<double> x(static_cast<std::size_t>(cv));
      for (std::size_t j = 0; j < x.size(); ++j) {
        const double gate = g1[j] * g2[j];
        EXPECT_NEAR(out.gate(static_cast<Eigen::Index>(j)), gate, 1e-12);
        const double v = concat(r, static_cast<Eigen::Index>(j));
        x[j] = v / (1.0 + std::exp(-gate)) + v;
      }
      const auto y = run_ref(head, x);
      for (Eigen::Index k = 0; k < c; ++k) EXPECT_NEAR(out.features(r, k), y[static_cast<std::size_t>(k)], 1e-12);
    }
  }
}

TEST(Fusion, ZeroGateHalvesTheResidual) {
  // branch1 == 0 everywhere forces F_m = 0 and sigmoid(0) = 1/2, so the head
  // sees 1.5 x.
  Rng rng(21);
  const Eigen::Index cv = 3;
  const auto concat = rng.matrix(4, cv);
  ll::AffineLayer zero{FeatureMatrix::Zero(cv, cv), Eigen::VectorXd::Zero(cv), ll::Activation::none};
  const std::vector<ll::AffineLayer> b1{zero};
  const std::vector<ll::AffineLayer> b2{layer(rng, cv, cv, ll::Activation::softmax)};
  ll::AffineLayer ident{FeatureMatrix::Identity(cv, cv), Eigen::VectorXd::Zero(cv), ll::Activation::none};
  const auto out = ll::domain_fusion_forward(concat, b1, b2, std::vector<ll::AffineLayer>{ident});
  EXPECT_LT((out.features - 1.5 * concat).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Fusion, RejectsBrokenChains) {
  Rng rng(22);
  const auto concat = rng.matrix(4, 3);
  const std::vector<ll::AffineLayer> ok{layer(rng, 3, 3, ll::Activation::softmax)};
  const std::vector<ll::AffineLayer> no_softmax{layer(rng, 3, 3, ll::Activation::relu)};
  const std::vector<ll::AffineLayer> wrong_dim{layer(rng, 2, 3, ll::Activation::none)};
  const std::vector<ll::AffineLayer> head{layer(rng, 2, 3, ll::Activation::none)};
  EXPECT_THROW(ll::domain_fusion_forward(concat, wrong_dim, ok, head), lm::Error);
  EXPECT_THROW(ll::domain_fusion_forward(concat, ok, no_softmax, head), lm::Error);
  EXPECT_THROW(ll::domain_fusion_forward(concat, ok, ok, std::vector<ll::AffineLayer>{}), lm::Error);
  EXPECT_NO_THROW(ll::domain_fusion_forward(concat, ok, ok, head));
}
