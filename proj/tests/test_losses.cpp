#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fairdisco/losses.hpp"
#include "fairdisco/rng.hpp"
#include "fairdisco/tensor.hpp"
#include "oracles.hpp"

using namespace fairdisco;

namespace {

Tensor random_prob_rows(int batch, int cols, Rng& rng) {
  Tensor t = Tensor::zeros({batch, cols});
  for (int b = 0; b < batch; ++b) {
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double e = -std::log(std::max(rng.uniform(), 1e-12));
      t.at(b, c) = e;
      sum += e;
    }
    for (int c = 0; c < cols; ++c) t.at(b, c) /= sum;
  }
  return t;
}

std::vector<int> random_labels(int batch, int num_classes, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(batch));
  for (auto& v : y) v = static_cast<int>(rng.uniform_int(0, num_classes - 1));
  return y;
}

// For finite-difference probes: keeps every probability >= 0.4/cols so the
// 1/p^3 curvature of the log terms stays within the step's truncation budget.
Tensor smoothed_prob_rows(int batch, int cols, Rng& rng) {
  Tensor t = random_prob_rows(batch, cols, rng);
  for (auto& v : t.data) v = 0.6 * v + 0.4 / cols;
  return t;
}

}  // namespace

TEST_CASE("target loss on frozen examples") {
  const Tensor perfect = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
  CHECK(target_loss(perfect, std::vector<int>{0}) == doctest::Approx(0.0).epsilon(1e-9));

  const Tensor half = Tensor::from({1, 3}, {0.5, 0.25, 0.25});
  CHECK(target_loss(half, std::vector<int>{0}) ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));

  const Tensor two = Tensor::from({2, 2}, {0.5, 0.5, 0.75, 0.25});
  CHECK(target_loss(two, std::vector<int>{0, 1}) ==
        doctest::Approx(1.0397207708399179).epsilon(1e-12));
}

TEST_CASE("target loss errors and weighting") {
  const Tensor p = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK_THROWS_AS(target_loss(p, std::vector<int>{2}), std::out_of_range);
  CHECK_THROWS_AS(target_loss(p, std::vector<int>{-1}), std::out_of_range);

  const Tensor two = Tensor::from({2, 2}, {0.5, 0.5, 0.25, 0.75});
  const std::vector<int> y{0, 1};
  const std::vector<double> w{2.0, 0.0};
  // weighted mean: (2*ln2 + 0) / 2 = ln2
  CHECK(target_loss(two, y, w) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("confusion loss on frozen examples") {
  Tensor uniform6 = Tensor::zeros({1, 6});
  uniform6.fill(1.0 / 6.0);
  CHECK(confusion_loss(uniform6) == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  const Tensor skewed = Tensor::from({1, 2}, {0.9, 0.1});
  CHECK(confusion_loss(skewed) == doctest::Approx(1.2039728043259361).epsilon(1e-12));

  Tensor uniform3 = Tensor::zeros({1, 3});
  uniform3.fill(1.0 / 3.0);
  CHECK(confusion_loss(uniform3) == doctest::Approx(1.0986122886681098).epsilon(1e-12));

  const Tensor single = Tensor::from({1, 1}, {1.0});
  CHECK_THROWS(confusion_loss(single));  // confusion over one group is meaningless
}

TEST_CASE("confusion loss is bounded below by ln N with equality only at uniform") {
  Rng rng(11);
  for (int n : {2, 3, 6}) {
    const double floor = std::log(static_cast<double>(n));
    for (int trial = 0; trial < 500; ++trial) {
      const Tensor p = random_prob_rows(1, n, rng);
      CHECK(confusion_loss(p) - floor >= -1e-9);
    }
    Tensor uniform = Tensor::zeros({1, n});
    uniform.fill(1.0 / n);
    CHECK(std::abs(confusion_loss(uniform) - floor) < 1e-9);
  }
}

TEST_CASE("sensitive loss on frozen examples") {
  const Tensor sure = Tensor::from({1, 2}, {1.0, 0.0});
  CHECK(sensitive_loss(sure, std::vector<int>{0}) == doctest::Approx(0.0).epsilon(1e-9));

  const Tensor p = Tensor::from({1, 2}, {0.25, 0.75});
  CHECK(sensitive_loss(p, std::vector<int>{1}) ==
        doctest::Approx(0.2876820724517809).epsilon(1e-12));

  const Tensor even = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK(sensitive_loss(even, std::vector<int>{0}) ==
        doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("contrastive loss on frozen examples") {
  // Identical same-class embeddings, no negatives: -log(1) = 0.
  const Tensor twin = Tensor::from({2, 2}, {0.6, 0.8, 0.6, 0.8});
  CHECK(contrastive_loss(twin, std::vector<int>{1, 1}, 0.5) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // One positive at cos=1, one negative at cos=0, tau=1: -ln(e/(e+1)).
  const Tensor tri = Tensor::from({3, 2}, {1.0, 0.0, 1.0, 0.0, 0.0, 1.0});
  CHECK(contrastive_loss(tri, std::vector<int>{0, 0, 1}, 1.0) ==
        doctest::Approx(0.3132616875182228).epsilon(1e-12));
}

TEST_CASE("contrastive loss errors") {
  const Tensor one = Tensor::from({1, 2}, {1.0, 0.0});
  CHECK_THROWS(contrastive_loss(one, std::vector<int>{0}, 1.0));

  const Tensor zero_norm = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 0.0});
  CHECK_THROWS(contrastive_loss(zero_norm, std::vector<int>{0, 0}, 1.0));

  const Tensor ok = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
  CHECK_THROWS(contrastive_loss(ok, std::vector<int>{0, 0}, 0.0));
}

TEST_CASE("contrastive loss matches the brute-force oracle on random batches") {
  Rng rng(202);
  for (int trial = 0; trial < 300; ++trial) {
    const int batch = static_cast<int>(rng.uniform_int(2, 8));
    const int dim = static_cast<int>(rng.uniform_int(2, 6));
    const int classes = static_cast<int>(rng.uniform_int(1, 4));
    const Tensor emb = Tensor::randn({batch, dim}, rng);
    const auto labels = random_labels(batch, classes, rng);
    const double tau = rng.uniform(0.1, 2.0);
    const double ours = contrastive_loss(emb, labels, tau);
    const double ref = oracles::contrastive_brute_force(emb, labels, tau);
    CHECK(std::abs(ours - ref) < 1e-5);
  }
}

TEST_CASE("contrastive loss is scale- and permutation-invariant") {
  Rng rng(303);
  const Tensor emb = Tensor::randn({6, 4}, rng);
  const std::vector<int> labels{0, 1, 0, 2, 1, 0};
  const double base = contrastive_loss(emb, labels, 0.3);

  for (const double c : {0.5, 2.0, 10.0}) {
    Tensor scaled = emb;
    for (auto& v : scaled.data) v *= c;
    CHECK(std::abs(contrastive_loss(scaled, labels, 0.3) - base) < 1e-6);
  }

  const std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Tensor shuffled = Tensor::zeros(emb.shape);
  std::vector<int> shuffled_labels(labels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (int k = 0; k < emb.dim(1); ++k)
      shuffled.at(static_cast<int>(i), k) = emb.at(perm[i], k);
    shuffled_labels[i] = labels[static_cast<std::size_t>(perm[i])];
  }
  CHECK(std::abs(contrastive_loss(shuffled, shuffled_labels, 0.3) - base) < 1e-9);
}

TEST_CASE("gradients match central finite differences") {
  Rng rng(404);
  const double step = 1e-4;
  const double tol = 1e-4;

  for (int trial = 0; trial < 25; ++trial) {
    const int batch = static_cast<int>(rng.uniform_int(2, 5));
    const int m = static_cast<int>(rng.uniform_int(2, 4));
    const Tensor probs = smoothed_prob_rows(batch, m, rng);
    const auto y = random_labels(batch, m, rng);

    const auto tg = target_loss_grad(probs, y);
    const auto tg_fd = oracles::finite_difference_grad(
        [&](const Tensor& x) { return target_loss(x, y); }, probs, step);
    CHECK(oracles::max_relative_error(tg.grad, tg_fd) < tol);

    const auto cg = confusion_loss_grad(probs);
    const auto cg_fd = oracles::finite_difference_grad(
        [&](const Tensor& x) { return confusion_loss(x); }, probs, step);
    CHECK(oracles::max_relative_error(cg.grad, cg_fd) < tol);

    const auto sg = sensitive_loss_grad(probs, y);
    const auto sg_fd = oracles::finite_difference_grad(
        [&](const Tensor& x) { return sensitive_loss(x, y); }, probs, step);
    CHECK(oracles::max_relative_error(sg.grad, sg_fd) < tol);

    const int dim = static_cast<int>(rng.uniform_int(2, 5));
    const Tensor emb = Tensor::randn({batch, dim}, rng);
    const double tau = rng.uniform(0.2, 1.0);
    const auto kg = contrastive_loss_grad(emb, y, tau);
    const auto kg_fd = oracles::finite_difference_grad(
        [&](const Tensor& x) { return contrastive_loss(x, y, tau); }, emb, step);
    CHECK(oracles::max_relative_error(kg.grad, kg_fd) < tol);
  }
}

TEST_CASE("total loss composition") {
  LossWeights w;
  w.alpha = 1.0;
  w.beta = 1.0;
  const auto all_ones = total_loss({1.0, 1.0, 1.0, 1.0, 0.0}, w);
  CHECK(all_ones.value == doctest::Approx(4.0).epsilon(1e-12));

  LossWeights w2;
  w2.alpha = 0.5;
  w2.beta = 2.0;
  const auto mixed = total_loss({0.5, 1.7918, 0.6931, 0.3133, 0.0}, w2);
  CHECK(mixed.value == doctest::Approx(2.7156).epsilon(1e-9));
  CHECK(std::abs(mixed.parts.l_total -
                 (mixed.parts.l_c + w2.alpha * mixed.parts.l_conf + mixed.parts.l_s +
                  w2.beta * mixed.parts.l_contr)) < 1e-6);

  LossWeights zero;
  zero.alpha = 0.0;
  zero.beta = 0.0;
  const auto reduced = total_loss({0.7, 9.9, 0.3, 9.9, 0.0}, zero);
  CHECK(reduced.value == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS(total_loss({std::nan(""), 0.0, 0.0, 0.0, 0.0}, w));
}

TEST_CASE("total loss is linear in alpha and beta") {
  Rng rng(505);
  for (int trial = 0; trial < 20; ++trial) {
    LossReport parts{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(), 0.0};
    LossWeights wa{rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), 0.1};
    LossWeights wb = wa;
    wb.alpha = rng.uniform(0.0, 3.0);
    const double slope_a =
        (total_loss(parts, wb).value - total_loss(parts, wa).value) / (wb.alpha - wa.alpha);
    CHECK(slope_a == doctest::Approx(parts.l_conf).epsilon(1e-9));

    LossWeights wc = wa;
    wc.beta = wa.beta + 1.0;
    CHECK(total_loss(parts, wc).value - total_loss(parts, wa).value ==
          doctest::Approx(parts.l_contr).epsilon(1e-9));
  }
}

TEST_CASE("scope tables") {
  const auto standard = ScopeTable::standard();
  CHECK(standard.allows(LossTerm::Target, ParamGroup::FeatureExtractor));
  CHECK(standard.allows(LossTerm::Target, ParamGroup::TargetHead));
  CHECK(standard.allows(LossTerm::Confusion, ParamGroup::FeatureExtractor));
  CHECK_FALSE(standard.allows(LossTerm::Confusion, ParamGroup::SensitiveHead));
  CHECK(standard.allows(LossTerm::Sensitive, ParamGroup::SensitiveHead));
  CHECK_FALSE(standard.allows(LossTerm::Sensitive, ParamGroup::FeatureExtractor));
  CHECK(standard.allows(LossTerm::Contrastive, ParamGroup::ProjectionHead));
  CHECK(standard.allows(LossTerm::Contrastive, ParamGroup::FeatureExtractor));

  const auto literal = ScopeTable::literal();
  CHECK(literal.allows(LossTerm::Confusion, ParamGroup::SensitiveHead));

  const auto composed = total_loss({1, 1, 1, 1, 0}, LossWeights{}, literal);
  CHECK(composed.scopes == literal);
}
