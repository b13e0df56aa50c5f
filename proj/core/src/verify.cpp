#include "kest/verify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <Eigen/Dense>

#include "kest/error.hpp"
#include "kest/losses.hpp"
#include "kest/model.hpp"
#include "kest/rng.hpp"
#include "kest/selftrain.hpp"

namespace kest {

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

void VerifyReport::add(std::string name, bool ok, std::string detail) {
  checks.push_back({std::move(name), ok, std::move(detail)});
}

void VerifyReport::append(const VerifyReport& other) {
  checks.insert(checks.end(), other.checks.begin(), other.checks.end());
}

std::string VerifyReport::to_text() const {
  std::ostringstream os;
  for (const auto& c : checks) os << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  return os.str();
}

namespace {

std::string sci(double x) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << x;
  return os.str();
}

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double total = 0;
  for (auto& v : p) {
    v = 0.01 + uniform01(rng);  // strictly positive so every KL is finite
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

double cross_entropy(const std::vector<double>& p, const std::vector<double>& q) {
  double h = 0;
  for (std::size_t i = 0; i < p.size(); ++i) h -= p[i] * std::log(q[i]);
  return h;
}

double entropy(const std::vector<double>& p) { return cross_entropy(p, p); }

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) d += p[i] * std::log(p[i] / q[i]);
  return d;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

}  // namespace

VerifyReport verify_lemma1(std::uint64_t seed, int trials, double tolerance) {
  VerifyReport report;
  double worst = 0;
  std::string offending;
  for (int t = 0; t < trials; ++t) {
    Rng rng = make_rng(seed, "lemma1", static_cast<std::uint64_t>(t));
    // Joint space X x Y with |X| <= 16 and |Y| = 2.
    const std::size_t size = 2 * (1 + uniform_index(rng, 16));
    const auto q = random_distribution(rng, size);
    const auto p_prev = random_distribution(rng, size);
    const auto p = random_distribution(rng, size);
    double n = static_cast<double>(1 + uniform_index(rng, 100));
    double m = static_cast<double>(uniform_index(rng, 100));
    if (t == 0) {
      m = 0;  // alpha = 0 edge
    } else if (t == 1) {
      m = n;  // alpha = 0.5
    }
    const double alpha = m / (n + m);
    const double lhs = (n * cross_entropy(q, p) + m * cross_entropy(p_prev, p)) / (n + m);
    const double constant = (1 - alpha) * entropy(q) + alpha * entropy(p_prev);
    const double rhs = (1 - alpha) * kl(q, p) + alpha * kl(p_prev, p) + constant;
    const double err = std::abs(lhs - rhs);
    if (err > worst) worst = err;
    if (err > tolerance && offending.empty()) {
      offending = "trial " + std::to_string(t) + " N=" + std::to_string(n) + " M=" + std::to_string(m) + " Q=[" +
                  join(q) + "] P'=[" + join(p_prev) + "] P=[" + join(p) + "]";
    }
  }
  report.add("lemma1.mixed_cross_entropy", offending.empty(),
             offending.empty() ? std::to_string(trials) + " triples, max |lhs-rhs| = " + sci(worst) : offending);
  return report;
}

namespace {

using MatD = Matrix<double>;

MatD random_matrix(Rng& rng, Index rows, Index cols) {
  MatD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
  return m;
}

/// Gram matrix of the kernel bank between the rows of flattened samples.
MatD gram(const MatD& a, const MatD& b, const std::vector<double>& bank) {
  const Eigen::VectorXd na = a.rowwise().squaredNorm();
  const Eigen::VectorXd nb = b.rowwise().squaredNorm();
  MatD d2 = (-2.0 * a * b.transpose()).colwise() + na;
  d2 = d2.rowwise() + nb.transpose();
  d2 = d2.cwiseMax(0.0);
  MatD k = MatD::Zero(a.rows(), b.rows());
  for (double s : bank) k += (-d2 / (2.0 * s * s)).array().exp().matrix();
  return k;
}

MatD flatten(const std::vector<MatD>& xs) {
  MatD out(static_cast<Index>(xs.size()), xs.front().size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(xs[i].data(), xs[i].size());
  }
  return out;
}

double pair_sum(const std::vector<MatD>& a, const std::vector<MatD>& b, const std::vector<double>& bank,
                bool skip_diagonal) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (skip_diagonal && i == j) continue;
      s += rbf_kernel(a[i], b[j], bank);
    }
  }
  return s;
}

}  // namespace

VerifyReport verify_mmd_identity(std::uint64_t seed, int trials, double tolerance) {
  VerifyReport report;
  double worst[3] = {0, 0, 0};
  std::string first_failure[3];
  for (int t = 0; t < trials; ++t) {
    Rng rng = make_rng(seed, "mmd-identity", static_cast<std::uint64_t>(t));
    const auto n = static_cast<std::size_t>(2 + uniform_index(rng, 7));  // 2..8
    const auto rows = static_cast<Index>(1 + uniform_index(rng, 4));
    const auto cols = static_cast<Index>(1 + uniform_index(rng, 4));
    std::vector<MatD> x, y, u;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(random_matrix(rng, rows, cols));
      y.push_back(random_matrix(rng, rows, cols));
    }
    const auto n_u = static_cast<std::size_t>(1 + uniform_index(rng, 8));
    for (std::size_t i = 0; i < n_u; ++i) u.push_back(random_matrix(rng, rows, cols));
    std::vector<double> bank;
    if (t % 2 == 0) {
      bank = {0.5 + 2.0 * uniform01(rng)};
    } else {
      bank = median_bandwidths(x, y, 1 + static_cast<int>(uniform_index(rng, 3)));
    }
    const double nn = static_cast<double>(n);

    // (i) three pairwise sums vs Gram-matrix means.
    const double sum_form = pair_sum(x, x, bank, true) / (nn * (nn - 1)) +
                            pair_sum(y, y, bank, true) / (nn * (nn - 1)) - 2.0 * pair_sum(x, y, bank, false) / (nn * nn);
    const MatD fx = flatten(x), fy = flatten(y);
    const MatD kxx = gram(fx, fx, bank), kyy = gram(fy, fy, bank), kxy = gram(fx, fy, bank);
    const double gram_form = (kxx.sum() - kxx.trace()) / (nn * (nn - 1)) + (kyy.sum() - kyy.trace()) / (nn * (nn - 1)) -
                             2.0 * kxy.mean();
    // (ii) the loss drops only the target-only term.
    const double loss_route = loss_mmd(x, y, bank) + (kyy.sum() - kyy.trace()) / (nn * (nn - 1));
    // (iii) contaminated target: || mu_P' + mu_U - mu_P ||^2 as one signed
    // weighted Gram form vs the expanded inner products.
    std::vector<MatD> all = x;
    all.insert(all.end(), u.begin(), u.end());
    all.insert(all.end(), y.begin(), y.end());
    Eigen::VectorXd w(static_cast<Index>(all.size()));
    for (std::size_t i = 0; i < all.size(); ++i) {
      w(static_cast<Index>(i)) = i < n ? 1.0 / nn : (i < n + n_u ? 1.0 / static_cast<double>(n_u) : -1.0 / nn);
    }
    const MatD fa = flatten(all);
    const double combined = w.dot(gram(fa, fa, bank) * w);
    const MatD fu = flatten(u);
    const double uu = gram(fu, fu, bank).mean();
    const double xu = gram(fx, fu, bank).mean();
    const double uy = gram(fu, fy, bank).mean();
    const double biased = kxx.mean() + kyy.mean() - 2.0 * kxy.mean();
    const double expanded = biased + uu + 2.0 * xu - 2.0 * uy;

    const double errs[3] = {std::abs(sum_form - gram_form), std::abs(loss_route - sum_form),
                            std::abs(combined - expanded)};
    for (int k = 0; k < 3; ++k) {
      worst[k] = std::max(worst[k], errs[k]);
      if (errs[k] > tolerance && first_failure[k].empty()) {
        first_failure[k] = "trial " + std::to_string(t) + " N=" + std::to_string(n) + " error " + sci(errs[k]);
      }
    }
  }
  const char* names[3] = {"mmd.gram_form", "mmd.loss_plus_target_term", "mmd.noisy_target_expansion"};
  for (int k = 0; k < 3; ++k) {
    report.add(names[k], first_failure[k].empty(),
               first_failure[k].empty() ? std::to_string(trials) + " instances, max error " + sci(worst[k])
                                        : first_failure[k]);
  }
  return report;
}

namespace {

ModelConfig gradient_model_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_label = 4;
  c.d_ff = 16;
  c.vocab_size = special::kCount + 7;
  c.max_len = 8;
  c.num_labels = 2;
  c.dropout = 0.0;
  return c;
}

TokenSequence random_sequence(Rng& rng, const ModelConfig& c, int content) {
  std::vector<TokenId> ids;
  for (int i = 0; i < content; ++i) {
    ids.push_back(special::kCount + static_cast<TokenId>(uniform_index(rng, c.vocab_size - special::kCount)));
  }
  return TokenSequence::from_content(ids, c.max_len);
}

struct GradientProblem {
  std::string name;
  std::function<ag::Var<double>(ag::Tape<double>&, const ModelD&)> loss;
};

}  // namespace

VerifyReport verify_gradients(const GradientCheckConfig& config) {
  if (config.precision != Precision::kFloat64) {
    throw ConfigError("gradient checks require float64 precision");
  }
  const ModelConfig mc = gradient_model_config();
  ModelD model = ModelD::initialized(mc, config.seed);
  Rng rng = make_rng(config.seed, "gradcheck");
  // Move every parameter off its structured initial value.
  for (auto* p : model.parameters()) {
    for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.3 * normal01(rng);
  }

  const TokenSequence s1 = random_sequence(rng, mc, 4);
  const TokenSequence s2 = random_sequence(rng, mc, 5);
  MaskVector mask1;
  mask1.bits = {1, 0, 1, 1};
  MaskVector mask2;
  mask2.bits = {0, 1, 1, 0, 1};

  // Pseudo-text group with constant soft targets and a fixed bandwidth bank.
  std::vector<PseudoTextItem> items;
  for (int i = 0; i < 3; ++i) {
    PseudoTextItem item;
    item.hard_tokens = random_sequence(rng, mc, 3 + i);
    item.mask.bits.assign(static_cast<std::size_t>(item.hard_tokens.content_length()), 0);
    item.mask.bits[static_cast<std::size_t>(i % item.mask.size())] = 1;
    item.mask.bits.back() = 1;
    item.masked_input = apply_mask(item.hard_tokens, item.mask);
    item.label = 1;
    items.push_back(std::move(item));
  }
  std::vector<MatD> targets;
  for (int i = 0; i < 3; ++i) targets.push_back(random_matrix(rng, mc.max_len, mc.d_model) * 0.3);
  std::vector<double> bank;
  {
    ag::Tape<double> tape(false);
    std::vector<MatD> outs;
    for (const auto& item : items) outs.push_back(nag_soft_output(tape, model, item).value());
    bank = median_bandwidths(outs, targets, 1);
  }

  const std::vector<GradientProblem> problems = {
      {"grad.loss_ag",
       [&](ag::Tape<double>& t, const ModelD& m) {
         return ag::add(loss_ag(m.forward_ag(t, s1, 0), s1), loss_ag(m.forward_ag(t, s2, 1), s2));
       }},
      {"grad.loss_cls",
       [&](ag::Tape<double>& t, const ModelD& m) {
         return ag::add(loss_cls(m.forward_cls(t, s1), 0), loss_cls(m.forward_cls(t, s2), 1));
       }},
      {"grad.loss_nag",
       [&](ag::Tape<double>& t, const ModelD& m) {
         return ag::add(loss_nag(m.forward_nag(t, apply_mask(s1, mask1), 1), s1, mask1),
                        loss_nag(m.forward_nag(t, apply_mask(s2, mask2), 0), s2, mask2));
       }},
      {"grad.loss_ker",
       [&](ag::Tape<double>& t, const ModelD& m) {
         std::vector<ag::Var<double>> nag, agv;
         for (const auto& item : items) {
           nag.push_back(nag_soft_output(t, m, item));
           agv.push_back(ag_soft_output(t, m, item));
         }
         return ag::add(loss_mmd(nag, targets, bank), loss_mmd(agv, targets, bank));
       }},
  };

  VerifyReport report;
  for (const auto& problem : problems) {
    model.zero_grad();
    {
      ag::Tape<double> tape;
      tape.backward(problem.loss(tape, model));
    }
    auto eval = [&]() {
      ag::Tape<double> tape(false);
      return problem.loss(tape, model).scalar();
    };
    std::size_t entries = 0;
    double worst_rel = 0;
    std::string worst_at;
    std::string failure;
    for (auto* p : model.parameters()) {
      for (Index i = 0; i < p->value.size(); ++i) {
        double& v = p->value.data()[i];
        const double saved = v;
        const double h = config.step;
        auto at = [&](double offset) {
          v = saved + offset;
          return eval();
        };
        // Fourth-order central stencil.
        const double numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
        v = saved;
        const double analytic = p->grad.size() ? p->grad.data()[i] : 0.0;
        const double scale = std::max(std::abs(numeric), std::abs(analytic));
        const double diff = std::abs(numeric - analytic);
        if (scale > config.abs_tolerance && diff / scale > worst_rel) {
          worst_rel = diff / scale;
          worst_at = p->name + "[" + std::to_string(i) + "]";
        }
        if (diff > config.rel_tolerance * scale + config.abs_tolerance && failure.empty()) {
          failure = p->name + "[" + std::to_string(i) + "] analytic " + sci(analytic) + " numeric " + sci(numeric);
        }
        ++entries;
      }
    }
    report.add(problem.name, failure.empty(),
               failure.empty() ? std::to_string(entries) + " entries, max relative error " + sci(worst_rel) + " at " + worst_at
                              : failure);
  }
  return report;
}

VerifyReport verify_causality(std::uint64_t seed, int trials) {
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.vocab_size = special::kCount + 20;
  mc.max_len = 12;
  const ModelF model = ModelF::initialized(mc, seed);
  std::string failure;
  for (int t = 0; t < trials && failure.empty(); ++t) {
    Rng rng = make_rng(seed, "causality", static_cast<std::uint64_t>(t));
    const int content = 2 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(mc.max_len - 3)));
    const TokenSequence a = random_sequence(rng, mc, content);
    TokenSequence b = a;
    const int from = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(a.length - 1)));
    for (int pos = from; pos < a.length; ++pos) {
      b.ids[static_cast<std::size_t>(pos)] =
          special::kCount + static_cast<TokenId>(uniform_index(rng, mc.vocab_size - special::kCount));
    }
    const int label = static_cast<int>(uniform_index(rng, 2));
    const auto la = model.forward_ag(a, label);
    const auto lb = model.forward_ag(b, label);
    for (int row = 0; row < from; ++row) {
      if (la.row(row) != lb.row(row)) {
        failure = "trial " + std::to_string(t) + ": row " + std::to_string(row) + " changed after editing position " +
                  std::to_string(from);
        break;
      }
    }
  }
  VerifyReport report;
  report.add("causality.ag_prefix", failure.empty(),
             failure.empty() ? std::to_string(trials) + " random edits, prefix logits bit-identical" : failure);
  return report;
}

VerifyReport verify_all(std::uint64_t seed) {
  VerifyReport report = verify_lemma1(seed);
  report.append(verify_mmd_identity(seed));
  report.append(verify_gradients({.seed = seed}));
  report.append(verify_causality(seed));
  return report;
}

}  // namespace kest
