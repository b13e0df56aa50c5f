#include "kest/losses.hpp"

#include <atomic>
#include <cmath>

#include "kest/diagnostics.hpp"
#include "kest/error.hpp"

namespace kest {

void LossWeights::validate() const {
  for (double v : {c, ag, nag}) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (c == 0.0 && ag == 0.0 && nag == 0.0) throw ConfigError("loss weights must not all be zero");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"lambda_c", w.c}, {"lambda_ag", w.ag}, {"lambda_nag", w.nag}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.c = j.at("lambda_c").get<double>();
  w.ag = j.at("lambda_ag").get<double>();
  w.nag = j.at("lambda_nag").get<double>();
}

template <typename T>
ag::Var<T> loss_ag(ag::Var<T> logits, const TokenSequence& targets) {
  std::vector<int> t(static_cast<std::size_t>(logits.rows()), -1);
  int scored = 0;
  for (Index j = 0; j < logits.rows(); ++j) {
    if (j + 1 < targets.length && targets.ids[static_cast<std::size_t>(j + 1)] != special::kMask) {
      t[static_cast<std::size_t>(j)] = targets.ids[static_cast<std::size_t>(j + 1)];
      ++scored;
    }
  }
  if (scored == 0) diag::warn("loss_ag.empty");
  return ag::nll_rows(logits, std::move(t));
}

template <typename T>
ag::Var<T> loss_nag(ag::Var<T> logits, const TokenSequence& original, const MaskVector& mask) {
  if (mask.size() != original.content_length()) {
    throw PreconditionError("mask of " + std::to_string(mask.size()) + " bits does not match " +
                            std::to_string(original.content_length()) + " maskable positions");
  }
  if (logits.rows() < original.length - 1) throw IntegrityError("loss_nag: too few logit rows");
  std::vector<int> t(static_cast<std::size_t>(logits.rows()), -1);
  for (int i = 0; i < mask.size(); ++i) {
    if (mask.bits[static_cast<std::size_t>(i)] && original.ids[static_cast<std::size_t>(i + 1)] != special::kMask) {
      t[static_cast<std::size_t>(i + 1)] = original.ids[static_cast<std::size_t>(i + 1)];
    }
  }
  return ag::nll_rows(logits, std::move(t));
}

template <typename T>
ag::Var<T> loss_cls(ag::Var<T> probs, int label) {
  bool clamped = false;
  auto out = ag::neg_log_pick(probs, label, static_cast<T>(kLogClamp), &clamped);
  if (clamped) diag::warn("loss_cls.clamped");
  return out;
}

double loss_joint(double l_c, double l_ag, double l_nag, const LossWeights& w) {
  return w.c * l_c + w.ag * l_ag + w.nag * l_nag;
}

template <typename T>
ag::Var<T> loss_joint(ag::Var<T> l_c, ag::Var<T> l_ag, ag::Var<T> l_nag, const LossWeights& w) {
  return ag::add(ag::add(ag::scale(l_c, static_cast<T>(w.c)), ag::scale(l_ag, static_cast<T>(w.ag))),
                 ag::scale(l_nag, static_cast<T>(w.nag)));
}

double loss_ag_value(const Matrix<double>& logits, const TokenSequence& targets) {
  ag::Tape<double> tape(false);
  return loss_ag(tape.constant(logits), targets).scalar();
}

double loss_nag_value(const Matrix<double>& logits, const TokenSequence& original, const MaskVector& mask) {
  ag::Tape<double> tape(false);
  return loss_nag(tape.constant(logits), original, mask).scalar();
}

double loss_cls_value(std::span<const double> probs, int label) {
  Matrix<double> p(1, static_cast<Index>(probs.size()));
  for (std::size_t k = 0; k < probs.size(); ++k) p(0, static_cast<Index>(k)) = probs[k];
  ag::Tape<double> tape(false);
  return loss_cls(tape.constant(p), label).scalar();
}

// --- kernel -----------------------------------------------------------------

void KernelConfig::validate() const {
  if (M < 0) throw ConfigError("kernel M must be >= 0");
  if (!bandwidths.empty() && bandwidths.size() != static_cast<std::size_t>(2 * M + 1)) {
    throw ConfigError("kernel bank must hold 2M+1 bandwidths");
  }
  for (double s : bandwidths) {
    if (!(s > 0.0)) throw ConfigError("kernel bandwidths must be > 0");
  }
}

double squared_distance(const Matrix<double>& a, const Matrix<double>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw IntegrityError("kernel operands differ in shape");
  return (a - b).squaredNorm();
}

namespace {

void check_bandwidths(std::span<const double> bandwidths) {
  if (bandwidths.empty()) throw ConfigError("empty kernel bandwidth bank");
  for (double s : bandwidths) {
    if (!(s > 0.0)) throw ConfigError("kernel bandwidths must be > 0");
  }
}

double kernel_from_d2(double d2, std::span<const double> bandwidths) {
  double k = 0;
  for (double s : bandwidths) k += std::exp(-d2 / (2.0 * s * s));
  return k;
}

std::atomic<bool> g_flip_cross{false};

}  // namespace

double rbf_kernel(const Matrix<double>& a, const Matrix<double>& b, std::span<const double> bandwidths) {
  check_bandwidths(bandwidths);
  return kernel_from_d2(squared_distance(a, b), bandwidths);
}

template <typename T>
std::vector<double> median_bandwidths(const std::vector<Matrix<T>>& d_o, const std::vector<Matrix<T>>& d_pt, int M) {
  if (d_o.empty() || d_pt.empty()) throw PreconditionError("median_bandwidths needs non-empty sets");
  if (M < 0) throw ConfigError("kernel M must be >= 0");
  double total = 0;
  for (const auto& a : d_o) {
    for (const auto& b : d_pt) {
      if (a.rows() != b.rows() || a.cols() != b.cols()) throw IntegrityError("kernel operands differ in shape");
      total += (a.template cast<double>() - b.template cast<double>()).squaredNorm();
    }
  }
  const double h = total / static_cast<double>(d_o.size() * d_pt.size());
  if (!(h > 0.0)) diag::warn("bandwidth.degenerate");
  std::vector<double> out;
  for (int a = -M; a <= M; ++a) out.push_back(std::max(std::ldexp(h, a), kBandwidthFloor));
  return out;
}

double loss_mmd(const std::vector<Matrix<double>>& d_o, const std::vector<Matrix<double>>& d_pt,
                std::span<const double> bandwidths) {
  check_bandwidths(bandwidths);
  const std::size_t n = d_o.size();
  if (n < 2 || d_pt.size() != n) {
    throw PreconditionError("loss_mmd needs |D_o| = |D_pt| = N >= 2 (got " + std::to_string(n) + " and " +
                            std::to_string(d_pt.size()) + ")");
  }
  double within = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) within += rbf_kernel(d_o[i], d_o[j], bandwidths);
    }
  }
  double cross = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) cross += rbf_kernel(d_o[i], d_pt[j], bandwidths);
  }
  const double nn = static_cast<double>(n);
  const double sign = mutation::mmd_cross_sign_flip() ? -1.0 : 1.0;
  return within / (nn * (nn - 1.0)) - sign * 2.0 * cross / (nn * nn);
}

template <typename T>
ag::Var<T> loss_mmd(const std::vector<ag::Var<T>>& d_o, const std::vector<Matrix<T>>& d_pt,
                    std::span<const double> bandwidths) {
  check_bandwidths(bandwidths);
  const std::size_t n = d_o.size();
  if (n < 2 || d_pt.size() != n) {
    throw PreconditionError("loss_mmd needs |D_o| = |D_pt| = N >= 2 (got " + std::to_string(n) + " and " +
                            std::to_string(d_pt.size()) + ")");
  }
  std::vector<Matrix<double>> o, t;
  for (const auto& v : d_o) o.push_back(v.value().template cast<double>());
  for (const auto& m : d_pt) t.push_back(m.template cast<double>());
  const std::vector<double> bank(bandwidths.begin(), bandwidths.end());

  const double value = loss_mmd(o, t, bank);
  const double nn = static_cast<double>(n);
  const double sign = mutation::mmd_cross_sign_flip() ? -1.0 : 1.0;

  // d/do_i: within pairs (i, j) and (j, i) both contribute; each kernel term
  // differentiates to -k_s (o_i - x) / s^2.
  std::vector<Matrix<double>> grads(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix<double> g = Matrix<double>::Zero(o[i].rows(), o[i].cols());
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Matrix<double> diff = o[i] - o[j];
      const double d2 = diff.squaredNorm();
      double coef = 0;
      for (double s : bank) coef += std::exp(-d2 / (2.0 * s * s)) / (s * s);
      g -= (2.0 / (nn * (nn - 1.0))) * coef * diff;
    }
    for (std::size_t j = 0; j < n; ++j) {
      const Matrix<double> diff = o[i] - t[j];
      const double d2 = diff.squaredNorm();
      double coef = 0;
      for (double s : bank) coef += std::exp(-d2 / (2.0 * s * s)) / (s * s);
      g += sign * (2.0 / (nn * nn)) * coef * diff;
    }
    grads[i] = std::move(g);
  }

  bool rg = false;
  std::vector<ag::Node<T>*> nodes;
  for (const auto& v : d_o) {
    if (v.tape() != d_o.front().tape()) throw IntegrityError("loss_mmd operands live on different tapes");
    rg = rg || v.requires_grad();
    nodes.push_back(v.node());
  }
  Matrix<T> out(1, 1);
  out(0, 0) = static_cast<T>(value);
  return d_o.front().tape()->make(std::move(out), rg, [nodes, grads = std::move(grads)](ag::Node<T>& self) {
    const double up = static_cast<double>(self.grad(0, 0));
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) nodes[i]->accumulate((grads[i] * up).template cast<T>());
    }
  });
}

namespace mutation {
void set_mmd_cross_sign_flip(bool enabled) { g_flip_cross = enabled; }
bool mmd_cross_sign_flip() { return g_flip_cross.load(); }
}  // namespace mutation

// --- grouping ---------------------------------------------------------------

PseudoTextGroups::PseudoTextGroups(int num_labels, int min_group)
    : min_group_(min_group), groups_(static_cast<std::size_t>(num_labels)) {
  if (num_labels < 1) throw ConfigError("PseudoTextGroups needs at least one label");
  if (min_group < 2) throw ConfigError("pseudo-text groups must hold at least 2 items");
}

void PseudoTextGroups::add(int label, std::size_t item) {
  if (label < 0 || label >= static_cast<int>(groups_.size())) throw IntegrityError("pseudo-text label out of range");
  groups_[static_cast<std::size_t>(label)].push_back(item);
}

std::vector<std::vector<std::size_t>> PseudoTextGroups::take_ready() {
  std::vector<std::vector<std::size_t>> out;
  for (auto& g : groups_) {
    if (static_cast<int>(g.size()) >= min_group_) {
      out.push_back(std::move(g));
      g.clear();
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> PseudoTextGroups::flush(std::size_t* dropped) {
  std::vector<std::vector<std::size_t>> out;
  std::size_t lost = 0;
  for (auto& g : groups_) {
    if (g.size() >= 2) {
      out.push_back(std::move(g));
    } else if (!g.empty()) {
      lost += g.size();
      diag::warn("pseudo_text.dropped_singleton");
    }
    g.clear();
  }
  if (dropped) *dropped = lost;
  return out;
}

std::size_t PseudoTextGroups::pending() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += g.size();
  return n;
}

#define KEST_INSTANTIATE_LOSSES(T)                                                                      \
  template ag::Var<T> loss_ag(ag::Var<T>, const TokenSequence&);                                        \
  template ag::Var<T> loss_nag(ag::Var<T>, const TokenSequence&, const MaskVector&);                    \
  template ag::Var<T> loss_cls(ag::Var<T>, int);                                                        \
  template ag::Var<T> loss_joint(ag::Var<T>, ag::Var<T>, ag::Var<T>, const LossWeights&);               \
  template std::vector<double> median_bandwidths(const std::vector<Matrix<T>>&, const std::vector<Matrix<T>>&, int); \
  template ag::Var<T> loss_mmd(const std::vector<ag::Var<T>>&, const std::vector<Matrix<T>>&, std::span<const double>);

KEST_INSTANTIATE_LOSSES(float)
KEST_INSTANTIATE_LOSSES(double)

}  // namespace kest
