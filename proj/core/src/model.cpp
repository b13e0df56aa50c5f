#include "kest/model.hpp"

#include <cmath>
#include <cstring>

#include "kest/error.hpp"

namespace kest {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_label, "d_label");
  positive(vocab_size, "vocab_size");
  positive(max_len, "max_len");
  positive(num_labels, "num_labels");
  if (d_ff < 0) throw ConfigError("model.d_ff must be >= 0");
  if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
  if (vocab_size <= special::kCount) throw ConfigError("model.vocab_size must exceed the special-token count");
  if (max_len < 3) throw ConfigError("model.max_len must be >= 3");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},       {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                     {"d_label", c.d_label},       {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},       {"num_labels", c.num_labels},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_label = j.value("d_label", d.d_label);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_len = j.value("max_len", d.max_len);
  c.num_labels = j.value("num_labels", d.num_labels);
  c.dropout = j.value("dropout", d.dropout);
}

namespace {

template <typename T>
Parameter<T> make_param(std::string name, Index rows, Index cols) {
  Parameter<T> p;
  p.name = std::move(name);
  p.value = Matrix<T>::Zero(rows, cols);
  p.grad = Matrix<T>::Zero(rows, cols);
  return p;
}

template <typename T>
void fill_normal(Parameter<T>& p, double stddev, Rng& rng) {
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(normal01(rng) * stddev);
}

template <typename T>
void hash_param(std::uint64_t& h, const Parameter<T>& p) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
  const std::size_t n = static_cast<std::size_t>(p.value.size()) * sizeof(T);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(config) {
  config_.validate();
  build();
}

template <typename T>
void Model<T>::build() {
  const Index d = config_.d_model;
  const Index v = config_.vocab_size;
  const Index dl = config_.d_label;
  const Index ff = config_.ff_width();
  tok_emb_ = make_param<T>("tok_emb", v, d);
  pos_emb_ = make_param<T>("pos_emb", config_.max_len, d);
  blocks_.clear();
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    BlockParams<T> b{
        make_param<T>(pre + "ln1.gain", 1, d),   make_param<T>(pre + "ln1.bias", 1, d),
        make_param<T>(pre + "attn.w_qkv", d, 3 * d), make_param<T>(pre + "attn.b_qkv", 1, 3 * d),
        make_param<T>(pre + "attn.w_out", d, d), make_param<T>(pre + "attn.b_out", 1, d),
        make_param<T>(pre + "fuse.w", d + dl, d), make_param<T>(pre + "fuse.b", 1, d),
        make_param<T>(pre + "ln2.gain", 1, d),   make_param<T>(pre + "ln2.bias", 1, d),
        make_param<T>(pre + "ff.w1", d, ff),     make_param<T>(pre + "ff.b1", 1, ff),
        make_param<T>(pre + "ff.w2", ff, d),     make_param<T>(pre + "ff.b2", 1, d),
    };
    b.ln1_gain.value.setOnes();
    b.ln2_gain.value.setOnes();
    // [I | 0]: label fusion starts as the identity on the attention output.
    b.w_fuse.value.topRows(d).setIdentity();
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = make_param<T>("lnf.gain", 1, d);
  lnf_gain_.value.setOnes();
  lnf_bias_ = make_param<T>("lnf.bias", 1, d);
  lm_bias_ = make_param<T>("lm.bias", 1, v);
  label_emb_ = make_param<T>("label_emb", config_.num_labels, dl);
  cls_w1_ = make_param<T>("cls.w1", d, d);
  cls_b1_ = make_param<T>("cls.b1", 1, d);
  cls_w2_ = make_param<T>("cls.w2", d, config_.num_labels);
  cls_b2_ = make_param<T>("cls.b2", 1, config_.num_labels);
}

template <typename T>
Model<T> Model<T>::initialized(ModelConfig config, std::uint64_t seed) {
  Model<T> m(config);
  Rng rng = make_rng(seed, "model-init");
  const double d = m.config_.d_model;
  const double resid_scale = 1.0 / std::sqrt(2.0 * m.config_.n_layers);
  fill_normal(m.tok_emb_, 0.1, rng);
  fill_normal(m.pos_emb_, 0.1, rng);
  for (auto& b : m.blocks_) {
    fill_normal(b.w_qkv, 1.0 / std::sqrt(d), rng);
    fill_normal(b.w_out, resid_scale / std::sqrt(d), rng);
    fill_normal(b.w_ff1, 1.0 / std::sqrt(d), rng);
    fill_normal(b.w_ff2, resid_scale / std::sqrt(static_cast<double>(m.config_.ff_width())), rng);
  }
  fill_normal(m.label_emb_, 0.5, rng);
  fill_normal(m.cls_w1_, 1.0 / std::sqrt(d), rng);
  fill_normal(m.cls_w2_, 1.0 / std::sqrt(d), rng);
  return m;
}

template <typename T>
Model<T>::Model(const Model& other)
    : config_(other.config_),
      tok_emb_(other.tok_emb_),
      pos_emb_(other.pos_emb_),
      blocks_(other.blocks_),
      lnf_gain_(other.lnf_gain_),
      lnf_bias_(other.lnf_bias_),
      lm_bias_(other.lm_bias_),
      label_emb_(other.label_emb_),
      cls_w1_(other.cls_w1_),
      cls_b1_(other.cls_b1_),
      cls_w2_(other.cls_w2_),
      cls_b2_(other.cls_b2_),
      ag_passes_(other.ag_passes_.load()),
      nag_passes_(other.nag_passes_.load()),
      cls_passes_(other.cls_passes_.load()) {}

template <typename T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this != &other) {
    Model tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

template <typename T>
Model<T>::Model(Model&& other) noexcept
    : config_(other.config_),
      tok_emb_(std::move(other.tok_emb_)),
      pos_emb_(std::move(other.pos_emb_)),
      blocks_(std::move(other.blocks_)),
      lnf_gain_(std::move(other.lnf_gain_)),
      lnf_bias_(std::move(other.lnf_bias_)),
      lm_bias_(std::move(other.lm_bias_)),
      label_emb_(std::move(other.label_emb_)),
      cls_w1_(std::move(other.cls_w1_)),
      cls_b1_(std::move(other.cls_b1_)),
      cls_w2_(std::move(other.cls_w2_)),
      cls_b2_(std::move(other.cls_b2_)),
      ag_passes_(other.ag_passes_.load()),
      nag_passes_(other.nag_passes_.load()),
      cls_passes_(other.cls_passes_.load()) {}

template <typename T>
Model<T>& Model<T>::operator=(Model&& other) noexcept {
  config_ = other.config_;
  tok_emb_ = std::move(other.tok_emb_);
  pos_emb_ = std::move(other.pos_emb_);
  blocks_ = std::move(other.blocks_);
  lnf_gain_ = std::move(other.lnf_gain_);
  lnf_bias_ = std::move(other.lnf_bias_);
  lm_bias_ = std::move(other.lm_bias_);
  label_emb_ = std::move(other.label_emb_);
  cls_w1_ = std::move(other.cls_w1_);
  cls_b1_ = std::move(other.cls_b1_);
  cls_w2_ = std::move(other.cls_w2_);
  cls_b2_ = std::move(other.cls_b2_);
  ag_passes_ = other.ag_passes_.load();
  nag_passes_ = other.nag_passes_.load();
  cls_passes_ = other.cls_passes_.load();
  return *this;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out{&tok_emb_, &pos_emb_};
  for (auto& b : blocks_) {
    for (Parameter<T>* p : {&b.ln1_gain, &b.ln1_bias, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.w_fuse,
                            &b.b_fuse, &b.ln2_gain, &b.ln2_bias, &b.w_ff1, &b.b_ff1, &b.w_ff2, &b.b_ff2}) {
      out.push_back(p);
    }
  }
  for (Parameter<T>* p : {&lnf_gain_, &lnf_bias_, &lm_bias_, &label_emb_, &cls_w1_, &cls_b1_, &cls_w2_, &cls_b2_}) {
    out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  auto mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
Parameter<T>* Model<T>::find(std::string_view name) {
  for (auto* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
const Parameter<T>* Model<T>::find(std::string_view name) const {
  return const_cast<Model*>(this)->find(name);
}

template <typename T>
void Model<T>::zero_grad() const {
  for (const auto* p : parameters()) p->zero_grad();
}

template <typename T>
void Model<T>::reset_counters() const {
  ag_passes_ = 0;
  nag_passes_ = 0;
  cls_passes_ = 0;
}

template <typename T>
std::uint64_t Model<T>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : parameters()) hash_param(h, *p);
  return h;
}

template <typename T>
std::uint64_t Model<T>::embedding_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  hash_param(h, tok_emb_);
  return h;
}

template <typename T>
void Model<T>::check_ids(std::span<const TokenId> ids) const {
  if (ids.empty()) throw IntegrityError("forward on an empty sequence");
  if (static_cast<int>(ids.size()) > config_.max_len) {
    throw IntegrityError("sequence of length " + std::to_string(ids.size()) + " exceeds model max_len " +
                         std::to_string(config_.max_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw IntegrityError("token id " + std::to_string(id) + " outside model vocabulary");
    }
  }
}

template <typename T>
ag::Var<T> Model<T>::maybe_dropout(ag::Var<T> x, const ForwardOptions& opts) const {
  if (!opts.train || opts.rng == nullptr || config_.dropout <= 0.0) return x;
  const T keep_scale = T(1) / static_cast<T>(1.0 - config_.dropout);
  Matrix<T> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = bernoulli(*opts.rng, config_.dropout) ? T(0) : keep_scale;
  }
  return ag::mul_const(x, mask);
}

template <typename T>
ag::Var<T> Model<T>::fuse_label(ag::Tape<T>& tape, ag::Var<T> attention_output, int label, int layer) const {
  if (label < 0 || label >= config_.num_labels) {
    throw IntegrityError("label " + std::to_string(label) + " outside [0, " + std::to_string(config_.num_labels) + ")");
  }
  const auto& b = blocks_.at(static_cast<std::size_t>(layer));
  auto label_rows = ag::gather_rows(tape.param(label_emb_),
                                    std::vector<int>(static_cast<std::size_t>(attention_output.rows()), label));
  auto joined = ag::concat_cols<T>({attention_output, label_rows});
  return ag::add_row(ag::matmul(joined, tape.param(b.w_fuse)), tape.param(b.b_fuse));
}

template <typename T>
ag::Var<T> Model<T>::encode(ag::Tape<T>& tape, std::span<const TokenId> ids, AttentionMode mode, int label,
                            const ForwardOptions& opts) const {
  check_ids(ids);
  const int n = static_cast<int>(ids.size());
  const Index d = config_.d_model;
  const Index dh = d / config_.n_heads;
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<int> tok(ids.begin(), ids.end());
  std::vector<int> pos(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i)] = i;
  auto x = ag::add(ag::gather_rows(tape.param(tok_emb_), std::move(tok)),
                   ag::gather_rows(tape.param(pos_emb_), std::move(pos)));
  x = maybe_dropout(x, opts);

  ag::SoftmaxMask attn_mask;
  attn_mask.causal = mode == AttentionMode::kCausal;

  for (int l = 0; l < config_.n_layers; ++l) {
    const auto& b = blocks_[static_cast<std::size_t>(l)];
    auto h = ag::layer_norm(x, tape.param(b.ln1_gain), tape.param(b.ln1_bias));
    auto qkv = ag::add_row(ag::matmul(h, tape.param(b.w_qkv)), tape.param(b.b_qkv));
    std::vector<ag::Var<T>> heads;
    heads.reserve(static_cast<std::size_t>(config_.n_heads));
    for (int hd = 0; hd < config_.n_heads; ++hd) {
      auto q = ag::slice_cols(qkv, hd * dh, dh);
      auto k = ag::slice_cols(qkv, d + hd * dh, dh);
      auto v = ag::slice_cols(qkv, 2 * d + hd * dh, dh);
      auto scores = ag::scale(ag::matmul_nt(q, k), inv_sqrt_dh);
      heads.push_back(ag::matmul(ag::softmax_rows(scores, attn_mask), v));
    }
    auto attn = ag::add_row(ag::matmul(ag::concat_cols(heads), tape.param(b.w_out)), tape.param(b.b_out));
    // Label fusion sits between the attention output and the residual add.
    if (label >= 0) attn = fuse_label(tape, attn, label, l);
    x = ag::add(x, maybe_dropout(attn, opts));

    auto h2 = ag::layer_norm(x, tape.param(b.ln2_gain), tape.param(b.ln2_bias));
    auto ff = ag::gelu(ag::add_row(ag::matmul(h2, tape.param(b.w_ff1)), tape.param(b.b_ff1)));
    ff = ag::add_row(ag::matmul(ff, tape.param(b.w_ff2)), tape.param(b.b_ff2));
    x = ag::add(x, maybe_dropout(ff, opts));
  }
  return ag::layer_norm(x, tape.param(lnf_gain_), tape.param(lnf_bias_));
}

template <typename T>
ag::Var<T> Model<T>::lm_logits(ag::Tape<T>& tape, ag::Var<T> hidden) const {
  return ag::add_row(ag::matmul_nt(hidden, tape.param(tok_emb_)), tape.param(lm_bias_));
}

template <typename T>
ag::Var<T> Model<T>::forward_ag(ag::Tape<T>& tape, const TokenSequence& tokens, int label,
                                const ForwardOptions& opts) const {
  if (tokens.length < 1) throw IntegrityError("forward_ag on an empty sequence");
  std::span<const TokenId> ids(tokens.ids.data(), static_cast<std::size_t>(tokens.length));
  if (label < 0 || label >= config_.num_labels) throw IntegrityError("forward_ag label out of range");
  auto hidden = encode(tape, ids, AttentionMode::kCausal, label, opts);
  ++ag_passes_;
  return lm_logits(tape, hidden);
}

template <typename T>
ag::Var<T> Model<T>::forward_nag(ag::Tape<T>& tape, const TokenSequence& masked_tokens, int label,
                                 const ForwardOptions& opts) const {
  if (masked_tokens.length < 1) throw IntegrityError("forward_nag on an empty sequence");
  std::span<const TokenId> ids(masked_tokens.ids.data(), static_cast<std::size_t>(masked_tokens.length));
  if (label < 0 || label >= config_.num_labels) throw IntegrityError("forward_nag label out of range");
  auto hidden = encode(tape, ids, AttentionMode::kBidirectional, label, opts);
  ++nag_passes_;
  return lm_logits(tape, hidden);
}

template <typename T>
ag::Var<T> Model<T>::forward_cls(ag::Tape<T>& tape, const TokenSequence& tokens, const ForwardOptions& opts) const {
  if (tokens.length < 1) throw IntegrityError("forward_cls on an empty sequence");
  std::span<const TokenId> ids(tokens.ids.data(), static_cast<std::size_t>(tokens.length));
  auto hidden = encode(tape, ids, AttentionMode::kBidirectional, -1, opts);
  auto pooled = ag::gather_rows(hidden, {0});
  auto h = ag::tanh(ag::add_row(ag::matmul(pooled, tape.param(cls_w1_)), tape.param(cls_b1_)));
  h = maybe_dropout(h, opts);
  auto logits = ag::add_row(ag::matmul(h, tape.param(cls_w2_)), tape.param(cls_b2_));
  ++cls_passes_;
  return ag::softmax_rows(logits);
}

template <typename T>
Matrix<T> Model<T>::forward_ag(const TokenSequence& tokens, int label) const {
  ag::Tape<T> tape(false);
  return forward_ag(tape, tokens, label).value();
}

template <typename T>
Matrix<T> Model<T>::forward_nag(const TokenSequence& masked_tokens, int label) const {
  ag::Tape<T> tape(false);
  return forward_nag(tape, masked_tokens, label).value();
}

template <typename T>
std::vector<double> Model<T>::forward_cls(const TokenSequence& tokens, const ForwardOptions& opts) const {
  ag::Tape<T> tape(false);
  const auto probs = forward_cls(tape, tokens, opts).value();
  std::vector<double> out(static_cast<std::size_t>(probs.cols()));
  for (Index k = 0; k < probs.cols(); ++k) out[static_cast<std::size_t>(k)] = static_cast<double>(probs(0, k));
  return out;
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  Model<U> out(config_);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->grad = Matrix<U>::Zero(dst[i]->value.rows(), dst[i]->value.cols());
    dst[i]->frozen = src[i]->frozen;
  }
  return out;
}

template <typename T>
ag::Var<T> soft_embed(ag::Tape<T>& tape, ag::Var<T> probabilities, const Model<T>& model) {
  const auto& p = probabilities.value();
  if (p.cols() != model.config().vocab_size) throw IntegrityError("soft_embed: probability width != vocab size");
  const double tol = std::max(1e-6, 64.0 * static_cast<double>(std::numeric_limits<T>::epsilon()));
  for (Index r = 0; r < p.rows(); ++r) {
    double s = 0;
    for (Index c = 0; c < p.cols(); ++c) {
      if (p(r, c) < T(0)) throw PreconditionError("soft_embed: negative probability");
      s += static_cast<double>(p(r, c));
    }
    if (std::abs(s - 1.0) > tol) {
      throw PreconditionError("soft_embed: row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
  }
  return ag::matmul(probabilities, tape.param(model.token_embedding()));
}

template <typename T>
Matrix<T> soft_embed(const Matrix<T>& probabilities, const Model<T>& model) {
  ag::Tape<T> tape(false);
  return soft_embed(tape, tape.constant(probabilities), model).value();
}

template <typename T>
ag::Var<T> pad_soft_rows(ag::Var<T> rows, const Model<T>& model) {
  const Index missing = model.config().max_len - rows.rows();
  if (missing < 0) throw IntegrityError("pad_soft_rows: more rows than L_max");
  if (missing == 0) return rows;
  // Gathered from E so the padding follows E whenever E is trainable.
  auto pad = ag::gather_rows(rows.tape()->param(model.token_embedding()),
                             std::vector<int>(static_cast<std::size_t>(missing), special::kPad));
  return ag::concat_rows<T>({rows, pad});
}

std::vector<char> banned_interior_tokens(int vocab_size, bool ban_eos) {
  std::vector<char> banned(static_cast<std::size_t>(vocab_size), 0);
  for (TokenId id : {special::kPad, special::kMask, special::kBos, special::kUnk}) banned[static_cast<std::size_t>(id)] = 1;
  if (ban_eos) banned[special::kEos] = 1;
  return banned;
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, Options options)
    : params_(std::move(params)), options_(options) {
  for (auto* p : params_) {
    m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    // No decay on biases, gains, or the label table.
    const bool is_vector = p->value.rows() == 1;
    decay_.push_back(!is_vector && p->name != "label_emb");
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++step_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(b1, static_cast<double>(step_))));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(b2, static_cast<double>(step_))));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>& p = *params_[i];
    if (p.frozen) continue;
    if (p.grad.size() == 0) continue;
    for (Index k = 0; k < p.grad.size(); ++k) {
      if (!std::isfinite(static_cast<double>(p.grad.data()[k]))) {
        throw TrainingAbort("non-finite gradient in parameter " + p.name);
      }
    }
    if (decay_[i]) p.value *= static_cast<T>(1.0 - lr * options_.weight_decay);
    m_[i] = static_cast<T>(b1) * m_[i] + static_cast<T>(1.0 - b1) * p.grad;
    v_[i] = static_cast<T>(b2) * v_[i] + static_cast<T>(1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= static_cast<T>(lr) * (m_[i].array() * c1) /
                       ((v_[i].array() * c2).sqrt() + static_cast<T>(options_.eps));
  }
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;
template class AdamW<float>;
template class AdamW<double>;

template ag::Var<float> soft_embed(ag::Tape<float>&, ag::Var<float>, const Model<float>&);
template ag::Var<double> soft_embed(ag::Tape<double>&, ag::Var<double>, const Model<double>&);
template Matrix<float> soft_embed(const Matrix<float>&, const Model<float>&);
template Matrix<double> soft_embed(const Matrix<double>&, const Model<double>&);
template ag::Var<float> pad_soft_rows(ag::Var<float>, const Model<float>&);
template ag::Var<double> pad_soft_rows(ag::Var<double>, const Model<double>&);

}  // namespace kest
