#pragma once

#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "amort/autodiff.hpp"
#include "amort/masking.hpp"
#include "amort/tasks.hpp"
#include "amort/transformer.hpp"

// The three amortization regimes. Each model refines a recurrent state over
// fresh minibatches: weights of a fixed predictor (parametric), latent
// tokens consumed by a learned predictor (explicit), or per-query
// predictions (implicit). Training is greedy: the incoming state of every
// step is detached, so no gradient flows across steps.
namespace amort {

enum class Regime { parametric, explicit_, implicit };
enum class Signal { data, grad, grad_data };
enum class ImplicitStateKind { pre_mlp, logits, softmax };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::parametric: return "parametric";
    case Regime::explicit_: return "explicit";
    case Regime::implicit: return "implicit";
  }
  return "?";
}

inline const char* to_string(Signal s) {
  switch (s) {
    case Signal::data: return "data";
    case Signal::grad: return "grad";
    case Signal::grad_data: return "grad_data";
  }
  return "?";
}

inline const char* to_string(ImplicitStateKind k) {
  switch (k) {
    case ImplicitStateKind::pre_mlp: return "pre_mlp";
    case ImplicitStateKind::logits: return "logits";
    case ImplicitStateKind::softmax: return "softmax";
  }
  return "?";
}

struct RegimeConfig {
  Regime regime = Regime::parametric;
  Signal signal = Signal::data;
  int steps = 10;
  int history_window = 0;  // 0 = Markovian
  ImplicitStateKind implicit_state = ImplicitStateKind::logits;
  int latent_tokens = 1;   // explicit regime; >1 only with non-causal masking
  int latent_dim = 64;
  int predictor_hidden = 64;
  bool fixed_linear_predictor = false;  // explicit regime degenerates to the
                                        // fixed map (latent plays theta)
  int premlp_dim = 16;

  void validate(const SequenceModelConfig& smc) const {
    if (steps < 1) throw std::invalid_argument("regime: steps < 1");
    if (history_window < 0)
      throw std::invalid_argument("regime: negative history window");
    if (regime == Regime::implicit && signal != Signal::data)
      throw std::invalid_argument(
          "regime: implicit amortization cannot consume gradient signal");
    if (regime == Regime::explicit_) {
      if (latent_tokens < 1 || latent_dim < 1)
        throw std::invalid_argument("regime: explicit latent must be nonempty");
      if (latent_tokens > 1 && smc.masking == MaskingScheme::causal)
        throw std::invalid_argument(
            "regime: multi-token latents require the non-causal scheme");
    }
    if (history_window > 0 && regime != Regime::parametric)
      throw std::invalid_argument(
          "regime: history window is a parametric-only option");
  }
};

// Prediction-space description of a task family.
struct TaskHead {
  int d_x = 0;
  int n_out = 1;
  bool classification = false;

  int theta_dim() const { return d_x * n_out + n_out; }
};

inline TaskHead task_head(const TaskFamilyConfig& cfg) {
  switch (cfg.family) {
    case TaskFamily::linreg:
      return TaskHead{cfg.dim, 1, false};
    case TaskFamily::projection:
      return TaskHead{cfg.proj_dim, cfg.classes, true};
    default:
      throw std::invalid_argument(
          "task_head: family has no fixed predictive head");
  }
}

// Losses recorded along one greedy chain. loss0 is the validation loss of
// the learned initialization before any refinement.
struct ChainLosses {
  double loss0 = 0.0;
  std::vector<double> per_step;

  double mean_step() const {
    double s = 0.0;
    for (double v : per_step) s += v;
    return per_step.empty() ? 0.0 : s / double(per_step.size());
  }
};

template <typename T>
struct ChainGraph {
  ad::Var<T> objective;  // optimized: (loss0 + sum of step losses) / (K+1)
  ad::Var<T> reported;   // mean over step losses only
  ChainLosses values;
};

template <typename T>
struct RefinementTrace {
  std::vector<TensorT<T>> states;     // K+1 entries, state 0 = learned init
  std::vector<double> valid_losses;   // one per state
};

namespace detail {

// Observation matrix [n, d_x + n_out]: targets one-hot for classification.
template <typename T>
TensorT<T> observation_matrix(const Dataset<T>& d, const TaskHead& head) {
  TensorT<T> out(d.size(), head.d_x + head.n_out);
  for (int64_t r = 0; r < d.size(); ++r) {
    for (int64_t c = 0; c < head.d_x; ++c) out(r, c) = d.x(r, c);
    if (head.classification)
      out(r, head.d_x + d.labels[size_t(r)]) = T(1);
    else
      for (int64_t c = 0; c < head.n_out; ++c)
        out(r, head.d_x + c) = d.y(r, c);
  }
  return out;
}

template <typename T>
ad::Var<T> fixed_predict(const ad::Var<T>& theta, const TensorT<T>& x,
                         const TaskHead& head) {
  if (x.cols() != head.d_x)
    throw std::invalid_argument("fixed_predict: query width mismatch");
  if (theta.val().numel() != head.theta_dim())
    throw std::invalid_argument("fixed_predict: theta width mismatch");
  ad::Var<T> flat = ad::reshape(theta, 1, head.theta_dim());
  ad::Var<T> w = ad::reshape(ad::slice_cols(flat, 0, head.d_x * head.n_out),
                             head.d_x, head.n_out);
  ad::Var<T> b =
      ad::slice_cols(flat, head.d_x * head.n_out, head.theta_dim());
  return ad::add_rowvec(ad::matmul(ad::Var<T>::constant(x), w), b);
}

template <typename T>
ad::Var<T> prediction_loss(const ad::Var<T>& preds, const Dataset<T>& d,
                           const TaskHead& head) {
  if (head.classification) return ad::cross_entropy_loss(preds, d.labels);
  return ad::mse_loss(preds, d.y);
}

// Gradient of the batch loss at theta, under the fixed predictor. Built on
// a throwaway graph; the result enters the main graph as a constant token,
// so training stays first-order.
template <typename T>
TensorT<T> fixed_predictor_gradient(const TensorT<T>& theta,
                                    const Dataset<T>& batch,
                                    const TaskHead& head) {
  ad::ParamStore<T> local;
  ad::Var<T> leaf = local.create("theta", theta);
  ad::Var<T> loss = prediction_loss(
      fixed_predict(leaf, batch.x, head), batch, head);
  auto grads = ad::backward_named(loss, local);
  return grads.at("theta");
}

template <typename T>
double scalar(const ad::Var<T>& v) {
  return double(v.val().item());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parametric amortization: the carried state is the weight vector of a
// fixed linear predictor.

template <typename T>
class ParametricAmortizer {
 public:
  ParametricAmortizer(const SequenceModelConfig& smc, const RegimeConfig& rc,
                      const TaskHead& head, uint64_t seed)
      : smc_(smc), rc_(rc), head_(head) {
    smc.validate();
    rc.validate(smc);
    if (rc.regime != Regime::parametric)
      throw std::invalid_argument("parametric amortizer: wrong regime config");
    Rng rng(derive_seed(seed, 11));
    enc_obs_ = Linear<T>(ps_, "enc_obs", head.d_x + head.n_out, smc.d_model,
                         rng);
    enc_state_ = Linear<T>(ps_, "enc_state", head.theta_dim(), smc.d_model,
                           rng);
    if (uses_grad())
      enc_grad_ = Linear<T>(ps_, "enc_grad", head.theta_dim(), smc.d_model,
                            rng);
    tf_ = Transformer<T>(ps_, "tf", smc, rng);
    dec_ = Linear<T>(ps_, "dec", smc.d_model, head.theta_dim(), rng);
    init_state_ = ps_.create("init_state",
                             TensorT<T>::zeros(1, head.theta_dim()));
  }

  ad::ParamStore<T>& param_store() { return ps_; }
  const TaskHead& head() const { return head_; }
  const SequenceModelConfig& model_config() const { return smc_; }
  const RegimeConfig& regime_config() const { return rc_; }
  std::string regime_name() const { return to_string(rc_.regime); }
  std::string signal_name() const { return to_string(rc_.signal); }
  bool uses_grad() const { return rc_.signal != Signal::data; }
  bool uses_data() const { return rc_.signal != Signal::grad; }
  ad::Var<T>& init_state() { return init_state_; }

  ad::Var<T> predict(const ad::Var<T>& theta, const TensorT<T>& x) const {
    return detail::fixed_predict(theta, x, head_);
  }

  // One refinement step. Returns the refined state; when the causal scheme
  // is active and per_prefix is non-null, also yields the state decoded at
  // every context prefix for prefix-parallel training.
  ad::Var<T> step(const ad::Var<T>& state_in, const Dataset<T>& batch,
                  ad::Var<T>* per_prefix = nullptr,
                  const std::deque<std::pair<TensorT<T>, TensorT<T>>>*
                      history = nullptr) const {
    std::vector<ad::Var<T>> tokens;
    // History window: older (state, gradient) pairs come first, each pair
    // encoded with the same encoders as the current step's tokens.
    if (history) {
      for (const auto& [h_state, h_grad] : *history) {
        tokens.push_back(enc_state_(ad::Var<T>::constant(h_state)));
        if (uses_grad())
          tokens.push_back(enc_grad_(ad::Var<T>::constant(h_grad)));
      }
    }
    tokens.push_back(enc_state_(state_in));
    if (uses_grad()) {
      TensorT<T> g =
          detail::fixed_predictor_gradient(state_in.val(), batch, head_);
      if (!g.all_finite())
        throw std::runtime_error("parametric step: non-finite gradient");
      tokens.push_back(enc_grad_(ad::Var<T>::constant(g)));
    }
    int n_prefix = int(tokens.size());
    int n_obs = 0;
    if (uses_data()) {
      TensorT<T> obs = detail::observation_matrix(batch, head_);
      tokens.push_back(enc_obs_(ad::Var<T>::constant(obs)));
      n_obs = int(batch.size());
    }
    ad::Var<T> tok = ad::concat_rows(tokens);

    bool causal = smc_.masking == MaskingScheme::causal;
    TensorT<T> mask =
        causal && n_obs > 0
            ? parametric_causal_mask<T>(n_obs, n_prefix)
            : full_mask<T>(int(tok.rows()));
    ad::Var<T> out = tf_.forward(tok, mask);

    if (causal && n_obs > 0) {
      ad::Var<T> states =
          dec_(ad::slice_rows(out, n_prefix, n_prefix + n_obs));
      if (per_prefix) *per_prefix = states;
      return ad::slice_rows(states, n_obs - 1, n_obs);
    }
    // Non-causal (or gradient-only): read the state position.
    ad::Var<T> new_state = dec_(ad::slice_rows(out, n_prefix - 1, n_prefix));
    if (per_prefix) *per_prefix = new_state;
    return new_state;
  }

  ad::Var<T> validation_loss(const ad::Var<T>& states,
                             const Dataset<T>& valid) const {
    int64_t n_states = states.rows();
    if (!head_.classification && n_states > 1) {
      // All prefixes at once: predictions[q, i] = x_q . w_i + b_i.
      ad::Var<T> w = ad::slice_cols(states, 0, head_.d_x);
      ad::Var<T> b = ad::reshape(
          ad::slice_cols(states, head_.d_x, head_.theta_dim()), 1, n_states);
      ad::Var<T> preds = ad::add_rowvec(
          ad::matmul(ad::Var<T>::constant(valid.x), w, false, true), b);
      TensorT<T> tiled(valid.size(), n_states);
      for (int64_t r = 0; r < valid.size(); ++r)
        for (int64_t c = 0; c < n_states; ++c) tiled(r, c) = valid.y(r, 0);
      ad::Var<T> diff = ad::sub(preds, ad::Var<T>::constant(tiled));
      return ad::mean_all(ad::mul(diff, diff));
    }
    ad::Var<T> total;
    for (int64_t i = 0; i < n_states; ++i) {
      ad::Var<T> theta_i = ad::slice_rows(states, i, i + 1);
      ad::Var<T> loss = detail::prediction_loss(
          detail::fixed_predict(theta_i, valid.x, head_), valid, head_);
      total = total.defined() ? ad::add(total, loss) : loss;
    }
    return ad::scale(total, T(1) / T(n_states));
  }

  // Full greedy chain for one task: K steps, state detached between steps,
  // per-step validation losses averaged together with the initialization
  // loss (which is what trains the learned init).
  ChainGraph<T> build_chain(const Task<T>& task, int k, uint64_t seed,
                            int batch_size, int valid_batch) const {
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    Rng noncausal_rng(derive_seed(seed, 12));

    ChainGraph<T> chain;
    ad::Var<T> state = init_state_;
    ad::Var<T> loss0 = validation_loss(init_state_, val);
    chain.values.loss0 = detail::scalar(loss0);
    ad::Var<T> sum = loss0;
    ad::Var<T> step_sum;
    std::deque<std::pair<TensorT<T>, TensorT<T>>> history;

    for (int t = 0; t < k; ++t) {
      Dataset<T> batch = gather_rows(task.train, plan.train_batches[size_t(t)]);
      if (smc_.masking == MaskingScheme::non_causal) {
        int n = sample_noncausal_context(noncausal_rng, smc_.max_context);
        n = std::min<int>(n, int(batch.size()));
        std::vector<int64_t> front(size_t(n));
        std::iota(front.begin(), front.end(), 0);
        batch = gather_rows(batch, front);
      }
      ad::Var<T> state_in = ad::stop_gradient(state);
      std::deque<std::pair<TensorT<T>, TensorT<T>>> window;
      if (rc_.history_window > 0) {
        window = history;
        while (int(window.size()) < rc_.history_window)
          window.push_front(window.empty()
                                ? std::make_pair(init_state_.val(),
                                                 zero_grad_like())
                                : window.front());
      }
      ad::Var<T> per_prefix;
      ad::Var<T> new_state =
          step(state_in, batch, &per_prefix,
               rc_.history_window > 0 ? &window : nullptr);
      ad::Var<T> loss_t = validation_loss(per_prefix, val);
      chain.values.per_step.push_back(detail::scalar(loss_t));
      sum = ad::add(sum, loss_t);
      step_sum = step_sum.defined() ? ad::add(step_sum, loss_t) : loss_t;
      if (rc_.history_window > 0) {
        TensorT<T> g = uses_grad() ? detail::fixed_predictor_gradient(
                                         state_in.val(), batch, head_)
                                   : zero_grad_like();
        history.emplace_back(state_in.val(), g);
        while (int(history.size()) > rc_.history_window) history.pop_front();
      }
      state = new_state;
    }
    chain.objective = ad::scale(sum, T(1) / T(k + 1));
    chain.reported = ad::scale(step_sum, T(1) / T(k));
    return chain;
  }

  // Inference-time refinement with per-state validation losses.
  RefinementTrace<T> run_refinement(const Task<T>& task, int k, uint64_t seed,
                                    int batch_size, int valid_batch) const {
    ad::NoGradGuard ng;
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    RefinementTrace<T> trace;
    ad::Var<T> state = ad::Var<T>::constant(init_state_.val());
    trace.states.push_back(state.val());
    trace.valid_losses.push_back(
        detail::scalar(validation_loss(state, val)));
    for (int t = 0; t < k; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t)]);
      state = step(state, batch);
      trace.states.push_back(state.val());
      trace.valid_losses.push_back(
          detail::scalar(validation_loss(state, val)));
    }
    return trace;
  }

  // Evaluation metric (regression mse / classification error) after each
  // k in ks, along one refinement chain over the full validation split.
  std::vector<double> eval_metrics(const Task<T>& task,
                                   const std::vector<int>& ks, uint64_t seed,
                                   int batch_size) const {
    ad::NoGradGuard ng;
    int k_max = *std::max_element(ks.begin(), ks.end());
    auto plan = split_minibatches(task, batch_size, k_max, seed,
                                  int(task.valid.size()));
    ad::Var<T> state = ad::Var<T>::constant(init_state_.val());
    std::vector<double> out;
    for (int t = 1; t <= k_max; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t - 1)]);
      state = step(state, batch);
      if (std::find(ks.begin(), ks.end(), t) != ks.end())
        out.push_back(eval_metric_of_state(state, task.valid));
    }
    return out;
  }

  double eval_metric_of_state(const ad::Var<T>& state,
                              const Dataset<T>& valid) const {
    ad::NoGradGuard ng;
    ad::Var<T> preds = detail::fixed_predict(state, valid.x, head_);
    if (head_.classification)
      return classification_error_logits(preds.val(), valid.labels);
    double m = 0.0;
    for (int64_t r = 0; r < valid.size(); ++r) {
      double d = double(preds.val()(r, 0)) - double(valid.y(r, 0));
      m += d * d;
    }
    return m / double(valid.size());
  }

 private:
  TensorT<T> zero_grad_like() const {
    return TensorT<T>::zeros(1, head_.theta_dim());
  }

  SequenceModelConfig smc_;
  RegimeConfig rc_;
  TaskHead head_;
  ad::ParamStore<T> ps_;
  Linear<T> enc_obs_, enc_state_, enc_grad_, dec_;
  Transformer<T> tf_;
  ad::Var<T> init_state_;
};

// ---------------------------------------------------------------------------
// Explicit amortization: the carried state is a set of latent tokens; a
// trained MLP (or, in the degenerate nested configuration, the fixed linear
// map) turns (query, latent) into a prediction.

template <typename T>
class ExplicitAmortizer {
 public:
  ExplicitAmortizer(const SequenceModelConfig& smc, const RegimeConfig& rc,
                    const TaskHead& head, uint64_t seed)
      : smc_(smc), rc_(rc), head_(head) {
    smc.validate();
    rc.validate(smc);
    if (rc.regime != Regime::explicit_)
      throw std::invalid_argument("explicit amortizer: wrong regime config");
    if (rc.fixed_linear_predictor &&
        rc.latent_tokens * rc.latent_dim != head.theta_dim())
      throw std::invalid_argument(
          "explicit amortizer: fixed predictor needs latent width == theta");
    Rng rng(derive_seed(seed, 11));
    enc_obs_ = Linear<T>(ps_, "enc_obs", head.d_x + head.n_out, smc.d_model,
                         rng);
    enc_state_ = Linear<T>(ps_, "enc_state", rc.latent_dim, smc.d_model, rng);
    if (rc.latent_tokens > 1)
      slot_embed_ = ps_.create(
          "latent_slots",
          TensorT<T>::randn(rc.latent_tokens, smc.d_model, rng, T(0.02)));
    if (uses_grad())
      enc_grad_ = Linear<T>(ps_, "enc_grad",
                            rc.latent_tokens * rc.latent_dim, smc.d_model,
                            rng);
    tf_ = Transformer<T>(ps_, "tf", smc, rng);
    dec_ = Linear<T>(ps_, "dec", smc.d_model, rc.latent_dim, rng);
    init_state_ = ps_.create(
        "init_state",
        TensorT<T>::randn(rc.latent_tokens, rc.latent_dim, rng, T(0.02)));
    if (!rc.fixed_linear_predictor) {
      pred_in_ = Linear<T>(ps_, "pred_in",
                           head.d_x + rc.latent_tokens * rc.latent_dim,
                           rc.predictor_hidden, rng);
      pred_out_ =
          Linear<T>(ps_, "pred_out", rc.predictor_hidden, head.n_out, rng);
    }
  }

  ad::ParamStore<T>& param_store() { return ps_; }
  const TaskHead& head() const { return head_; }
  const SequenceModelConfig& model_config() const { return smc_; }
  const RegimeConfig& regime_config() const { return rc_; }
  std::string regime_name() const { return to_string(rc_.regime); }
  std::string signal_name() const { return to_string(rc_.signal); }
  bool uses_grad() const { return rc_.signal != Signal::data; }
  bool uses_data() const { return rc_.signal != Signal::grad; }
  ad::Var<T>& init_state() { return init_state_; }

  // Prediction from a latent [m, latent_dim] for queries x.
  ad::Var<T> predict(const ad::Var<T>& latent, const TensorT<T>& x) const {
    if (rc_.fixed_linear_predictor)
      return detail::fixed_predict(
          ad::reshape(latent, 1, rc_.latent_tokens * rc_.latent_dim), x,
          head_);
    ad::Var<T> flat =
        ad::reshape(latent, 1, rc_.latent_tokens * rc_.latent_dim);
    TensorT<T> ones(x.rows(), 1);
    for (auto& v : ones.data()) v = T(1);
    // Broadcast the flattened latent onto every query row.
    ad::Var<T> tiled = ad::matmul(ad::Var<T>::constant(ones), flat);
    ad::Var<T> joint = ad::concat_cols({ad::Var<T>::constant(x), tiled});
    return pred_out_(ad::gelu(pred_in_(joint)));
  }

  ad::Var<T> step(const ad::Var<T>& latent_in, const Dataset<T>& batch,
                  std::vector<ad::Var<T>>* per_prefix = nullptr) const {
    std::vector<ad::Var<T>> tokens;
    ad::Var<T> state_tok = enc_state_(latent_in);
    if (rc_.latent_tokens > 1) state_tok = ad::add(state_tok, slot_embed_);
    tokens.push_back(state_tok);
    if (uses_grad()) {
      TensorT<T> g = latent_gradient(latent_in.val(), batch);
      tokens.push_back(enc_grad_(ad::Var<T>::constant(g)));
    }
    int n_prefix = rc_.latent_tokens + (uses_grad() ? 1 : 0);
    int n_obs = 0;
    if (uses_data()) {
      TensorT<T> obs = detail::observation_matrix(batch, head_);
      tokens.push_back(enc_obs_(ad::Var<T>::constant(obs)));
      n_obs = int(batch.size());
    }
    ad::Var<T> tok = ad::concat_rows(tokens);
    bool causal = smc_.masking == MaskingScheme::causal;
    TensorT<T> mask = causal && n_obs > 0
                          ? parametric_causal_mask<T>(n_obs, n_prefix)
                          : full_mask<T>(int(tok.rows()));
    ad::Var<T> out = tf_.forward(tok, mask);

    if (causal && n_obs > 0) {
      // One latent token under the causal scheme: prefix i's latent is the
      // decoder output at observation i.
      ad::Var<T> states = dec_(ad::slice_rows(out, n_prefix, n_prefix + n_obs));
      if (per_prefix) {
        per_prefix->clear();
        for (int64_t i = 0; i < n_obs; ++i)
          per_prefix->push_back(ad::slice_rows(states, i, i + 1));
      }
      return ad::slice_rows(states, n_obs - 1, n_obs);
    }
    ad::Var<T> new_latent =
        dec_(ad::slice_rows(out, 0, rc_.latent_tokens));
    if (per_prefix) {
      per_prefix->clear();
      per_prefix->push_back(new_latent);
    }
    return new_latent;
  }

  ad::Var<T> validation_loss(const std::vector<ad::Var<T>>& latents,
                             const Dataset<T>& valid) const {
    ad::Var<T> total;
    for (const auto& latent : latents) {
      ad::Var<T> loss = detail::prediction_loss(predict(latent, valid.x),
                                                valid, head_);
      total = total.defined() ? ad::add(total, loss) : loss;
    }
    return ad::scale(total, T(1) / T(latents.size()));
  }

  ChainGraph<T> build_chain(const Task<T>& task, int k, uint64_t seed,
                            int batch_size, int valid_batch) const {
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    Rng noncausal_rng(derive_seed(seed, 12));

    ChainGraph<T> chain;
    ad::Var<T> state = init_state_;
    ad::Var<T> loss0 = validation_loss({init_state_}, val);
    chain.values.loss0 = detail::scalar(loss0);
    ad::Var<T> sum = loss0;
    ad::Var<T> step_sum;
    for (int t = 0; t < k; ++t) {
      Dataset<T> batch = gather_rows(task.train, plan.train_batches[size_t(t)]);
      if (smc_.masking == MaskingScheme::non_causal) {
        int n = sample_noncausal_context(noncausal_rng, smc_.max_context);
        n = std::min<int>(n, int(batch.size()));
        std::vector<int64_t> front(size_t(n));
        std::iota(front.begin(), front.end(), 0);
        batch = gather_rows(batch, front);
      }
      std::vector<ad::Var<T>> per_prefix;
      ad::Var<T> new_state =
          step(ad::stop_gradient(state), batch, &per_prefix);
      ad::Var<T> loss_t = validation_loss(per_prefix, val);
      chain.values.per_step.push_back(detail::scalar(loss_t));
      sum = ad::add(sum, loss_t);
      step_sum = step_sum.defined() ? ad::add(step_sum, loss_t) : loss_t;
      state = new_state;
    }
    chain.objective = ad::scale(sum, T(1) / T(k + 1));
    chain.reported = ad::scale(step_sum, T(1) / T(k));
    return chain;
  }

  RefinementTrace<T> run_refinement(const Task<T>& task, int k, uint64_t seed,
                                    int batch_size, int valid_batch) const {
    ad::NoGradGuard ng;
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    RefinementTrace<T> trace;
    ad::Var<T> state = ad::Var<T>::constant(init_state_.val());
    trace.states.push_back(state.val());
    trace.valid_losses.push_back(
        detail::scalar(validation_loss({state}, val)));
    for (int t = 0; t < k; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t)]);
      state = step(state, batch);
      trace.states.push_back(state.val());
      trace.valid_losses.push_back(
          detail::scalar(validation_loss({state}, val)));
    }
    return trace;
  }

  std::vector<double> eval_metrics(const Task<T>& task,
                                   const std::vector<int>& ks, uint64_t seed,
                                   int batch_size) const {
    ad::NoGradGuard ng;
    int k_max = *std::max_element(ks.begin(), ks.end());
    auto plan = split_minibatches(task, batch_size, k_max, seed,
                                  int(task.valid.size()));
    ad::Var<T> state = ad::Var<T>::constant(init_state_.val());
    std::vector<double> out;
    for (int t = 1; t <= k_max; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t - 1)]);
      state = step(state, batch);
      if (std::find(ks.begin(), ks.end(), t) != ks.end()) {
        ad::Var<T> preds = predict(state, task.valid.x);
        if (head_.classification)
          out.push_back(
              classification_error_logits(preds.val(), task.valid.labels));
        else
          out.push_back(mse(preds.val(), task.valid.y));
      }
    }
    return out;
  }

 private:
  // d(batch loss)/d(latent) through the predictor, detached.
  TensorT<T> latent_gradient(const TensorT<T>& latent,
                             const Dataset<T>& batch) const {
    ad::ParamStore<T> local;
    ad::Var<T> leaf = local.create("latent", latent);
    ad::Var<T> loss =
        detail::prediction_loss(predict(leaf, batch.x), batch, head_);
    auto grads = ad::backward_named(loss, local);
    return grads.at("latent").reshaped(1, rc_.latent_tokens * rc_.latent_dim);
  }

  SequenceModelConfig smc_;
  RegimeConfig rc_;
  TaskHead head_;
  ad::ParamStore<T> ps_;
  Linear<T> enc_obs_, enc_state_, enc_grad_, dec_, pred_in_, pred_out_;
  ad::Var<T> slot_embed_;
  Transformer<T> tf_;
  ad::Var<T> init_state_;
};

// ---------------------------------------------------------------------------
// Implicit amortization: the carried state is a per-query prediction (or a
// pre-output latent); queries ride along in the same pass as the context,
// isolated from each other by the mask.

template <typename T>
class ImplicitAmortizer {
 public:
  ImplicitAmortizer(const SequenceModelConfig& smc, const RegimeConfig& rc,
                    const TaskHead& head, uint64_t seed)
      : smc_(smc), rc_(rc), head_(head) {
    smc.validate();
    rc.validate(smc);
    if (rc.regime != Regime::implicit)
      throw std::invalid_argument("implicit amortizer: wrong regime config");
    Rng rng(derive_seed(seed, 11));
    enc_obs_ = Linear<T>(ps_, "enc_obs", head.d_x + head.n_out, smc.d_model,
                         rng);
    if (rc.implicit_state == ImplicitStateKind::pre_mlp) {
      // Separate query encoder; its state slot is the pre-output latent.
      enc_query_ = Linear<T>(ps_, "enc_query", head.d_x + rc.premlp_dim,
                             smc.d_model, rng);
      pred_in_ = Linear<T>(ps_, "pred_in", rc.premlp_dim,
                           rc.predictor_hidden, rng);
      pred_out_ =
          Linear<T>(ps_, "pred_out", rc.predictor_hidden, head.n_out, rng);
    }
    query_embed_ = ps_.create("query_embed",
                              TensorT<T>::randn(1, smc.d_model, rng, T(0.02)));
    tf_ = Transformer<T>(ps_, "tf", smc, rng);
    dec_ = Linear<T>(ps_, "dec", smc.d_model, state_dim(), rng);
    init_state_ =
        ps_.create("init_state", TensorT<T>::zeros(1, state_dim()));
  }

  ad::ParamStore<T>& param_store() { return ps_; }
  const TaskHead& head() const { return head_; }
  const SequenceModelConfig& model_config() const { return smc_; }
  const RegimeConfig& regime_config() const { return rc_; }
  std::string regime_name() const { return to_string(rc_.regime); }
  std::string signal_name() const { return to_string(rc_.signal); }
  ad::Var<T>& init_state() { return init_state_; }

  int state_dim() const {
    return rc_.implicit_state == ImplicitStateKind::pre_mlp ? rc_.premlp_dim
                                                            : head_.n_out;
  }

  // States carried between steps: raw decoder output for logits/pre_mlp,
  // normalized probabilities for the softmax variant.
  ad::Var<T> carried_state(const ad::Var<T>& decoded) const {
    if (rc_.implicit_state == ImplicitStateKind::softmax)
      return ad::softmax_rows(decoded);
    return decoded;
  }

  ad::Var<T> initial_states(int n_queries) const {
    TensorT<T> ones(n_queries, 1);
    for (auto& v : ones.data()) v = T(1);
    ad::Var<T> tiled =
        ad::matmul(ad::Var<T>::constant(ones), init_state_);
    return carried_state(tiled);
  }

  // One refinement pass: per-query states conditioned on their own query,
  // their own state and the masked context prefix.
  ad::Var<T> step(const ad::Var<T>& states_in, const TensorT<T>& queries,
                  const Dataset<T>& batch,
                  const std::vector<int>& query_prefixes) const {
    if (states_in.rows() != queries.rows())
      throw std::invalid_argument("implicit step: state/query count mismatch");
    if (batch.size() < 1)
      throw std::invalid_argument("implicit step: empty minibatch");
    TensorT<T> obs = detail::observation_matrix(batch, head_);
    ad::Var<T> ctx = enc_obs_(ad::Var<T>::constant(obs));
    ad::Var<T> q_in =
        ad::concat_cols({ad::Var<T>::constant(queries), states_in});
    ad::Var<T> q_tok = rc_.implicit_state == ImplicitStateKind::pre_mlp
                           ? enc_query_(q_in)
                           : enc_obs_(q_in);
    ad::Var<T> q_ones = ad::Var<T>::constant([&] {
      TensorT<T> ones(queries.rows(), 1);
      for (auto& v : ones.data()) v = T(1);
      return ones;
    }());
    q_tok = ad::add(q_tok, ad::matmul(q_ones, query_embed_));
    ad::Var<T> tok = ad::concat_rows({ctx, q_tok});
    TensorT<T> mask =
        implicit_mask<T>(int(batch.size()), query_prefixes,
                         smc_.masking == MaskingScheme::causal);
    ad::Var<T> out = tf_.forward(tok, mask);
    ad::Var<T> decoded =
        dec_(ad::slice_rows(out, batch.size(), tok.rows()));
    return decoded;
  }

  // Loss of decoded per-query outputs against validation targets.
  ad::Var<T> decoded_loss(const ad::Var<T>& decoded,
                          const Dataset<T>& val) const {
    if (rc_.implicit_state == ImplicitStateKind::pre_mlp)
      return detail::prediction_loss(predict_from_state(decoded), val, head_);
    if (head_.classification)
      return ad::cross_entropy_loss(decoded, val.labels);
    return ad::mse_loss(decoded, val.y);
  }

  // pre_mlp states decode to predictions through the learned head; other
  // variants are already in prediction space.
  ad::Var<T> predict_from_state(const ad::Var<T>& states) const {
    if (rc_.implicit_state == ImplicitStateKind::pre_mlp)
      return pred_out_(ad::gelu(pred_in_(states)));
    return states;
  }

  ChainGraph<T> build_chain(const Task<T>& task, int k, uint64_t seed,
                            int batch_size, int valid_batch) const {
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    TensorT<T> queries = val.x;
    Rng rng(derive_seed(seed, 12));

    ChainGraph<T> chain;
    ad::Var<T> states = initial_states(int(queries.rows()));
    // The init loss is measured in decoder-output terms: for the softmax
    // variant the carried state is a distribution, whose log feeds the loss.
    ad::Var<T> loss0 = init_loss(states, val);
    chain.values.loss0 = detail::scalar(loss0);
    ad::Var<T> sum = loss0;
    ad::Var<T> step_sum;
    for (int t = 0; t < k; ++t) {
      Dataset<T> batch = gather_rows(task.train, plan.train_batches[size_t(t)]);
      if (smc_.masking == MaskingScheme::non_causal) {
        int n = sample_noncausal_context(rng, smc_.max_context);
        n = std::min<int>(n, int(batch.size()));
        std::vector<int64_t> front(size_t(n));
        std::iota(front.begin(), front.end(), 0);
        batch = gather_rows(batch, front);
      }
      std::vector<int> prefixes = sample_prefixes(int(batch.size()),
                                                  int(queries.rows()), rng);
      ad::Var<T> decoded =
          step(ad::stop_gradient(states), queries, batch, prefixes);
      ad::Var<T> loss_t = decoded_loss(decoded, val);
      chain.values.per_step.push_back(detail::scalar(loss_t));
      sum = ad::add(sum, loss_t);
      step_sum = step_sum.defined() ? ad::add(step_sum, loss_t) : loss_t;
      states = carried_state(decoded);
    }
    chain.objective = ad::scale(sum, T(1) / T(k + 1));
    chain.reported = ad::scale(step_sum, T(1) / T(k));
    return chain;
  }

  RefinementTrace<T> run_refinement(const Task<T>& task, int k, uint64_t seed,
                                    int batch_size, int valid_batch) const {
    ad::NoGradGuard ng;
    auto plan = split_minibatches(task, batch_size, k, seed, valid_batch);
    Dataset<T> val = gather_rows(task.valid, plan.valid_batch);
    TensorT<T> queries = val.x;
    RefinementTrace<T> trace;
    ad::Var<T> states = initial_states(int(queries.rows()));
    trace.states.push_back(states.val());
    trace.valid_losses.push_back(detail::scalar(init_loss(states, val)));
    for (int t = 0; t < k; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t)]);
      std::vector<int> prefixes(size_t(queries.rows()), int(batch.size()));
      ad::Var<T> decoded = step(states, queries, batch, prefixes);
      trace.states.push_back(carried_state(decoded).val());
      trace.valid_losses.push_back(detail::scalar(decoded_loss(decoded, val)));
      states = carried_state(decoded);
    }
    return trace;
  }

  std::vector<double> eval_metrics(const Task<T>& task,
                                   const std::vector<int>& ks, uint64_t seed,
                                   int batch_size,
                                   const std::string& metric = "") const {
    ad::NoGradGuard ng;
    int k_max = *std::max_element(ks.begin(), ks.end());
    auto plan = split_minibatches(task, batch_size, k_max, seed,
                                  int(task.valid.size()));
    const Dataset<T>& val = task.valid;
    ad::Var<T> states = initial_states(int(val.size()));
    ad::Var<T> decoded;
    std::vector<double> out;
    for (int t = 1; t <= k_max; ++t) {
      Dataset<T> batch =
          gather_rows(task.train, plan.train_batches[size_t(t - 1)]);
      std::vector<int> prefixes(size_t(val.size()), int(batch.size()));
      decoded = step(states, val.x, batch, prefixes);
      states = carried_state(decoded);
      if (std::find(ks.begin(), ks.end(), t) != ks.end()) {
        if (metric == "ce") {
          out.push_back(detail::scalar(decoded_loss(decoded, val)));
        } else {
          ad::Var<T> preds = predict_from_state(decoded);
          if (head_.classification)
            out.push_back(
                classification_error_logits(preds.val(), val.labels));
          else
            out.push_back(mse(preds.val(), val.y));
        }
      }
    }
    return out;
  }

 private:
  ad::Var<T> init_loss(const ad::Var<T>& states, const Dataset<T>& val) const {
    if (rc_.implicit_state == ImplicitStateKind::softmax) {
      // states are probabilities; score through their log
      ad::Var<T> logp = ad::log_elem(ad::add_scalar(states, T(1e-9)));
      return ad::scale(ad::mean_all(ad::pick_cols(logp, val.labels)), T(-1));
    }
    if (rc_.implicit_state == ImplicitStateKind::pre_mlp)
      return detail::prediction_loss(predict_from_state(states), val, head_);
    if (head_.classification)
      return ad::cross_entropy_loss(states, val.labels);
    return ad::mse_loss(states, val.y);
  }

  std::vector<int> sample_prefixes(int n_ctx, int n_queries, Rng& rng) const {
    std::vector<int> out(size_t(n_queries), n_ctx);
    if (smc_.masking == MaskingScheme::causal) {
      std::uniform_int_distribution<int> dist(1, n_ctx);
      for (auto& p : out) p = dist(rng);
    }
    return out;
  }

  SequenceModelConfig smc_;
  RegimeConfig rc_;
  TaskHead head_;
  ad::ParamStore<T> ps_;
  Linear<T> enc_obs_, enc_query_, dec_, pred_in_, pred_out_;
  ad::Var<T> query_embed_;
  Transformer<T> tf_;
  ad::Var<T> init_state_;
};

}  // namespace amort
