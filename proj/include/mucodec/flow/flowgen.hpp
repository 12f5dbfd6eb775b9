#pragma once

#include <mucodec/core/adam.hpp>
#include <mucodec/core/checkpoint.hpp>
#include <mucodec/core/nn.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::flow {

struct DitConfig {
  std::size_t n_layers = 6;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::size_t norm_groups = 4;  // per-frame groups; 32 channels each at desk width
  double norm_eps = 1e-6;
  std::size_t n_timesteps = 1000;
  std::size_t latent_dim = 16;
  std::size_t cond_dim = 192;  // 0: unconditional model
  std::size_t ff_mult = 4;
  bool positions = true;  // sinusoidal frame positions; off for set-valued toy data

  /// 24 layers, head dim 72; 16 heads is an assumption (not stated).
  static DitConfig reference(std::size_t cond_dim) {
    DitConfig c;
    c.n_layers = 24;
    c.heads = 16;
    c.head_dim = 72;
    c.norm_groups = 32;
    c.cond_dim = cond_dim;
    return c;
  }

  std::size_t model_dim() const { return heads * head_dim; }

  void validate() const {
    if (n_layers == 0 || heads == 0 || head_dim == 0) throw std::invalid_argument("dit: empty architecture");
    if (norm_groups == 0 || model_dim() % norm_groups != 0) {
      throw std::invalid_argument("dit: model dim " + std::to_string(model_dim()) + " not divisible into " +
                                  std::to_string(norm_groups) + " norm groups");
    }
    if (n_timesteps < 2) throw std::invalid_argument("dit: need at least 2 timestep embeddings");
    if (latent_dim == 0) throw std::invalid_argument("dit: latent_dim must be positive");
  }
};

struct SamplerConfig {
  std::size_t n_steps = 50;
  double guidance = 1.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_steps < 1) throw std::invalid_argument("sampler: n_steps must be >= 1");
    if (!(guidance >= 0)) throw std::invalid_argument("sampler: guidance scale must be >= 0");
  }
};

inline Metadata to_meta(const DitConfig& d, const SamplerConfig& s) {
  return {{"kind", "flowgen"},
          {"n_layers", std::to_string(d.n_layers)},
          {"heads", std::to_string(d.heads)},
          {"head_dim", std::to_string(d.head_dim)},
          {"norm_groups", std::to_string(d.norm_groups)},
          {"norm_eps", std::to_string(d.norm_eps)},
          {"n_timesteps", std::to_string(d.n_timesteps)},
          {"latent_dim", std::to_string(d.latent_dim)},
          {"cond_dim", std::to_string(d.cond_dim)},
          {"ff_mult", std::to_string(d.ff_mult)},
          {"positions", d.positions ? "1" : "0"},
          {"sampler.n_steps", std::to_string(s.n_steps)},
          {"sampler.guidance", std::to_string(s.guidance)},
          {"sampler.seed", std::to_string(s.seed)}};
}

inline std::pair<DitConfig, SamplerConfig> from_meta(const Checkpoint& ck) {
  if (ck.require_meta("kind") != "flowgen") throw std::runtime_error("checkpoint is not a flowgen checkpoint");
  auto u = [&](const char* k) { return std::size_t(std::stoull(ck.require_meta(k))); };
  DitConfig d;
  d.n_layers = u("n_layers");
  d.heads = u("heads");
  d.head_dim = u("head_dim");
  d.norm_groups = u("norm_groups");
  d.norm_eps = std::stod(ck.require_meta("norm_eps"));
  d.n_timesteps = u("n_timesteps");
  d.latent_dim = u("latent_dim");
  d.cond_dim = u("cond_dim");
  d.ff_mult = u("ff_mult");
  d.positions = ck.require_meta("positions") == "1";
  d.validate();
  SamplerConfig s;
  s.n_steps = u("sampler.n_steps");
  s.guidance = std::stod(ck.require_meta("sampler.guidance"));
  s.seed = u("sampler.seed");
  return {d, s};
}

/// floor(t * (n-1)); t must lie in [0, 1].
inline std::size_t timestep_index(double t, std::size_t n_timesteps = 1000) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow: t=" + std::to_string(t) + " outside [0, 1]");
  return std::size_t(std::floor(t * double(n_timesteps - 1)));
}

/// Sinusoidal table: row i holds [sin(i w_k), cos(i w_k)], w_k = 10000^(-k/(D/2)).
inline Tensor<double> sinusoid_table(std::size_t rows, std::size_t dim) {
  Tensor<double> t(Shape{rows, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double w = std::pow(10000.0, -double(k) / double(half));
      t(i, k) = std::sin(double(i) * w);
      t(i, half + k) = std::cos(double(i) * w);
    }
  return t;
}

/// Per-frame group normalization without affine parameters: each frame's
/// channels are split into `groups` groups normalized independently.
template <typename T>
Var<T> frame_group_norm(const Var<T>& x, std::size_t groups, T eps) {
  const std::size_t R = x.rows(), C = x.cols();
  Var<T> r = ops::reshape(x, Shape{R * groups, C / groups});
  return ops::reshape(ops::layer_norm<T>(r, std::nullopt, std::nullopt, eps), Shape{R, C});
}

template <typename T>
Var<T> modulate(const Var<T>& h, const Var<T>& shift, const Var<T>& scale) {
  return ops::add(ops::mul(h, ops::add_scalar(scale, T(1))), shift);
}

template <typename T>
struct DitBlock {
  DitBlock() = default;
  DitBlock(const DitConfig& c, Rng& rng)
      : attn(c.model_dim(), c.heads, rng),
        ff(c.model_dim(), c.ff_mult * c.model_dim(), rng),
        table(normal_tensor<T>(Shape{6, c.model_dim()}, T(1.0 / std::sqrt(double(c.model_dim()))), rng)) {}

  nn::MultiHeadAttention<T> attn;
  nn::FeedForward<T> ff;
  Parameter<T> table;  // learned offsets for shift/scale/gate of both sub-layers

  /// `mod` is the shared [T, 6D] timestep modulation.
  Var<T> operator()(Var<T> x, const Var<T>& mod, std::size_t groups, T eps, const std::optional<Tensor<T>>& mask) {
    auto& g = x.graph();
    const std::size_t D = x.cols();
    Var<T> tab = g.param(table);
    auto part = [&](std::size_t i) {
      return ops::add(ops::slice_cols(mod, i * D, (i + 1) * D), ops::slice_rows(tab, i, i + 1));
    };
    Var<T> h = modulate(frame_group_norm(x, groups, eps), part(0), part(1));
    x = ops::add(x, ops::mul(attn(h, h, h, mask), part(2)));
    h = modulate(frame_group_norm(x, groups, eps), part(3), part(4));
    return ops::add(x, ops::mul(ff(h), part(5)));
  }

  void collect(NamedParams<T>& out, const std::string& p) {
    attn.collect(out, p + ".attn");
    ff.collect(out, p + ".ff");
    out.emplace_back(p + ".table", &table);
  }
};

/// Transformer velocity field with single shared adaptive-norm modulation.
template <typename T>
class Dit {
 public:
  Dit() = default;
  Dit(const DitConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t D = cfg.model_dim();
    in_proj_ = nn::Linear<T>(cfg.latent_dim, D, rng);
    if (cfg.cond_dim > 0) {
      cond_proj_ = nn::Linear<T>(cfg.cond_dim, D, rng);
      null_cond_ = Parameter<T>(normal_tensor<T>(Shape{D}, T(0.02), rng));
    }
    t_table_ = sinusoid_table(cfg.n_timesteps, D).template cast<T>();
    t_mlp1_ = nn::Linear<T>(D, D, rng);
    t_mlp2_ = nn::Linear<T>(D, D, rng);
    t_block_ = nn::Linear<T>(D, 6 * D, rng, true, T(0.5));
    for (std::size_t i = 0; i < cfg.n_layers; ++i) blocks_.emplace_back(cfg, rng);
    final_table_ = Parameter<T>(normal_tensor<T>(Shape{2, D}, T(1.0 / std::sqrt(double(D))), rng));
    out_proj_ = nn::Linear<T>(D, cfg.latent_dim, rng, true, T(0.1));
  }

  const DitConfig& config() const { return cfg_; }

  NamedParams<T> params() {
    NamedParams<T> out;
    in_proj_.collect(out, "in_proj");
    if (cfg_.cond_dim > 0) {
      cond_proj_.collect(out, "cond_proj");
      out.emplace_back("null_cond", &null_cond_);
    }
    t_mlp1_.collect(out, "t_mlp1");
    t_mlp2_.collect(out, "t_mlp2");
    t_block_.collect(out, "t_block");
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(out, "block" + std::to_string(i));
    out.emplace_back("final_table", &final_table_);
    out_proj_.collect(out, "out_proj");
    return out;
  }

  Parameter<T>& null_condition() { return null_cond_; }

  /// x_t [F, latent]; `t_index` holds one timestep index per frame or a single
  /// shared one; `cond` [F, cond_dim] or nullopt for the null condition.
  /// `mask` is an optional additive attention mask [F, F].
  Var<T> forward(const Var<T>& x_t, const std::vector<std::size_t>& t_index, const std::optional<Var<T>>& cond,
                 const std::optional<Tensor<T>>& mask = std::nullopt) {
    auto& g = x_t.graph();
    const std::size_t F = x_t.rows(), D = cfg_.model_dim();
    if (x_t.cols() != cfg_.latent_dim) throw std::invalid_argument("dit: latent width mismatch");
    if (t_index.size() != 1 && t_index.size() != F) throw std::invalid_argument("dit: need 1 or F timestep indices");
    for (auto i : t_index)
      if (i >= cfg_.n_timesteps) throw std::out_of_range("dit: timestep index out of range");
    Var<T> h = in_proj_(x_t);
    if (cfg_.positions) {
      const auto pos = sinusoid_table(F, D).template cast<T>();
      h = ops::add(h, g.constant(pos));
    }
    if (cfg_.cond_dim > 0) {
      if (cond) {
        if (cond->rows() != F || cond->cols() != cfg_.cond_dim) {
          throw std::invalid_argument("dit: condition " + shape_str(cond->shape()) + " does not align with " +
                                      std::to_string(F) + " latent frames of width " + std::to_string(cfg_.cond_dim));
        }
        h = ops::add(h, cond_proj_(*cond));
      } else {
        h = ops::add(h, g.param(null_cond_));
      }
    }
    Var<T> temb = ops::gather_rows(g.constant(t_table_), t_index);
    temb = t_mlp2_(ops::silu(t_mlp1_(temb)));
    Var<T> mod = t_block_(ops::silu(temb));
    const T eps = T(cfg_.norm_eps);
    for (auto& b : blocks_) h = b(h, mod, cfg_.norm_groups, eps, mask);
    Var<T> ft = g.param(final_table_);
    Var<T> shift = ops::add(temb, ops::slice_rows(ft, 0, 1)), scale = ops::add(temb, ops::slice_rows(ft, 1, 2));
    h = modulate(frame_group_norm(h, cfg_.norm_groups, eps), shift, scale);
    return out_proj_(h);
  }

  /// Inference velocity at a shared time t.
  Tensor<double> velocity(const Tensor<double>& x, double t, const Tensor<double>* cond) {
    Graph<T> g;
    std::optional<Var<T>> c;
    if (cond) c = g.constant(cond->template cast<T>());
    return forward(g.constant(x.template cast<T>()), {timestep_index(t, cfg_.n_timesteps)}, c)
        .value()
        .template cast<double>();
  }

  /// Refuses conditions whose width differs from the one trained on.
  void check_condition_dim(std::size_t dim) const {
    if (dim != cfg_.cond_dim) {
      throw std::invalid_argument("flowgen: condition dim " + std::to_string(dim) + " does not match the trained " +
                                  std::to_string(cfg_.cond_dim));
    }
  }

 private:
  DitConfig cfg_;
  nn::Linear<T> in_proj_, cond_proj_;
  Parameter<T> null_cond_;
  Tensor<T> t_table_;
  nn::Linear<T> t_mlp1_, t_mlp2_, t_block_;
  std::vector<DitBlock<T>> blocks_;
  Parameter<T> final_table_;
  nn::Linear<T> out_proj_;
};

// ---------------------------------------------------------------- objective

/// One training example on the straight path from noise x0 (t=0) to data x1 (t=1).
template <typename T>
struct FlowItem {
  Tensor<T> x1, x0;
  double t = 0;
  std::optional<Tensor<T>> cond;  // nullopt for unconditional models
  bool drop = false;              // replace the condition by the null embedding
};

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("flow: t=" + std::to_string(t) + " outside [0, 1]");
  if (x0.shape() != x1.shape()) throw std::invalid_argument("flow: x0/x1 shape mismatch");
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T((1 - t) * double(x0[i]) + t * double(x1[i]));
  return out;
}

template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x0, const Tensor<T>& x1) {
  Tensor<T> u(x0.shape());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = x1[i] - x0[i];
  return u;
}

/// Mean over items of MSE(v(x_t, t, c), x1 - x0). `predict` maps
/// (x_t node, item) to the predicted velocity node.
template <typename T, typename Predict>
Var<T> fm_loss(Graph<T>& g, const std::vector<FlowItem<T>>& items, Predict&& predict) {
  if (items.empty()) throw std::invalid_argument("fm_loss: empty batch");
  Var<T> total;
  for (const auto& it : items) {
    Var<T> xt = g.constant(interpolate(it.x0, it.x1, it.t));
    Var<T> l = ops::mse_loss(predict(xt, it), g.constant(target_velocity(it.x0, it.x1)));
    total = total.valid() ? ops::add(total, l) : l;
  }
  return ops::scale(total, T(1.0 / double(items.size())));
}

template <typename T>
Var<T> fm_loss(Graph<T>& g, Dit<T>& model, const std::vector<FlowItem<T>>& items) {
  const auto n = model.config().n_timesteps;
  return fm_loss(g, items, [&](const Var<T>& xt, const FlowItem<T>& it) {
    std::optional<Var<T>> c;
    if (it.cond && !it.drop) c = g.constant(*it.cond);
    return model.forward(xt, {timestep_index(it.t, n)}, c);
  });
}

/// Draws t ~ U[0,1], x0 ~ N(0, I) and the condition-drop flag for each latent.
template <typename T>
std::vector<FlowItem<T>> make_items(const std::vector<Tensor<T>>& latents, const std::vector<Tensor<T>>* conds,
                                    double cond_drop, Rng& rng) {
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  std::bernoulli_distribution drop(cond_drop);
  std::normal_distribution<double> n(0, 1);
  std::vector<FlowItem<T>> out;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    FlowItem<T> it;
    it.x1 = latents[i];
    it.x0 = Tensor<T>(latents[i].shape());
    for (auto& v : it.x0.vec()) v = T(n(rng));
    it.t = ut(rng);
    if (conds) it.cond = (*conds)[i];
    it.drop = cond_drop > 0 && drop(rng);
    out.push_back(std::move(it));
  }
  return out;
}

template <typename T>
double fm_train_step(Dit<T>& model, const std::vector<FlowItem<T>>& items, Adam<T>& opt) {
  Graph<T> g;
  Var<T> loss = fm_loss(g, model, items);
  const double v = double(loss.value().item());
  if (!std::isfinite(v)) throw std::runtime_error("flowgen: non-finite loss");
  g.backward(loss);
  if (auto bad = opt.step()) throw std::runtime_error("flowgen: non-finite gradient in " + *bad);
  return v;
}

// ---------------------------------------------------------------- sampling

/// Guided velocity (1-s) v_u + s v_c. At s = 1 and s = 0 only one branch is
/// evaluated, so the result is exactly the conditional or unconditional field.
template <typename Field>
Tensor<double> guided_velocity(Field&& field, const Tensor<double>& x, double t, double s) {
  if (s == 1.0) return field(x, t, true);
  if (s == 0.0) return field(x, t, false);
  const auto vc = field(x, t, true);
  auto v = field(x, t, false);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (1 - s) * v[i] + s * vc[i];
  return v;
}

/// Euler integration from t=0 to t=1 at t_k = k/n. `field(x, t, conditional)`.
template <typename Field>
Tensor<double> sample_euler_cfg(Field&& field, Tensor<double> x, const SamplerConfig& s) {
  s.validate();
  const double h = 1.0 / double(s.n_steps);
  for (std::size_t k = 0; k < s.n_steps; ++k) {
    const auto v = guided_velocity(field, x, double(k) / double(s.n_steps), s.guidance);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * v[i];
  }
  return x;
}

inline Tensor<double> gaussian_noise(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0, 1);
  Tensor<double> x(std::move(shape));
  for (auto& v : x.vec()) v = n(rng);
  return x;
}

/// Latent for a dequantized condition [F, cond_dim], starting from seeded noise.
template <typename T>
Tensor<double> sample(Dit<T>& model, const Tensor<double>& cond, const SamplerConfig& s) {
  model.check_condition_dim(cond.cols());
  auto field = [&](const Tensor<double>& x, double t, bool conditional) {
    return model.velocity(x, t, conditional ? &cond : nullptr);
  };
  return sample_euler_cfg(field, gaussian_noise(Shape{cond.rows(), model.config().latent_dim}, s.seed), s);
}

}  // namespace mucodec::flow
