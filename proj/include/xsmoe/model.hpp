#pragma once

// Expandable side mixture-of-experts over cached, pooled backbone features.
//
// Each modality owns a SideNetwork of M SideLayers. A layer mixes the cached
// backbone output l_i with its experts' outputs E_j(h_{i-1}) using softmax
// router weights computed from h_{i-1}. Windows grow a layer by one expert
// (expand) and shrink it by at most one (prune, driven by utilization).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xsmoe/ops.hpp"
#include "xsmoe/rng.hpp"
#include "xsmoe/tensor.hpp"

namespace xsmoe {

enum class Modality : std::uint8_t { visual = 0, textual = 1 };

inline std::string_view to_string(Modality m) {
  return m == Modality::visual ? "visual" : "textual";
}

struct ParamCounts {
  std::size_t total = 0;
  std::size_t trainable = 0;

  ParamCounts& operator+=(const ParamCounts& o) {
    total += o.total;
    trainable += o.trainable;
    return *this;
  }
  bool operator==(const ParamCounts&) const = default;
};

template <typename T>
void count_params(const Tensor<T>& t, ParamCounts& c) {
  c.total += t.size();
  if (t.requires_grad()) c.trainable += t.size();
}

template <typename T>
Tensor<T> random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                        bool requires_grad = true) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::from({rows, cols}, std::move(v), requires_grad);
}

/// Down-projection, GELU, up-projection, plus skip connection.
template <typename T>
struct ExpertNet {
  Tensor<T> w_down;  // [d', d]
  Tensor<T> w_up;    // [d, d']
  bool frozen = false;
  int birth_window = 0;

  static ExpertNet init(std::size_t d, std::size_t d_hidden, Rng& rng, int birth_window = 0) {
    ExpertNet e;
    e.w_down = random_matrix<T>(d_hidden, d, 1.0 / std::sqrt(double(d)), rng);
    e.w_up = random_matrix<T>(d, d_hidden, 0.1 / std::sqrt(double(d_hidden)), rng);
    e.birth_window = birth_window;
    return e;
  }

  std::size_t dim() const { return w_up.dim(0); }
  std::size_t hidden() const { return w_down.dim(0); }

  /// h: [n, d] -> W_up GELU(W_down h) + h, row-wise.
  Tensor<T> forward(const Tensor<T>& h) const {
    if (h.rank() != 2 || h.dim(1) != dim())
      throw ShapeError("expert_forward: input " + shape_str(h.shape()) + " but expert width is " +
                       std::to_string(dim()));
    return add(matmul_nt(gelu(matmul_nt(h, w_down)), w_up), h);
  }

  void freeze() {
    frozen = true;
    w_down.set_requires_grad(false);
    w_up.set_requires_grad(false);
    w_down.zero_grad();
    w_up.zero_grad();
  }

  void count(ParamCounts& c) const {
    count_params(w_down, c);
    count_params(w_up, c);
  }
};

/// Row 0 scores the backbone slot; row j scores expert j.
template <typename T>
struct Router {
  Tensor<T> weights;  // [N+1, d]
  std::size_t layer_index = 0;

  std::size_t slots() const { return weights.dim(0); }

  Tensor<T> forward(const Tensor<T>& h) const { return softmax_rows(matmul_nt(h, weights)); }
};

struct UtilizationResult {
  std::vector<double> scores;
  bool degenerate = false;  // every accumulator was zero; scores are uniform
};

template <typename T>
class SideLayer {
 public:
  std::vector<ExpertNet<T>> experts;
  Router<T> router;
  std::vector<double> util_num;  // sum of ||alpha_j z_j||_2 per expert
  double util_backbone = 0.0;    // sum of ||alpha_0 l_i||_2
  std::uint64_t util_count = 0;
  bool util_armed = false;

  static SideLayer init(std::size_t d, std::size_t d_hidden, std::size_t layer_index, Rng& rng) {
    SideLayer layer;
    layer.experts.push_back(ExpertNet<T>::init(d, d_hidden, rng, 0));
    layer.router.weights = Tensor<T>::zeros({2, d}, true);
    layer.router.layer_index = layer_index;
    layer.util_num.assign(1, 0.0);
    return layer;
  }

  std::size_t num_experts() const { return experts.size(); }

  void check_structure() const {
    if (experts.empty()) throw ContractError("side layer has no experts");
    if (router.slots() != experts.size() + 1)
      throw ContractError("router at layer " + std::to_string(router.layer_index) + " has " +
                          std::to_string(router.slots()) + " rows for " +
                          std::to_string(experts.size()) + " experts");
    if (util_num.size() != experts.size())
      throw ContractError("utilization accumulators do not match expert count");
  }

  /// h_prev, l_i: [n, d]. Returns alpha_0 l_i + sum_j alpha_j E_j(h_prev).
  Tensor<T> forward(const Tensor<T>& h_prev, const Tensor<T>& l_i) {
    check_structure();
    if (l_i.shape() != h_prev.shape())
      throw ShapeError("layer_forward: backbone output " + shape_str(l_i.shape()) +
                       " vs side state " + shape_str(h_prev.shape()));
    Tensor<T> alpha = router.forward(h_prev);
    std::vector<Tensor<T>> inputs;
    inputs.reserve(experts.size() + 1);
    inputs.push_back(l_i);
    for (const auto& e : experts) inputs.push_back(e.forward(h_prev));
    if (util_armed) accumulate_utilization(alpha, inputs);
    last_alpha = alpha.detach();
    return mixture(alpha, inputs);
  }

  /// Routing weights of the most recent forward, [n, N+1].
  Tensor<T> last_alpha;

 private:
  void accumulate_utilization(const Tensor<T>& alpha, const std::vector<Tensor<T>>& inputs) {
    const std::size_t n = alpha.dim(0), k = alpha.dim(1), d = inputs[0].dim(1);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < k; ++j) {
        double sq = 0.0;
        const T* z = inputs[j].data().data() + r * d;
        for (std::size_t c = 0; c < d; ++c) sq += double(z[c]) * double(z[c]);
        const double contrib = std::abs(double(alpha[r * k + j])) * std::sqrt(sq);
        if (j == 0)
          util_backbone += contrib;
        else
          util_num[j - 1] += contrib;
      }
    }
    util_count += n;
  }
};

/// Turns the accumulators into r_j = u_j / sum_i u_i and resets them. With
/// include_backbone the denominator also counts the backbone slot, so the
/// scores need not sum to one.
template <typename T>
UtilizationResult finalize_utilization(SideLayer<T>& layer, bool include_backbone = false) {
  if (layer.util_count == 0)
    throw ContractError("finalize_utilization: no armed forward pass this window");
  UtilizationResult res;
  const std::size_t n = layer.util_num.size();
  double denom = 0.0;
  for (double u : layer.util_num) denom += u;
  if (include_backbone) denom += layer.util_backbone;
  if (!(denom > 0.0)) {
    res.scores.assign(n, 1.0 / double(n));
    res.degenerate = true;
  } else {
    res.scores.resize(n);
    for (std::size_t j = 0; j < n; ++j) res.scores[j] = layer.util_num[j] / denom;
  }
  std::fill(layer.util_num.begin(), layer.util_num.end(), 0.0);
  layer.util_backbone = 0.0;
  layer.util_count = 0;
  return res;
}

/// Removes the single expert with the smallest score if it is below tau and
/// the layer has more than one expert. Ties go to the lowest index.
template <typename T>
std::optional<std::size_t> prune(SideLayer<T>& layer, const std::vector<double>& r, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("prune: tau must lie in [0, 1]");
  layer.check_structure();
  if (r.size() != layer.num_experts())
    throw ContractError("prune: " + std::to_string(r.size()) + " scores for " +
                        std::to_string(layer.num_experts()) + " experts");
  if (layer.num_experts() <= 1) return std::nullopt;
  std::size_t victim = 0;
  for (std::size_t j = 1; j < r.size(); ++j)
    if (r[j] < r[victim]) victim = j;
  if (!(r[victim] < tau)) return std::nullopt;

  const std::size_t d = layer.router.weights.dim(1);
  const std::size_t rows = layer.router.slots();
  std::vector<T> w;
  w.reserve((rows - 1) * d);
  auto old = layer.router.weights.data();
  for (std::size_t row = 0; row < rows; ++row) {
    if (row == victim + 1) continue;
    w.insert(w.end(), old.begin() + row * d, old.begin() + (row + 1) * d);
  }
  const bool trainable = layer.router.weights.requires_grad();
  layer.router.weights = Tensor<T>::from({rows - 1, d}, std::move(w), trainable);
  layer.experts.erase(layer.experts.begin() + static_cast<std::ptrdiff_t>(victim));
  layer.util_num.erase(layer.util_num.begin() + static_cast<std::ptrdiff_t>(victim));
  layer.check_structure();
  return victim;
}

/// Side-tuning network for one modality. Layer i reads backbone output
/// l_{g*i}; the first layer's experts read h_0 = l_0.
template <typename T>
class SideNetwork {
 public:
  Modality modality = Modality::visual;
  std::vector<SideLayer<T>> layers;
  std::size_t group_factor = 1;

  static SideNetwork create(Modality m, std::size_t num_layers, std::size_t d, std::size_t d_hidden,
                            std::size_t group_factor, Rng& rng) {
    if (num_layers == 0 || group_factor == 0 || d == 0 || d_hidden == 0)
      throw ConfigError("side network dimensions must be positive");
    SideNetwork net;
    net.modality = m;
    net.group_factor = group_factor;
    for (std::size_t i = 0; i < num_layers; ++i) net.layers.push_back(SideLayer<T>::init(d, d_hidden, i + 1, rng));
    return net;
  }

  std::size_t num_layers() const { return layers.size(); }
  std::size_t dim() const { return layers.front().experts.front().dim(); }
  std::size_t hidden() const { return layers.front().experts.front().hidden(); }
  std::size_t stack_depth() const { return group_factor * layers.size() + 1; }

  /// stack[k]: backbone output l_k for the batch, [n, d]; k = 0..g*M.
  Tensor<T> forward(const std::vector<Tensor<T>>& stack) {
    if (stack.size() != stack_depth())
      throw DataError("side_forward: feature stack has " + std::to_string(stack.size()) +
                      " layers, network needs " + std::to_string(stack_depth()) + " (g=" +
                      std::to_string(group_factor) + ", M=" + std::to_string(layers.size()) + ")");
    Tensor<T> h = stack[0];
    for (std::size_t i = 0; i < layers.size(); ++i) h = layers[i].forward(h, stack[group_factor * (i + 1)]);
    return h;
  }

  /// Freezes every expert and appends, per layer, one trainable expert whose
  /// weights are the element-wise mean of the existing experts, plus a zero
  /// router row for it.
  void expand(int window) {
    NoGradGuard guard;
    for (auto& layer : layers) {
      layer.check_structure();
      const std::size_t n = layer.num_experts();
      const auto& first = layer.experts.front();
      std::vector<T> down(first.w_down.size(), T(0)), up(first.w_up.size(), T(0));
      for (const auto& e : layer.experts) {
        for (std::size_t i = 0; i < down.size(); ++i) down[i] += e.w_down[i];
        for (std::size_t i = 0; i < up.size(); ++i) up[i] += e.w_up[i];
      }
      for (auto& v : down) v /= T(n);
      for (auto& v : up) v /= T(n);
      ExpertNet<T> fresh;
      fresh.w_down = Tensor<T>::from(first.w_down.shape(), std::move(down), true);
      fresh.w_up = Tensor<T>::from(first.w_up.shape(), std::move(up), true);
      fresh.birth_window = window;
      for (auto& e : layer.experts) e.freeze();
      layer.experts.push_back(std::move(fresh));

      const std::size_t d = layer.router.weights.dim(1);
      std::vector<T> w(layer.router.weights.data().begin(), layer.router.weights.data().end());
      w.resize(w.size() + d, T(0));
      layer.router.weights = Tensor<T>::from({layer.router.slots() + 1, d}, std::move(w), true);
      layer.util_num.push_back(0.0);
      layer.check_structure();
    }
  }

  void arm_utilization(bool on) {
    for (auto& l : layers) l.util_armed = on;
  }
  void reset_utilization() {
    for (auto& l : layers) {
      std::fill(l.util_num.begin(), l.util_num.end(), 0.0);
      l.util_backbone = 0.0;
      l.util_count = 0;
    }
  }

  std::vector<std::size_t> experts_per_layer() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.num_experts());
    return out;
  }

  ParamCounts param_counts() const {
    ParamCounts c;
    for (const auto& l : layers) {
      for (const auto& e : l.experts) e.count(c);
      count_params(l.router.weights, c);
    }
    return c;
  }

  /// Every parameter tensor, trainable or not, in checkpoint order.
  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& l : layers) {
      for (const auto& e : l.experts) {
        out.push_back(e.w_down);
        out.push_back(e.w_up);
      }
      out.push_back(l.router.weights);
    }
    return out;
  }
};

/// Linear map over the concatenated modality outputs: fc [d_e, k*d] + bias.
template <typename T>
struct FusionHead {
  Tensor<T> fc;
  Tensor<T> bias;

  static FusionHead init(std::size_t in, std::size_t out, Rng& rng) {
    FusionHead h;
    h.fc = random_matrix<T>(out, in, 1.0 / std::sqrt(double(in)), rng);
    h.bias = Tensor<T>::zeros({out}, true);
    return h;
  }

  std::size_t out_dim() const { return fc.dim(0); }
  std::size_t in_dim() const { return fc.dim(1); }

  Tensor<T> forward(const std::vector<Tensor<T>>& parts) const {
    Tensor<T> x = parts.size() == 1 ? parts[0] : concat_cols(parts);
    if (x.dim(1) != in_dim())
      throw ShapeError("fuse: input width " + std::to_string(x.dim(1)) + " but head expects " +
                       std::to_string(in_dim()));
    return add_bias(matmul_nt(x, fc), bias);
  }

  void count(ParamCounts& c) const {
    count_params(fc, c);
    count_params(bias, c);
  }
};

/// e = FC([e_v; e_t]) for a batch of rows.
template <typename T>
Tensor<T> fuse(const FusionHead<T>& head, const Tensor<T>& e_v, const Tensor<T>& e_t) {
  return head.forward({e_v, e_t});
}

/// Closed form for a side network whose layers hold n_l experts each:
/// total = sum_l (2 n_l d d' + n_l d + d), trainable = sum_l (2 d d' + n_l d + d)
/// with one trainable expert per layer.
inline ParamCounts closed_form_params(const std::vector<std::size_t>& experts_per_layer, std::size_t d,
                                      std::size_t d_hidden) {
  ParamCounts c;
  for (std::size_t n : experts_per_layer) {
    c.total += 2 * n * d * d_hidden + n * d + d;
    c.trainable += 2 * d * d_hidden + n * d + d;
  }
  return c;
}

}  // namespace xsmoe
