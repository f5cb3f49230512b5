#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xsmoe/features.hpp"
#include "xsmoe/model.hpp"
#include "xsmoe/seq_rec.hpp"

namespace xsmoe {

// xsmoe: expandable side MoE on both modalities.
// static: one continually trained expert per layer, never expanded or pruned.
// noft: no side networks; the fusion head reads the top backbone layer.
// visual / textual: xsmoe restricted to one modality.
enum class Variant : std::uint8_t { xsmoe = 0, static_experts = 1, noft = 2, visual = 3, textual = 4 };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::xsmoe: return "xsmoe";
    case Variant::static_experts: return "static";
    case Variant::noft: return "noft";
    case Variant::visual: return "visual";
    case Variant::textual: return "textual";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::xsmoe, Variant::static_experts, Variant::noft, Variant::visual, Variant::textual})
    if (s == to_string(v)) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "' (xsmoe|static|noft|visual|textual)");
}

inline bool uses_modality(Variant v, Modality m) {
  if (v == Variant::visual) return m == Modality::visual;
  if (v == Variant::textual) return m == Modality::textual;
  return true;
}

inline bool expands(Variant v) { return v == Variant::xsmoe || v == Variant::visual || v == Variant::textual; }

struct ModelDims {
  std::size_t d = 32;          // backbone / side width
  std::size_t d_hidden = 8;    // expert bottleneck d'
  std::size_t d_embed = 32;    // item embedding d_e
  std::size_t layers = 2;      // side layers M
  std::size_t group = 1;       // backbone layers per side layer g
  SeqEncoderConfig encoder{};  // encoder.dim is forced to d_embed
};

/// Item tower (side networks + fusion) and sequence encoder.
template <typename T>
class Recommender {
 public:
  Variant variant = Variant::xsmoe;
  ModelDims dims;
  std::optional<SideNetwork<T>> visual;
  std::optional<SideNetwork<T>> textual;
  FusionHead<T> fusion;
  SeqEncoder<T> encoder;

  static Recommender create(Variant variant, ModelDims dims, Rng& rng) {
    dims.encoder.dim = dims.d_embed;
    Recommender m;
    m.variant = variant;
    m.dims = dims;
    Rng side_rng = rng.split("side");
    Rng head_rng = rng.split("fusion");
    Rng enc_rng = rng.split("encoder");
    std::size_t fused_in = 0;
    for (Modality mod : {Modality::visual, Modality::textual}) {
      if (!uses_modality(variant, mod)) continue;
      fused_in += dims.d;
      if (variant == Variant::noft) continue;
      Rng r = side_rng.split(to_string(mod));
      m.side(mod) = SideNetwork<T>::create(mod, dims.layers, dims.d, dims.d_hidden, dims.group, r);
    }
    m.fusion = FusionHead<T>::init(fused_in, dims.d_embed, head_rng);
    m.encoder = SeqEncoder<T>::init(dims.encoder, enc_rng);
    return m;
  }

  std::optional<SideNetwork<T>>& side(Modality m) { return m == Modality::visual ? visual : textual; }
  const std::optional<SideNetwork<T>>& side(Modality m) const {
    return m == Modality::visual ? visual : textual;
  }

  std::size_t stack_depth() const { return dims.group * dims.layers + 1; }

  /// Item embeddings for a batch of feature stacks, [n, d_e].
  Tensor<T> item_embeddings(const FeatureBatch<T>& f) {
    std::vector<Tensor<T>> parts;
    for (Modality mod : {Modality::visual, Modality::textual}) {
      if (!uses_modality(variant, mod)) continue;
      const auto& stack = mod == Modality::visual ? f.visual : f.textual;
      if (stack.size() != stack_depth())
        throw DataError(std::string(to_string(mod)) + " feature stack depth " + std::to_string(stack.size()) +
                        " != " + std::to_string(stack_depth()));
      auto& net = side(mod);
      parts.push_back(net ? net->forward(stack) : stack.back());
    }
    return fusion.forward(parts);
  }

  std::vector<SideNetwork<T>*> side_networks() {
    std::vector<SideNetwork<T>*> out;
    if (visual) out.push_back(&*visual);
    if (textual) out.push_back(&*textual);
    return out;
  }
  std::vector<const SideNetwork<T>*> side_networks() const {
    std::vector<const SideNetwork<T>*> out;
    if (visual) out.push_back(&*visual);
    if (textual) out.push_back(&*textual);
    return out;
  }

  void expand(int window) {
    for (auto* n : side_networks()) n->expand(window);
  }
  void arm_utilization(bool on) {
    for (auto* n : side_networks()) n->arm_utilization(on);
  }

  /// Side-network parameters only (the quantity the closed forms describe).
  ParamCounts side_param_counts() const {
    ParamCounts c;
    for (const auto* n : side_networks()) c += n->param_counts();
    return c;
  }
  /// Fusion head and sequence encoder.
  ParamCounts head_param_counts() const {
    ParamCounts c;
    fusion.count(c);
    for (const auto& p : encoder.parameters()) count_params(p, c);
    return c;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto* n : side_networks())
      for (auto& p : n->parameters()) out.push_back(p);
    out.push_back(fusion.fc);
    out.push_back(fusion.bias);
    for (auto& p : encoder.parameters()) out.push_back(p);
    return out;
  }

  std::vector<Tensor<T>> trainable_parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& p : parameters())
      if (p.requires_grad()) out.push_back(p);
    return out;
  }
};

/// Deep copy of every parameter value, in parameters() order.
template <typename T>
std::vector<std::vector<T>> snapshot_values(const Recommender<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

template <typename T>
void restore_values(Recommender<T>& m, const std::vector<std::vector<T>>& snap) {
  auto params = m.parameters();
  if (params.size() != snap.size()) throw ContractError("restore_values: structure changed since snapshot");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != snap[i].size()) throw ContractError("restore_values: tensor size changed");
    std::copy(snap[i].begin(), snap[i].end(), params[i].data().begin());
  }
}

/// FNV-1a over the raw bytes of every parameter value.
template <typename T>
std::uint64_t hash_tensors(const std::vector<Tensor<T>>& ts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : ts) {
    auto d = t.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(T)), h);
  }
  return h;
}

}  // namespace xsmoe
