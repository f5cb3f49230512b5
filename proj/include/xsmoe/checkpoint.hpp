#pragma once

// Binary model checkpoint, little-endian:
//   char[4] "XSMO" | u8 version | u8 variant | u16 reserved
//   u32 d, d_hidden, d_embed, layers, group
//   u32 enc dim, max_len, blocks, heads, ffn | f64 dropout
//   i32 window | str rng_state
//   per modality (visual, textual): u8 present, then
//     u32 M, per layer: u32 N, per expert { u8 frozen | i32 birth | w_down | w_up }, router
//   fusion fc, fusion bias, encoder tensors in parameters() order
// Tensor: u32 rank | u32 dims... | u8 requires_grad | float32 values

#include <filesystem>
#include <string>

#include "xsmoe/data.hpp"
#include "xsmoe/recommender.hpp"

namespace xsmoe {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  Recommender<float> model;
  int window = 0;
  std::string rng_state;
};

namespace detail {

inline void put_tensor(std::string& b, const Tensor<float>& t) {
  io::put_u32(b, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_u32(b, static_cast<std::uint32_t>(d));
  io::put_u8(b, t.requires_grad() ? 1 : 0);
  for (float v : t.data()) io::put_f32(b, v);
}

inline Tensor<float> get_tensor(io::Reader& r, const Shape& expect) {
  const std::size_t rank = r.u32("tensor rank");
  if (rank == 0 || rank > 2) throw DataError(r.name() + ": tensor rank " + std::to_string(rank) + " is invalid");
  Shape s(rank);
  for (auto& d : s) d = r.u32("tensor dim");
  if (!expect.empty() && s != expect)
    throw DataError(r.name() + ": tensor shape " + shape_str(s) + " where " + shape_str(expect) + " was expected");
  const bool rg = r.u8("requires_grad") != 0;
  std::vector<float> v(shape_size(s));
  for (auto& x : v) x = r.f32("tensor values");
  return Tensor<float>::from(std::move(s), std::move(v), rg);
}

}  // namespace detail

inline std::string encode_checkpoint(const Recommender<float>& m, int window, const std::string& rng_state) {
  std::string b;
  b.append("XSMO");
  io::put_u8(b, kCheckpointVersion);
  io::put_u8(b, static_cast<std::uint8_t>(m.variant));
  io::put_u16(b, 0);
  for (std::size_t v : {m.dims.d, m.dims.d_hidden, m.dims.d_embed, m.dims.layers, m.dims.group})
    io::put_u32(b, static_cast<std::uint32_t>(v));
  const auto& ec = m.encoder.config;
  for (std::size_t v : {ec.dim, ec.max_len, ec.blocks, ec.heads, ec.ffn}) io::put_u32(b, static_cast<std::uint32_t>(v));
  io::put_f64(b, ec.dropout);
  io::put_u32(b, static_cast<std::uint32_t>(window));
  io::put_str(b, rng_state);
  for (Modality mod : {Modality::visual, Modality::textual}) {
    const auto& net = m.side(mod);
    io::put_u8(b, net ? 1 : 0);
    if (!net) continue;
    io::put_u32(b, static_cast<std::uint32_t>(net->layers.size()));
    for (const auto& layer : net->layers) {
      io::put_u32(b, static_cast<std::uint32_t>(layer.experts.size()));
      for (const auto& e : layer.experts) {
        io::put_u8(b, e.frozen ? 1 : 0);
        io::put_u32(b, static_cast<std::uint32_t>(e.birth_window));
        detail::put_tensor(b, e.w_down);
        detail::put_tensor(b, e.w_up);
      }
      detail::put_tensor(b, layer.router.weights);
    }
  }
  detail::put_tensor(b, m.fusion.fc);
  detail::put_tensor(b, m.fusion.bias);
  for (const auto& p : m.encoder.parameters()) detail::put_tensor(b, p);
  return b;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& name) {
  io::Reader r(bytes, name);
  if (r.take(4, "magic") != "XSMO") throw DataError(name + ": bad magic (not an XSMO checkpoint)");
  const auto version = r.u8("version");
  if (version != kCheckpointVersion) throw DataError(name + ": unsupported checkpoint version " + std::to_string(version));
  const auto vtag = r.u8("variant");
  if (vtag > 4) throw DataError(name + ": unknown variant tag " + std::to_string(vtag));
  r.u16("reserved");
  ModelDims dims;
  dims.d = r.u32("d");
  dims.d_hidden = r.u32("d_hidden");
  dims.d_embed = r.u32("d_embed");
  dims.layers = r.u32("layers");
  dims.group = r.u32("group");
  dims.encoder.dim = r.u32("encoder dim");
  dims.encoder.max_len = r.u32("max_len");
  dims.encoder.blocks = r.u32("blocks");
  dims.encoder.heads = r.u32("heads");
  dims.encoder.ffn = r.u32("ffn");
  dims.encoder.dropout = r.f64("dropout");

  Checkpoint ck;
  ck.window = static_cast<int>(static_cast<std::int32_t>(r.u32("window")));
  ck.rng_state = r.str("rng state");
  Rng scratch(0);
  auto& m = ck.model;
  try {
    m = Recommender<float>::create(static_cast<Variant>(vtag), dims, scratch);
  } catch (const ConfigError& e) {
    throw DataError(name + ": inconsistent dimensions: " + e.what());
  }
  const std::size_t d = dims.d, dh = dims.d_hidden;
  for (Modality mod : {Modality::visual, Modality::textual}) {
    const bool present = r.u8("modality flag") != 0;
    if (present != m.side(mod).has_value())
      throw DataError(name + ": " + std::string(to_string(mod)) + " side network presence does not match variant");
    if (!present) continue;
    auto& net = *m.side(mod);
    const std::size_t M = r.u32("layer count");
    if (M != dims.layers) throw DataError(name + ": layer count does not match header");
    for (std::size_t li = 0; li < M; ++li) {
      auto& layer = net.layers[li];
      const std::size_t n = r.u32("expert count");
      if (n == 0) throw DataError(name + ": layer with no experts");
      layer.experts.clear();
      for (std::size_t j = 0; j < n; ++j) {
        ExpertNet<float> e;
        e.frozen = r.u8("frozen flag") != 0;
        e.birth_window = static_cast<int>(static_cast<std::int32_t>(r.u32("birth window")));
        e.w_down = detail::get_tensor(r, {dh, d});
        e.w_up = detail::get_tensor(r, {d, dh});
        layer.experts.push_back(std::move(e));
      }
      layer.router.weights = detail::get_tensor(r, {n + 1, d});
      layer.util_num.assign(n, 0.0);
      layer.check_structure();
    }
  }
  m.fusion.fc = detail::get_tensor(r, m.fusion.fc.shape());
  m.fusion.bias = detail::get_tensor(r, m.fusion.bias.shape());
  auto refresh = [&](Tensor<float>& t) { t = detail::get_tensor(r, t.shape()); };
  refresh(m.encoder.positions);
  refresh(m.encoder.ln_g);
  refresh(m.encoder.ln_b);
  for (auto& blk : m.encoder.blocks)
    for (Tensor<float>* t : {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv, &blk.wo, &blk.bo, &blk.ln1_g,
                             &blk.ln1_b, &blk.w1, &blk.b1, &blk.w2, &blk.b2, &blk.ln2_g, &blk.ln2_b})
      refresh(*t);
  r.expect_end();
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Recommender<float>& m, int window,
                            const std::string& rng_state) {
  io::spit(path, encode_checkpoint(m, window, rng_state));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::slurp(path), path.string());
}

}  // namespace xsmoe
