#include "pomnet/layers.hpp"

#include <cmath>
#include <numbers>

namespace pomnet {

using ag::Var;

namespace {

template <typename T>
void add_conv(ParamStore<T>& s, const std::string& name, int out, int in, int k, Rng& rng) {
  s.add_normal(name, {out, in, k, k}, std::sqrt(2.0 / (in * k * k)), rng);
}

template <typename T>
void add_linear(ParamStore<T>& s, const std::string& name, int out, int in, Rng& rng) {
  s.add_normal(name + ".weight", {out, in}, std::sqrt(2.0 / (in + out)), rng);
  s.add_constant(name + ".bias", {out}, T(0));
}

template <typename T>
void add_norm(ParamStore<T>& s, const std::string& name, int channels) {
  s.add_constant(name + ".gamma", {channels}, T(1));
  s.add_constant(name + ".beta", {channels}, T(0));
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(const ModelConfig& config, std::string prefix, ParamStore<T>& store, Rng& rng)
    : config_(config), prefix_(std::move(prefix)), store_(&store) {
  if (config_.backbone == BackboneKind::Plain) {
    int in = 3;
    for (int i = 0; i < stage_count(); ++i) {
      const std::string name = prefix_ + ".stage" + std::to_string(i + 1) + ".conv";
      add_conv(store, name + ".weight", config_.channels[i], in, 3, rng);
      store.add_constant(name + ".bias", {config_.channels[i]}, T(0));
      in = config_.channels[i];
    }
    return;
  }
  add_conv(store, prefix_ + ".stem.weight", 64, 3, 7, rng);
  add_norm(store, prefix_ + ".stem.norm", 64);
  int in = 64;
  for (int st = 0; st < 4; ++st) {
    const int out = config_.channels[st], width = out / 4;
    for (int b = 0; b < config_.blocks[st]; ++b) {
      const std::string name = prefix_ + ".stage" + std::to_string(st + 1) + ".block" + std::to_string(b);
      add_conv(store, name + ".conv1.weight", width, in, 1, rng);
      add_norm(store, name + ".norm1", width);
      add_conv(store, name + ".conv2.weight", width, width, 3, rng);
      add_norm(store, name + ".norm2", width);
      add_conv(store, name + ".conv3.weight", out, width, 1, rng);
      add_norm(store, name + ".norm3", out);
      if (b == 0) {
        add_conv(store, name + ".shortcut.weight", out, in, 1, rng);
        add_norm(store, name + ".shortcut.norm", out);
      }
      in = out;
    }
  }
}

template <typename T>
Var<T> Backbone<T>::bottleneck(ag::Graph<T>& g, Var<T> x, const std::string& name, int stride, bool project) const {
  Bound<T> p{g, *store_};
  const int groups = config_.norm_groups;
  auto norm = [&](Var<T> v, const std::string& n) { return ag::group_norm(v, p(n + ".gamma"), p(n + ".beta"), groups); };
  Var<T> y = ag::relu(norm(ag::conv2d(x, p(name + ".conv1.weight"), 1, 0), name + ".norm1"));
  y = ag::relu(norm(ag::conv2d(y, p(name + ".conv2.weight"), stride, 1), name + ".norm2"));
  y = norm(ag::conv2d(y, p(name + ".conv3.weight"), 1, 0), name + ".norm3");
  Var<T> shortcut = project ? norm(ag::conv2d(x, p(name + ".shortcut.weight"), stride, 0), name + ".shortcut.norm") : x;
  return ag::relu(ag::add(y, shortcut));
}

template <typename T>
std::vector<Var<T>> Backbone<T>::forward(ag::Graph<T>& g, Var<T> image, int up_to_stage) const {
  Bound<T> p{g, *store_};
  std::vector<Var<T>> outs;
  Var<T> x = image;
  if (config_.backbone == BackboneKind::Plain) {
    for (int i = 0; i < up_to_stage; ++i) {
      const std::string name = prefix_ + ".stage" + std::to_string(i + 1) + ".conv";
      x = ag::conv2d(x, p(name + ".weight"), config_.strides[i], 1);
      x = ag::relu(ag::add_channel_bias(x, p(name + ".bias")));
      outs.push_back(x);
    }
    return outs;
  }
  x = ag::conv2d(x, p(prefix_ + ".stem.weight"), 2, 3);
  x = ag::relu(ag::group_norm(x, p(prefix_ + ".stem.norm.gamma"), p(prefix_ + ".stem.norm.beta"), config_.norm_groups));
  x = ag::max_pool2d(x, 3, 2, 1);
  for (int st = 0; st < up_to_stage; ++st) {
    for (int b = 0; b < config_.blocks[st]; ++b) {
      const std::string name = prefix_ + ".stage" + std::to_string(st + 1) + ".block" + std::to_string(b);
      x = bottleneck(g, x, name, (b == 0 && st > 0) ? 2 : 1, b == 0);
    }
    outs.push_back(x);
  }
  return outs;
}

std::vector<double> sine_position_embedding(int h, int w, int dim, double temperature) {
  const int half = dim / 2;
  std::vector<double> pe(static_cast<std::size_t>(h) * w * dim, 0.0);
  auto fill = [&](double pos, double* dst) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(temperature, 2.0 * (k / 2) / half);
      dst[k] = k % 2 == 0 ? std::sin(pos / freq) : std::cos(pos / freq);
    }
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* cell = pe.data() + (static_cast<std::size_t>(y) * w + x) * dim;
      fill((y + 0.5) / h * 2.0 * std::numbers::pi, cell);
      fill((x + 0.5) / w * 2.0 * std::numbers::pi, cell + half);
    }
  return pe;
}

template <typename T>
InteractionBlock<T>::InteractionBlock(const ModelConfig& config, std::string prefix, ParamStore<T>& store, Rng& rng)
    : heads_(config.attention_heads), prefix_(std::move(prefix)), store_(&store) {
  const int D = config.embed_dim;
  for (const char* attn : {".self", ".cross"}) {
    for (const char* proj : {".q", ".k", ".v", ".out"}) add_linear(store, prefix_ + attn + proj, D, D, rng);
  }
  add_norm(store, prefix_ + ".norm1", D);
  add_norm(store, prefix_ + ".norm2", D);
  add_linear(store, prefix_ + ".ffn1", config.ffn_dim, D, rng);
  add_linear(store, prefix_ + ".ffn2", D, config.ffn_dim, rng);
  add_norm(store, prefix_ + ".norm3", D);
}

template <typename T>
Var<T> InteractionBlock<T>::attend(ag::Graph<T>& g, const std::string& name, Var<T> q, Var<T> k, Var<T> v,
                                   const std::vector<std::uint8_t>& mask) const {
  Bound<T> p{g, *store_};
  auto lin = [&](Var<T> x, const std::string& n) { return ag::linear(x, p(n + ".weight"), p(n + ".bias")); };
  Var<T> out = ag::attention(lin(q, name + ".q"), lin(k, name + ".k"), lin(v, name + ".v"), heads_, mask);
  return lin(out, name + ".out");
}

template <typename T>
Var<T> InteractionBlock<T>::forward(ag::Graph<T>& g, Var<T> slots, const std::vector<std::uint8_t>& mask,
                                    Var<T> memory_keys, Var<T> memory_values) const {
  Bound<T> p{g, *store_};
  auto norm = [&](Var<T> x, const std::string& n) {
    return ag::layer_norm(x, p(prefix_ + n + ".gamma"), p(prefix_ + n + ".beta"));
  };
  Var<T> x = norm(ag::add(slots, attend(g, prefix_ + ".self", slots, slots, slots, mask)), ".norm1");
  x = norm(ag::add(x, attend(g, prefix_ + ".cross", x, memory_keys, memory_values, {})), ".norm2");
  Var<T> h = ag::relu(ag::linear(x, p(prefix_ + ".ffn1.weight"), p(prefix_ + ".ffn1.bias")));
  h = ag::linear(h, p(prefix_ + ".ffn2.weight"), p(prefix_ + ".ffn2.bias"));
  return norm(ag::add(x, h), ".norm3");
}

template class Backbone<float>;
template class Backbone<double>;
template class InteractionBlock<float>;
template class InteractionBlock<double>;

}  // namespace pomnet
