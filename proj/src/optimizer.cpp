#include "pomnet/optimizer.hpp"

#include "pomnet/errors.hpp"

#include <cmath>

namespace pomnet {

Adam::Adam(ParamStore<float>& store, AdamConfig config) : store_(&store), config_(config) {
  for (std::size_t i = 0; i < store.count(); ++i) {
    m_.emplace_back(store.at(i).size(), 0.0f);
    v_.emplace_back(store.at(i).size(), 0.0f);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store_->count(); ++i) {
    auto& p = store_->at(i);
    if (p.grad.size() != p.value.size()) continue;  // untouched this step
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g);
      v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * g * g);
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      p.value[k] = static_cast<float>(p.value[k] - lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  out.push_back({"adam.step", {1}, {static_cast<float>(t_)}});
  for (std::size_t i = 0; i < store_->count(); ++i) {
    const auto& p = store_->at(i);
    out.push_back({"adam.m." + p.name, p.shape, m_[i]});
    out.push_back({"adam.v." + p.name, p.shape, v_[i]});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != 1 + 2 * store_->count() || tensors[0].name != "adam.step")
    throw CheckpointError("optimizer state does not match the model");
  t_ = static_cast<long long>(tensors[0].data.at(0));
  for (std::size_t i = 0; i < store_->count(); ++i) {
    const auto& p = store_->at(i);
    const auto& m = tensors[1 + 2 * i];
    const auto& v = tensors[2 + 2 * i];
    if (m.name != "adam.m." + p.name || v.name != "adam.v." + p.name || m.data.size() != p.size() ||
        v.data.size() != p.size())
      throw CheckpointError("optimizer state for " + p.name + " is missing or malformed");
    m_[i] = m.data;
    v_[i] = v.data;
  }
}

double step_decay_lr(double base, const std::vector<int>& decay_epochs, double factor, int epoch) {
  double lr = base;
  for (int e : decay_epochs)
    if (epoch >= e) lr *= factor;
  return lr;
}

}  // namespace pomnet
