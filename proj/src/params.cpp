#include "pomnet/params.hpp"

#include <cmath>
#include <stdexcept>

namespace pomnet {

template <typename T>
typename ParamStore<T>::Param& ParamStore<T>::add(const std::string& name, ag::Shape shape) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value.assign(ag::numel(shape), T(0));
  p->shape = std::move(shape);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
typename ParamStore<T>::Param& ParamStore<T>::add_normal(const std::string& name, ag::Shape shape, double stddev,
                                                         Rng& rng) {
  auto& p = add(name, std::move(shape));
  for (auto& v : p.value) v = static_cast<T>(rng.normal() * stddev);
  return p;
}

template <typename T>
typename ParamStore<T>::Param& ParamStore<T>::add_constant(const std::string& name, ag::Shape shape, T value) {
  auto& p = add(name, std::move(shape));
  std::fill(p.value.begin(), p.value.end(), value);
  return p;
}

template <typename T>
typename ParamStore<T>::Param& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

template <typename T>
const typename ParamStore<T>::Param& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return *params_[it->second];
}

template <typename T>
std::size_t ParamStore<T>::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
void ParamStore<T>::copy_values_from(const ParamStore& other) {
  if (other.count() != count()) throw std::invalid_argument("parameter stores differ in size");
  for (std::size_t i = 0; i < count(); ++i) {
    const auto& src = other.at(i);
    auto& dst = get(src.name);
    if (dst.shape != src.shape) throw std::invalid_argument("shape mismatch for " + src.name);
    dst.value = src.value;
  }
}

template <typename T>
bool ParamStore<T>::all_finite() const {
  for (const auto& p : params_)
    for (T v : p->value)
      if (!std::isfinite(v)) return false;
  return true;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace pomnet
