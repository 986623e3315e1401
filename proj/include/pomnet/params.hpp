#pragma once

#include "pomnet/autograd.hpp"
#include "pomnet/random.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace pomnet {

// Named learnable tensors with stable addresses, in creation order.
template <typename T>
class ParamStore {
 public:
  using Param = ag::Parameter<T>;

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Param& add(const std::string& name, ag::Shape shape);
  Param& add_normal(const std::string& name, ag::Shape shape, double stddev, Rng& rng);
  Param& add_constant(const std::string& name, ag::Shape shape, T value);

  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  Param& at(std::size_t i) { return *params_[i]; }
  const Param& at(std::size_t i) const { return *params_[i]; }

  void zero_grad();
  // Copies values from another store with the same names and shapes.
  void copy_values_from(const ParamStore& other);
  bool all_finite() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, std::size_t> index_;
};

// Stateless layer helpers that bind parameters into a graph.
template <typename T>
struct Bound {
  ag::Graph<T>& g;
  ParamStore<T>& store;
  ag::Var<T> operator()(const std::string& name) const { return g.parameter(store.get(name)); }
};

}  // namespace pomnet
