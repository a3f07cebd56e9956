#pragma once

#include <iosfwd>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dsai/tensor.hpp"

namespace dsai {

// Owner of all learnable state. Parameters are trainable leaves; buffers are
// non-trainable persistent state (batch-norm running statistics). Iteration
// follows insertion order, which fixes the parameter-group order everywhere
// (optimizer moments, checkpoints, gradient reports).
class ParamStore {
public:
  // Registers a trainable leaf under a unique name and returns the handle.
  Tensor add(const std::string& name, Tensor init);

  // Registers a non-trainable buffer under a unique name.
  Tensor add_buffer(const std::string& name, Tensor init);

  Tensor param(const std::string& name) const;
  Tensor buffer(const std::string& name) const;
  bool has_param(const std::string& name) const { return param_index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

  std::size_t n_params() const { return params_.size(); }
  // Total trainable scalar count.
  std::size_t n_trainable() const;

  void zero_grads();

  // Deep copy of parameter and buffer values (grads not copied).
  ParamStore clone() const;
  // Copies values from a store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

  // Raw binary record block: count, then per entry name, extents, f64 data.
  void save_records(std::ostream& out) const;
  // Fills an already-built store; every record must match an existing entry.
  void load_records(std::istream& in);

private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::unordered_map<std::string, std::size_t> param_index_;
  std::unordered_map<std::string, std::size_t> buffer_index_;
};

}  // namespace dsai
