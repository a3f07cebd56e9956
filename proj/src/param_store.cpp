#include "dsai/param_store.hpp"

#include <cstdint>
#include <istream>
#include <ostream>

namespace dsai {

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("parameter records: truncated stream");
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError("parameter records: truncated stream");
  return v;
}

void save_block(std::ostream& out, const std::vector<std::pair<std::string, Tensor>>& entries) {
  write_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) write_u64(out, e);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(Real)));
  }
}

void load_block(std::istream& in, std::vector<std::pair<std::string, Tensor>>& entries,
                const std::unordered_map<std::string, std::size_t>& index, const char* kind) {
  const std::uint32_t count = read_u32(in);
  if (count != entries.size()) {
    throw DataError(std::string("parameter records: expected ") + std::to_string(entries.size()) +
                    " " + kind + " entries, file has " + std::to_string(count));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(in);
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = read_u64(in);
    auto it = index.find(name);
    if (it == index.end()) {
      throw DataError("parameter records: unknown " + std::string(kind) + " '" + name + "'");
    }
    Tensor target = entries[it->second].second;
    if (target.shape() != shape) {
      throw DataError("parameter records: '" + name + "' has shape " + shape_str(shape) +
                      " in the file but " + shape_str(target.shape()) + " in the model");
    }
    in.read(reinterpret_cast<char*>(target.data()),
            static_cast<std::streamsize>(target.size() * sizeof(Real)));
    if (!in) throw DataError("parameter records: truncated data for '" + name + "'");
  }
}

}  // namespace

Tensor ParamStore::add(const std::string& name, Tensor init) {
  if (param_index_.count(name) || buffer_index_.count(name)) {
    throw ContractError("ParamStore: duplicate name '" + name + "'");
  }
  init.set_requires_grad(true);
  param_index_[name] = params_.size();
  params_.emplace_back(name, init);
  return init;
}

Tensor ParamStore::add_buffer(const std::string& name, Tensor init) {
  if (param_index_.count(name) || buffer_index_.count(name)) {
    throw ContractError("ParamStore: duplicate name '" + name + "'");
  }
  init.set_requires_grad(false);
  buffer_index_[name] = buffers_.size();
  buffers_.emplace_back(name, init);
  return init;
}

Tensor ParamStore::param(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ContractError("ParamStore: no parameter '" + name + "'");
  return params_[it->second].second;
}

Tensor ParamStore::buffer(const std::string& name) const {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ContractError("ParamStore: no buffer '" + name + "'");
  return buffers_[it->second].second;
}

std::size_t ParamStore::n_trainable() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : params_) {
    out.add(name, Tensor::from_data(t.shape(), std::vector<Real>(t.data(), t.data() + t.size())));
  }
  for (const auto& [name, t] : buffers_) {
    out.add_buffer(name,
                   Tensor::from_data(t.shape(), std::vector<Real>(t.data(), t.data() + t.size())));
  }
  return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.params_.size() != params_.size() || other.buffers_.size() != buffers_.size()) {
    throw ContractError("ParamStore: copy between stores of different layouts");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [oname, ot] = other.params_[i];
    auto& [name, t] = params_[i];
    if (name != oname || t.shape() != ot.shape()) {
      throw ContractError("ParamStore: layout mismatch at parameter '" + name + "'");
    }
    std::copy(ot.data(), ot.data() + ot.size(), t.data());
  }
  for (std::size_t i = 0; i < buffers_.size(); ++i) {
    const auto& [oname, ot] = other.buffers_[i];
    auto& [name, t] = buffers_[i];
    if (name != oname || t.shape() != ot.shape()) {
      throw ContractError("ParamStore: layout mismatch at buffer '" + name + "'");
    }
    std::copy(ot.data(), ot.data() + ot.size(), t.data());
  }
}

void ParamStore::save_records(std::ostream& out) const {
  save_block(out, params_);
  save_block(out, buffers_);
}

void ParamStore::load_records(std::istream& in) {
  load_block(in, params_, param_index_, "parameter");
  load_block(in, buffers_, buffer_index_, "buffer");
}

}  // namespace dsai
