#include "crin/params.hpp"

namespace crin {

ParamStore::ParamStore(const ParamStore& other) : dtype_(other.dtype_), entries_(other.entries_) { rebuild_index(); }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this != &other) {
    dtype_ = other.dtype_;
    entries_ = other.entries_;
    rebuild_index();
  }
  return *this;
}

void ParamStore::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].name] = i;
}

Tensor& ParamStore::add(const std::string& name, Tensor value, bool learnable) {
  if (contains(name)) throw ShapeError("ParamStore: duplicate parameter name '" + name + "'");
  if (value.dtype() != dtype_) value = value.to(dtype_);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, std::move(value), learnable, {}, {}});
  return entries_.back().value;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second];
}

std::vector<std::string> ParamStore::names(bool learnable_only) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (!learnable_only || e.learnable) out.push_back(e.name);
  }
  return out;
}

std::int64_t ParamStore::learnable_elements() const {
  std::int64_t total = 0;
  for (const auto& e : entries_) {
    if (e.learnable) total += e.value.numel();
  }
  return total;
}

ParamStore ParamStore::cast(DType dtype) const {
  ParamStore out(dtype);
  for (const auto& e : entries_) {
    Tensor& v = out.add(e.name, e.value.to(dtype), e.learnable);
    (void)v;
    auto& dst = out.entries_.back();
    if (!e.first_moment.empty()) dst.first_moment = e.first_moment.to(dtype);
    if (!e.second_moment.empty()) dst.second_moment = e.second_moment.to(dtype);
  }
  return out;
}

}  // namespace crin
