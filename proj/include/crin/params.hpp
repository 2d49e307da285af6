#pragma once

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "crin/tensor.hpp"

namespace crin {

/// Named, insertion-ordered collection of model tensors. Learnable entries
/// carry AdamW moment slots; buffers (BN running statistics) do not train.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    bool learnable = true;
    Tensor first_moment;
    Tensor second_moment;
  };

  explicit ParamStore(DType dtype = DType::f32) : dtype_(dtype) {}

  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  DType dtype() const { return dtype_; }

  Tensor& add(const std::string& name, Tensor value, bool learnable = true);
  bool contains(const std::string& name) const { return index_.contains(name); }

  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  Tensor& at(const std::string& name) { return entry(name).value; }
  const Tensor& at(const std::string& name) const { return entry(name).value; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }
  std::vector<std::string> names(bool learnable_only = false) const;

  std::int64_t learnable_elements() const;
  std::size_t size() const { return entries_.size(); }

  /// Converts every tensor (and moment slot) to another precision.
  ParamStore cast(DType dtype) const;

 private:
  void rebuild_index();

  DType dtype_;
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace crin
