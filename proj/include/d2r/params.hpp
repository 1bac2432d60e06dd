#pragma once

#include <map>
#include <string>
#include <string_view>

#include "d2r/layers.hpp"

namespace d2r {

/// Named parameter (or gradient) tensors. Ordered so iteration, serialization
/// and optimizer updates visit entries in a stable order.
using ParamSet = std::map<std::string, Tensor, std::less<>>;

inline const Tensor& param(const ParamSet& ps, std::string_view name) {
  auto it = ps.find(name);
  if (it == ps.end()) throw std::out_of_range("missing parameter '" + std::string(name) + "'");
  return it->second;
}

inline ParamSet zeros_like(const ParamSet& ps) {
  ParamSet out;
  for (const auto& [k, v] : ps) out.emplace(k, Tensor(v.shape()));
  return out;
}

inline void accumulate(ParamSet& into, const ParamSet& g, double scale_by = 1.0) {
  for (const auto& [k, v] : g) {
    auto it = into.find(k);
    if (it == into.end())
      into.emplace(k, scale(v, scale_by));
    else
      axpy(scale_by, v, it->second);
  }
}

inline ParamRefs refs(ParamSet& ps, std::string_view prefix = {}) {
  ParamRefs out;
  for (auto& [k, v] : ps)
    if (k.starts_with(prefix)) out.emplace_back(k, &v);
  return out;
}

inline std::size_t parameter_count(const ParamSet& ps, std::string_view prefix = {}) {
  std::size_t n = 0;
  for (const auto& [k, v] : ps)
    if (k.starts_with(prefix)) n += v.size();
  return n;
}

}  // namespace d2r
