#pragma once

#include <cstdint>
#include <stdexcept>
#include <sstream>
#include <string>

namespace xnn {

/// Thrown on contract violations (shape mismatches, bad arguments, I/O errors).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& oss, T&& v, Rest&&... rest) {
  oss << std::forward<T>(v);
  format_into(oss, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
  std::ostringstream oss;
  detail::format_into(oss, std::forward<Args>(args)...);
  throw Error(oss.str());
}

template <class... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

}  // namespace xnn
