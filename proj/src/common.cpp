#include <sstream>

#include "icmlm/errors.hpp"
#include "icmlm/tensor.hpp"
#include "icmlm/version.hpp"

namespace icmlm {

namespace detail {
void throw_contract(const char* expr, const std::string& msg, const char* file, int line) {
  std::ostringstream os;
  os << msg << " [" << expr << " at " << file << ":" << line << "]";
  throw ContractViolation(os.str());
}
}  // namespace detail

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::string_view git_describe() {
#ifdef ICMLM_GIT_DESCRIBE
  return ICMLM_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

}  // namespace icmlm
