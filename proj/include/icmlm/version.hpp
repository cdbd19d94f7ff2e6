#pragma once

#include <string_view>

namespace icmlm {

// `git describe` of the source tree at configure time, "unknown" outside a checkout.
std::string_view git_describe();

}  // namespace icmlm
