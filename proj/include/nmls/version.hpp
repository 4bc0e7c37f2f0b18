#pragma once

namespace nmls {

inline constexpr const char* kVersion = "0.1.0";

} // namespace nmls
