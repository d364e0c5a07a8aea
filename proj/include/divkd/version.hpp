#pragma once

namespace divkd {

inline constexpr const char* kToolName = "divkd";
inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace divkd
