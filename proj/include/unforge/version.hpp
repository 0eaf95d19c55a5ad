#pragma once

#define UNFORGE_VERSION "0.1.0"

namespace unforge {
inline const char* tool_version() { return "unforge " UNFORGE_VERSION; }
}  // namespace unforge
