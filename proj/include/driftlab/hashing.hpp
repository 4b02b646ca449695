#pragma once

#include <span>
#include <string>
#include <string_view>

namespace driftlab {

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

}  // namespace driftlab
