#pragma once

#include <string>
#include <string_view>

namespace tap::codec {

std::string base64_encode(std::string_view bytes);
// Throws Error{"malformed_base64"} on invalid input.
std::string base64_decode(std::string_view text);

// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::string& path);
// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::string& path, std::string_view bytes);

}  // namespace tap::codec
