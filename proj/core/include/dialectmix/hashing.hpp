// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace dialectmix {

/// 64-bit FNV-1a. Used for cache keys and manifests, not for security.
class Fnv1a {
 public:
  Fnv1a& update(std::string_view bytes);
  Fnv1a& update(const void* data, std::size_t size);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::string_view bytes);
std::string hash_file(const std::filesystem::path& path);

}  // namespace dialectmix
