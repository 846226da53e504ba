// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/hashing.hpp"

#include <cstdio>

#include "dialectmix/tsv.hpp"

namespace dialectmix {

Fnv1a& Fnv1a::update(const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= bytes[i];
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::string_view bytes) { return update(bytes.data(), bytes.size()); }

std::string Fnv1a::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hash_hex(std::string_view bytes) { return Fnv1a().update(bytes).hex(); }

std::string hash_file(const std::filesystem::path& path) { return hash_hex(read_text_file(path)); }

}  // namespace dialectmix
