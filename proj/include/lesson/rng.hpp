#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lesson {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Stable per-stream seed from a master seed and any mix of integer or string
/// tags. Streams derived with different tags are independent for practical
/// purposes and do not depend on evaluation order.
template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t master, const Tags&... tags) {
  std::uint64_t h = mix64(master);
  auto absorb = [&h](const auto& tag) {
    using T = std::decay_t<decltype(tag)>;
    std::uint64_t v;
    if constexpr (std::is_convertible_v<T, std::string_view>) {
      v = hash_tag(std::string_view(tag));
    } else {
      v = static_cast<std::uint64_t>(tag);
    }
    h = mix64(h ^ mix64(v));
  };
  (absorb(tags), ...);
  (void)absorb;
  return h;
}

template <typename... Tags>
Rng make_rng(std::uint64_t master, const Tags&... tags) {
  return Rng(derive_seed(master, tags...));
}

}  // namespace lesson
