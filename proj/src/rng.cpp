#include "mcm/rng.hpp"

namespace mcm {

Rng Rng::split(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return Rng(h ^ (h >> 31));
}

Tensor Rng::normal_tensor(Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = normal();
  return t;
}

}  // namespace mcm
