#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>

#include "sslwb/common.hpp"

namespace sslwb {

using Digest256 = std::array<std::uint8_t, 32>;

inline Digest256 sha256(const void* data, std::size_t len) {
  Digest256 out{};
  unsigned int out_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, out.data(), &out_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw EngineError("sha256 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  return out;
}

inline Digest256 sha256(const std::string& s) { return sha256(s.data(), s.size()); }

inline std::string hex(const Digest256& d) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t b : d) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

}  // namespace sslwb
