#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace floorgen {

/// Incremental SHA-256 (OpenSSL EVP), hex-encoded.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view s);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& p);

/// SHA-1 of "blob <size>\0" + bytes, as `git hash-object` prints it.
std::string git_blob_sha1(std::string_view bytes);
std::string git_blob_sha1_file(const std::filesystem::path& p);

/// Standard base64 with padding.
std::string base64_encode(std::string_view bytes);

}  // namespace floorgen
