#ifndef ROCKSCOPE_DIGEST_HPP
#define ROCKSCOPE_DIGEST_HPP

#include <cstdint>
#include <string>

namespace rockscope {

// Minimal SHA-256 (FIPS 180-4), enough for manifest content digests.
class Sha256 {
  public:
    Sha256();
    void update(const void* data, std::size_t len);
    // Hex digest; finalizes the stream (call once).
    std::string hex_digest();

    static std::string of_string(const std::string& s);
    static std::string of_file(const std::string& path);  // throws IoError

  private:
    void process_block(const std::uint8_t* block);

    std::uint32_t h_[8];
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
    std::uint64_t total_len_ = 0;
};

}  // namespace rockscope

#endif
