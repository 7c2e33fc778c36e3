#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qmc/sampler.hpp"

namespace qmc::proto {

// Frame layout, all integers little-endian:
//   bytes 0..3   magic "QMCC"
//   byte  4      version (1)
//   byte  5      message type
//   bytes 6..9   critical key (u32)
//   bytes 10..13 uncompressed payload length (u32)
//   bytes 14..17 compressed payload length (u32)
//   bytes 18..   zlib-compressed canonical text body
enum class MsgType : std::uint8_t {
  input_request = 1,
  input_bundle = 2,
  result_batch = 3,
  walker_list = 4,
  stop = 5,
  terminated = 6,
  ping = 7,
};

inline constexpr char kMagic[4] = {'Q', 'M', 'C', 'C'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 18;
inline constexpr std::uint32_t kMaxPayload = 256u << 20;

struct Frame {
  MsgType type = MsgType::ping;
  std::uint32_t key = 0;
  std::string body;
};

std::string encode_frame(const Frame& f);

struct FrameHeader {
  MsgType type;
  std::uint32_t key = 0;
  std::uint32_t uncompressed_len = 0;
  std::uint32_t compressed_len = 0;
};

// nullopt: not a valid header (bad magic/version/type/lengths)
std::optional<FrameHeader> parse_header(const unsigned char* bytes);
// nullopt: payload fails to decompress to the advertised length
std::optional<Frame> decode_payload(const FrameHeader& h, const unsigned char* payload);

// Incremental decoder for stream transports. Feed bytes; pull frames.
class FrameReader {
 public:
  void feed(const unsigned char* data, std::size_t len);
  std::optional<Frame> next();
  bool corrupt() const { return corrupt_; }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
  bool corrupt_ = false;
};

// --- message bodies (canonical text) ---

struct ResultBatchBody {
  std::string batch_id;
  bool relay = false;  // set on combined batches forwarded up the tree
  std::vector<std::string> record_lines;

  std::string encode() const;
  static std::optional<ResultBatchBody> parse(const std::string& body);
};

struct WalkerListBody {
  std::vector<sampler::PoolSample> entries;

  std::string encode() const;
  static std::optional<WalkerListBody> parse(const std::string& body);
};

// Byte-counted critical section so the receiver can recompute the CRC over
// exactly the bytes that were hashed.
struct InputBundleBody {
  std::string critical_text;
  std::map<std::string, std::string> params;
  std::vector<sampler::PoolSample> walkers;

  std::string encode() const;
  static std::optional<InputBundleBody> parse(const std::string& body);
};

struct AckBody {
  std::string batch_id;
  std::uint64_t accepted = 0;
  std::uint64_t rejected = 0;

  std::string encode() const;  // carried in a ping frame
  static std::optional<AckBody> parse(const std::string& body);
};

struct RegisterBody {
  int node_id = -1;
  int workers = 0;

  std::string encode() const;  // carried in a ping frame
  static std::optional<RegisterBody> parse(const std::string& body);
};

struct TerminatedBody {
  int node_id = -1;
  double cpu_seconds = 0.0;

  std::string encode() const;
  static std::optional<TerminatedBody> parse(const std::string& body);
};

}  // namespace qmc::proto
