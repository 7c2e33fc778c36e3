#include "qmc/protocol.hpp"

#include <zlib.h>

#include <cstring>
#include <sstream>

namespace qmc::proto {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

bool valid_type(std::uint8_t t) { return t >= 1 && t <= 7; }

}  // namespace

std::string encode_frame(const Frame& f) {
  uLongf bound = compressBound(static_cast<uLong>(f.body.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(f.body.data()),
                static_cast<uLong>(f.body.size()), 6) != Z_OK)
    throw std::runtime_error("protocol: compression failed");
  compressed.resize(bound);

  std::string out;
  out.reserve(kHeaderSize + compressed.size());
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  out.push_back(static_cast<char>(f.type));
  put_u32(out, f.key);
  put_u32(out, static_cast<std::uint32_t>(f.body.size()));
  put_u32(out, static_cast<std::uint32_t>(compressed.size()));
  out += compressed;
  return out;
}

std::optional<FrameHeader> parse_header(const unsigned char* b) {
  if (std::memcmp(b, kMagic, 4) != 0) return std::nullopt;
  if (b[4] != kVersion) return std::nullopt;
  if (!valid_type(b[5])) return std::nullopt;
  FrameHeader h;
  h.type = static_cast<MsgType>(b[5]);
  h.key = get_u32(b + 6);
  h.uncompressed_len = get_u32(b + 10);
  h.compressed_len = get_u32(b + 14);
  if (h.uncompressed_len > kMaxPayload || h.compressed_len > kMaxPayload)
    return std::nullopt;
  return h;
}

std::optional<Frame> decode_payload(const FrameHeader& h, const unsigned char* payload) {
  std::string body(h.uncompressed_len, '\0');
  uLongf out_len = h.uncompressed_len;
  const int rc = uncompress(reinterpret_cast<Bytef*>(body.data()), &out_len, payload,
                            h.compressed_len);
  if (rc != Z_OK || out_len != h.uncompressed_len) return std::nullopt;
  Frame f;
  f.type = h.type;
  f.key = h.key;
  f.body = std::move(body);
  return f;
}

void FrameReader::feed(const unsigned char* data, std::size_t len) {
  buf_.insert(buf_.end(), data, data + len);
}

std::optional<Frame> FrameReader::next() {
  if (corrupt_) return std::nullopt;
  if (buf_.size() - pos_ < kHeaderSize) return std::nullopt;
  auto h = parse_header(buf_.data() + pos_);
  if (!h) {
    corrupt_ = true;
    return std::nullopt;
  }
  if (buf_.size() - pos_ < kHeaderSize + h->compressed_len) return std::nullopt;
  auto f = decode_payload(*h, buf_.data() + pos_ + kHeaderSize);
  pos_ += kHeaderSize + h->compressed_len;
  if (pos_ > (1u << 20) || pos_ == buf_.size()) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  if (!f) {
    corrupt_ = true;
    return std::nullopt;
  }
  return f;
}

std::string ResultBatchBody::encode() const {
  std::ostringstream os;
  os << "batch " << batch_id << " " << record_lines.size() << (relay ? " relay" : "")
     << "\n";
  for (const auto& line : record_lines) os << line << "\n";
  return os.str();
}

std::optional<ResultBatchBody> ResultBatchBody::parse(const std::string& body) {
  std::istringstream is(body);
  std::string header;
  if (!std::getline(is, header)) return std::nullopt;
  std::istringstream hd(header);
  std::string tag, id, extra;
  std::size_t count = 0;
  if (!(hd >> tag >> id >> count) || tag != "batch") return std::nullopt;
  ResultBatchBody out;
  out.batch_id = id;
  if (hd >> extra) {
    if (extra != "relay") return std::nullopt;
    out.relay = true;
  }
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.record_lines.push_back(line);
  if (out.record_lines.size() != count) return std::nullopt;
  return out;
}

namespace {

std::string encode_samples(std::span<const sampler::PoolSample> entries) {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << "w " << format_g17(e.e_local);
    for (double c : e.coords) os << ' ' << format_g17(c);
    os << "\n";
  }
  return os.str();
}

bool parse_sample_line(const std::string& line, sampler::PoolSample& out) {
  std::istringstream ls(line);
  std::string tag;
  if (!(ls >> tag) || tag != "w") return false;
  if (!(ls >> out.e_local)) return false;
  out.coords.clear();
  double v;
  while (ls >> v) out.coords.push_back(v);
  return !out.coords.empty();
}

}  // namespace

std::string WalkerListBody::encode() const {
  std::ostringstream os;
  os << "walkers " << entries.size() << "\n" << encode_samples(entries);
  return os.str();
}

std::optional<WalkerListBody> WalkerListBody::parse(const std::string& body) {
  std::istringstream is(body);
  std::string tag;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "walkers") return std::nullopt;
  std::string line;
  std::getline(is, line);
  WalkerListBody out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    sampler::PoolSample s;
    if (!parse_sample_line(line, s)) return std::nullopt;
    out.entries.push_back(std::move(s));
  }
  if (out.entries.size() != count) return std::nullopt;
  return out;
}

std::string InputBundleBody::encode() const {
  std::ostringstream os;
  os << "critical " << critical_text.size() << "\n" << critical_text;
  os << "params " << params.size() << "\n";
  for (const auto& [k, v] : params) os << k << ' ' << v << "\n";
  os << "walkers " << walkers.size() << "\n" << encode_samples(walkers);
  return os.str();
}

std::optional<InputBundleBody> InputBundleBody::parse(const std::string& body) {
  InputBundleBody out;
  std::size_t pos = body.find('\n');
  if (pos == std::string::npos) return std::nullopt;
  {
    std::istringstream hd(body.substr(0, pos));
    std::string tag;
    std::size_t len = 0;
    if (!(hd >> tag >> len) || tag != "critical") return std::nullopt;
    if (body.size() < pos + 1 + len) return std::nullopt;
    out.critical_text = body.substr(pos + 1, len);
    pos = pos + 1 + len;
  }
  std::istringstream is(body.substr(pos));
  std::string tag;
  std::size_t count = 0;
  if (!(is >> tag >> count) || tag != "params") return std::nullopt;
  std::string line;
  std::getline(is, line);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) return std::nullopt;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) return std::nullopt;
    out.params[line.substr(0, sp)] = line.substr(sp + 1);
  }
  std::size_t wcount = 0;
  if (!(is >> tag >> wcount) || tag != "walkers") return std::nullopt;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    sampler::PoolSample s;
    if (!parse_sample_line(line, s)) return std::nullopt;
    out.walkers.push_back(std::move(s));
  }
  if (out.walkers.size() != wcount) return std::nullopt;
  return out;
}

std::string AckBody::encode() const {
  std::ostringstream os;
  os << "ack " << batch_id << " accepted " << accepted << " rejected " << rejected << "\n";
  return os.str();
}

std::optional<AckBody> AckBody::parse(const std::string& body) {
  std::istringstream is(body);
  std::string t0, t2, t4;
  AckBody out;
  if (!(is >> t0 >> out.batch_id >> t2 >> out.accepted >> t4 >> out.rejected))
    return std::nullopt;
  if (t0 != "ack" || t2 != "accepted" || t4 != "rejected") return std::nullopt;
  return out;
}

std::string RegisterBody::encode() const {
  std::ostringstream os;
  os << "register node " << node_id << " workers " << workers << "\n";
  return os.str();
}

std::optional<RegisterBody> RegisterBody::parse(const std::string& body) {
  std::istringstream is(body);
  std::string t0, t1, t3;
  RegisterBody out;
  if (!(is >> t0 >> t1 >> out.node_id >> t3 >> out.workers)) return std::nullopt;
  if (t0 != "register" || t1 != "node" || t3 != "workers") return std::nullopt;
  return out;
}

std::string TerminatedBody::encode() const {
  std::ostringstream os;
  os << "terminated node " << node_id << " cpu " << format_g17(cpu_seconds) << "\n";
  return os.str();
}

std::optional<TerminatedBody> TerminatedBody::parse(const std::string& body) {
  std::istringstream is(body);
  std::string t0, t1, t3;
  TerminatedBody out;
  if (!(is >> t0 >> t1 >> out.node_id >> t3 >> out.cpu_seconds)) return std::nullopt;
  if (t0 != "terminated" || t1 != "node" || t3 != "cpu") return std::nullopt;
  return out;
}

}  // namespace qmc::proto
