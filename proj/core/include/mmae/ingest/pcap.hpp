#pragma once

// Classic PCAP parsing and five-tuple sessionization. IPv4 over Ethernet
// (link type 1, one optional 802.1Q tag) or raw IP (link type 101). PCAP-NG
// is out of scope; the global-header magic must be 0xA1B2C3D4 or its swap.

#include <cstdint>
#include <string>
#include <vector>

#include "mmae/common.hpp"

namespace mmae::ingest {

class MalformedCapture : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction : uint8_t { kUplink = 0, kDownlink = 1 };
enum class AppProto : uint8_t { kTcp, kUdp, kDns, kIcmp, kOther };

// TCP flag bits as they appear in the header's flag byte.
namespace tcpflag {
constexpr uint8_t kFin = 0x01;
constexpr uint8_t kSyn = 0x02;
constexpr uint8_t kRst = 0x04;
constexpr uint8_t kPsh = 0x08;
constexpr uint8_t kAck = 0x10;
constexpr uint8_t kUrg = 0x20;
}  // namespace tcpflag

struct FiveTuple {
  uint32_t src_ip = 0;
  uint32_t dst_ip = 0;
  uint16_t src_port = 0;
  uint16_t dst_port = 0;
  uint8_t proto = 0;

  // Unordered form: endpoints sorted so both directions map to one session.
  FiveTuple canonical() const {
    FiveTuple c = *this;
    if (std::pair{dst_ip, dst_port} < std::pair{src_ip, src_port}) {
      std::swap(c.src_ip, c.dst_ip);
      std::swap(c.src_port, c.dst_port);
    }
    return c;
  }

  bool operator==(const FiveTuple& o) const = default;

  std::string str() const;
};

struct FiveTupleHash {
  size_t operator()(const FiveTuple& t) const {
    uint64_t h = mix64((static_cast<uint64_t>(t.src_ip) << 32) | t.dst_ip);
    h = mix64(h ^ ((static_cast<uint64_t>(t.src_port) << 24) |
                   (static_cast<uint64_t>(t.dst_port) << 8) | t.proto));
    return static_cast<size_t>(h);
  }
};

struct RawPacket {
  double timestamp = 0.0;             // seconds since capture start
  std::vector<uint8_t> link_payload;  // captured bytes from the IP header on
  FiveTuple five_tuple;
  Direction direction = Direction::kUplink;
  uint8_t tcp_flags = 0;  // tcpflag:: bits, 0 for non-TCP
  AppProto app_proto_hint = AppProto::kOther;
  int32_t payload_len = 0;     // transport payload bytes (from header fields)
  int32_t total_len = 0;       // IP total length (from header field)
  int32_t payload_offset = 0;  // offset of transport payload in link_payload
};

struct RawFlow {
  uint64_t flow_id = 0;
  std::vector<RawPacket> packets;  // time-sorted, capture order on ties
  FiveTuple five_tuple;            // canonical
};

struct SegmentResult {
  std::vector<RawFlow> flows;      // ordered by first appearance in capture
  uint64_t truncated_packets = 0;  // record shorter than its header claims
  uint64_t skipped_packets = 0;    // unsupported link/ethertype/protocol/frag
  uint64_t parsed_packets = 0;
};

// Parses a classic-PCAP byte stream and groups packets into session flows by
// unordered five-tuple. Packet timestamps are rebased to the capture start.
// Throws MalformedCapture on a bad global header; per-packet problems only
// bump the result counters.
SegmentResult segment_flows(const std::vector<uint8_t>& capture);

SegmentResult segment_flows_file(const std::string& path);

// Zeroes the IP source/destination address bytes and, for TCP/UDP, the two
// port fields inside link_payload. Checksums and every other byte stay as
// captured. Idempotent; the five_tuple metadata is kept for sessionization
// and feature extraction.
RawPacket anonymize(const RawPacket& pkt);

}  // namespace mmae::ingest
