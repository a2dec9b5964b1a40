#include "mmae/ingest/pcap.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <utility>

namespace mmae::ingest {

namespace {

constexpr uint32_t kPcapMagic = 0xA1B2C3D4u;
constexpr uint32_t kPcapMagicSwapped = 0xD4C3B2A1u;
constexpr size_t kGlobalHeader = 24;
constexpr size_t kRecordHeader = 16;

uint32_t rd_u32(const uint8_t* p, bool swap) {
  uint32_t v;
  std::memcpy(&v, p, 4);
  return swap ? __builtin_bswap32(v) : v;
}

uint16_t rd_be16(const uint8_t* p) {
  return static_cast<uint16_t>((p[0] << 8) | p[1]);
}

uint32_t rd_be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) |
         (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

enum class ParseOutcome { kOk, kTruncated, kSkipped };

// Parses one captured packet starting at the link layer. On success fills
// `out` with everything except timestamp and direction.
ParseOutcome parse_packet(const uint8_t* p, size_t len, uint32_t linktype,
                          RawPacket& out) {
  size_t ip_off = 0;
  if (linktype == 1) {  // Ethernet, optionally one 802.1Q tag
    if (len < 14) return ParseOutcome::kTruncated;
    uint16_t ethertype = rd_be16(p + 12);
    ip_off = 14;
    if (ethertype == 0x8100) {
      if (len < 18) return ParseOutcome::kTruncated;
      ethertype = rd_be16(p + 16);
      ip_off = 18;
    }
    if (ethertype != 0x0800) return ParseOutcome::kSkipped;
  } else if (linktype == 101) {  // raw IP
    ip_off = 0;
  } else {
    return ParseOutcome::kSkipped;
  }

  if (len < ip_off + 20) return ParseOutcome::kTruncated;
  const uint8_t* ip = p + ip_off;
  if ((ip[0] >> 4) != 4) return ParseOutcome::kSkipped;
  size_t ihl = static_cast<size_t>(ip[0] & 0x0F) * 4;
  if (ihl < 20) return ParseOutcome::kSkipped;
  if (len < ip_off + ihl) return ParseOutcome::kTruncated;
  int32_t total_len = rd_be16(ip + 2);
  if (total_len < static_cast<int32_t>(ihl)) return ParseOutcome::kSkipped;
  uint16_t frag = rd_be16(ip + 6);
  if ((frag & 0x1FFF) != 0) return ParseOutcome::kSkipped;  // non-first frag
  uint8_t proto = ip[9];

  FiveTuple ft;
  ft.src_ip = rd_be32(ip + 12);
  ft.dst_ip = rd_be32(ip + 16);
  ft.proto = proto;

  size_t cap_l4 = len - ip_off - ihl;  // captured transport bytes
  const uint8_t* l4 = ip + ihl;
  int32_t payload_off = static_cast<int32_t>(ihl);
  int32_t payload_len = 0;
  AppProto hint = AppProto::kOther;
  uint8_t flags = 0;

  if (proto == 6) {  // TCP
    if (cap_l4 < 20) return ParseOutcome::kTruncated;
    ft.src_port = rd_be16(l4);
    ft.dst_port = rd_be16(l4 + 2);
    size_t data_off = static_cast<size_t>(l4[12] >> 4) * 4;
    if (data_off < 20) return ParseOutcome::kSkipped;
    flags = l4[13] & 0x3F;
    payload_off = static_cast<int32_t>(ihl + data_off);
    payload_len = total_len - payload_off;
    hint = (ft.src_port == 53 || ft.dst_port == 53) ? AppProto::kDns
                                                    : AppProto::kTcp;
  } else if (proto == 17) {  // UDP
    if (cap_l4 < 8) return ParseOutcome::kTruncated;
    ft.src_port = rd_be16(l4);
    ft.dst_port = rd_be16(l4 + 2);
    payload_off = static_cast<int32_t>(ihl + 8);
    payload_len = total_len - payload_off;
    hint = (ft.src_port == 53 || ft.dst_port == 53) ? AppProto::kDns
                                                    : AppProto::kUdp;
  } else if (proto == 1) {  // ICMP
    payload_off = static_cast<int32_t>(ihl + 8);
    payload_len = total_len - payload_off;
    hint = AppProto::kIcmp;
  } else {
    payload_len = total_len - static_cast<int32_t>(ihl);
  }

  out.link_payload.assign(ip, p + len);
  out.five_tuple = ft;
  out.tcp_flags = flags;
  out.app_proto_hint = hint;
  out.payload_len = std::max(payload_len, 0);
  out.total_len = total_len;
  out.payload_offset = payload_off;
  return ParseOutcome::kOk;
}

}  // namespace

std::string FiveTuple::str() const {
  auto ip_str = [](uint32_t ip) {
    std::ostringstream os;
    os << (ip >> 24) << '.' << ((ip >> 16) & 0xFF) << '.' << ((ip >> 8) & 0xFF)
       << '.' << (ip & 0xFF);
    return os.str();
  };
  std::ostringstream os;
  os << ip_str(src_ip) << ':' << src_port << "->" << ip_str(dst_ip) << ':'
     << dst_port << '/' << static_cast<int>(proto);
  return os.str();
}

SegmentResult segment_flows(const std::vector<uint8_t>& capture) {
  if (capture.size() < kGlobalHeader)
    throw MalformedCapture("capture shorter than the global header");
  uint32_t magic;
  std::memcpy(&magic, capture.data(), 4);
  bool swap;
  if (magic == kPcapMagic)
    swap = false;
  else if (magic == kPcapMagicSwapped)
    swap = true;
  else
    throw MalformedCapture("unrecognized PCAP magic");
  uint32_t linktype = rd_u32(capture.data() + 20, swap);

  SegmentResult res;
  std::unordered_map<FiveTuple, size_t, FiveTupleHash> flow_of;
  bool have_start = false;
  double start_ts = 0.0;

  size_t off = kGlobalHeader;
  while (off < capture.size()) {
    if (off + kRecordHeader > capture.size()) {
      ++res.truncated_packets;
      break;
    }
    const uint8_t* rh = capture.data() + off;
    uint32_t ts_sec = rd_u32(rh, swap);
    uint32_t ts_usec = rd_u32(rh + 4, swap);
    uint32_t incl_len = rd_u32(rh + 8, swap);
    off += kRecordHeader;
    double ts = static_cast<double>(ts_sec) + 1e-6 * ts_usec;
    if (!have_start) {
      start_ts = ts;
      have_start = true;
    }
    if (off + incl_len > capture.size()) {
      ++res.truncated_packets;
      break;
    }
    RawPacket pkt;
    ParseOutcome outcome =
        parse_packet(capture.data() + off, incl_len, linktype, pkt);
    off += incl_len;
    if (outcome == ParseOutcome::kTruncated) {
      ++res.truncated_packets;
      continue;
    }
    if (outcome == ParseOutcome::kSkipped) {
      ++res.skipped_packets;
      continue;
    }
    pkt.timestamp = ts - start_ts;
    ++res.parsed_packets;

    FiveTuple key = pkt.five_tuple.canonical();
    auto [it, inserted] = flow_of.try_emplace(key, res.flows.size());
    if (inserted) {
      RawFlow f;
      f.flow_id = static_cast<uint64_t>(res.flows.size());
      f.five_tuple = key;
      res.flows.push_back(std::move(f));
    }
    res.flows[it->second].packets.push_back(std::move(pkt));
  }

  for (auto& flow : res.flows) {
    std::stable_sort(
        flow.packets.begin(), flow.packets.end(),
        [](const RawPacket& a, const RawPacket& b) {
          return a.timestamp < b.timestamp;
        });
    const FiveTuple& up = flow.packets.front().five_tuple;
    for (auto& pkt : flow.packets)
      pkt.direction = (pkt.five_tuple.src_ip == up.src_ip &&
                       pkt.five_tuple.src_port == up.src_port)
                          ? Direction::kUplink
                          : Direction::kDownlink;
  }
  return res;
}

SegmentResult segment_flows_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return segment_flows(bytes);
}

RawPacket anonymize(const RawPacket& pkt) {
  RawPacket out = pkt;
  auto& b = out.link_payload;
  if (b.size() < 20 || (b[0] >> 4) != 4) return out;  // not parseable IPv4
  std::fill(b.begin() + 12, b.begin() + 20, uint8_t{0});
  if (pkt.five_tuple.proto == 6 || pkt.five_tuple.proto == 17) {
    size_t ihl = static_cast<size_t>(b[0] & 0x0F) * 4;
    size_t end = std::min(b.size(), ihl + 4);
    for (size_t i = ihl; i < end; ++i) b[i] = 0;
  }
  return out;
}

}  // namespace mmae::ingest
