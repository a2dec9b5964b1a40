#pragma once

// Fixed-size model input: 5 packets x 320 bytes (80 header + 240 payload),
// normalized to [0,1], plus per-packet metadata for the statistical signals.

#include <cstdint>
#include <vector>

#include "mmae/ingest/pcap.hpp"

namespace mmae::ingest {

constexpr int kRecordBytes = 1600;
constexpr int kPacketsPerRecord = 5;
constexpr int kHeaderBytes = 80;
constexpr int kPayloadBytes = 240;
constexpr int kSegmentBytes = kHeaderBytes + kPayloadBytes;

struct FlowRecord {
  uint64_t flow_id = 0;
  int32_t label = -1;  // -1 = unlabeled
  std::vector<float> bytes;               // 1600 values in [0,1]
  std::vector<int32_t> pkt_payload_len;   // 5 entries, 0 for padded slots
  std::vector<float> pkt_inter_arrival;   // 5 entries, first = 0
};

// Renders the first 5 packets into the fixed 1600-byte layout: per packet,
// 80 bytes from the IP header then 240 transport-payload bytes, each part
// truncated or zero-padded independently; missing packets leave all-zero
// segments. Bytes are anonymized before rendering and divided by 255.
FlowRecord normalize_flow(const RawFlow& flow);

}  // namespace mmae::ingest
