#include "mmae/ingest/flow.hpp"

#include <algorithm>

namespace mmae::ingest {

FlowRecord normalize_flow(const RawFlow& flow) {
  FlowRecord rec;
  rec.flow_id = flow.flow_id;
  rec.bytes.assign(kRecordBytes, 0.0f);
  rec.pkt_payload_len.assign(kPacketsPerRecord, 0);
  rec.pkt_inter_arrival.assign(kPacketsPerRecord, 0.0f);

  size_t n = std::min<size_t>(flow.packets.size(), kPacketsPerRecord);
  for (size_t i = 0; i < n; ++i) {
    RawPacket pkt = anonymize(flow.packets[i]);
    const auto& b = pkt.link_payload;
    float* seg = rec.bytes.data() + i * kSegmentBytes;

    size_t hdr = std::min<size_t>(b.size(), kHeaderBytes);
    for (size_t j = 0; j < hdr; ++j) seg[j] = static_cast<float>(b[j]) / 255.0f;

    size_t poff = std::min<size_t>(
        b.size(), std::max<int32_t>(pkt.payload_offset, 0));
    size_t pay = std::min<size_t>(b.size() - poff, kPayloadBytes);
    for (size_t j = 0; j < pay; ++j)
      seg[kHeaderBytes + j] = static_cast<float>(b[poff + j]) / 255.0f;

    rec.pkt_payload_len[i] = pkt.payload_len;
    if (i > 0)
      rec.pkt_inter_arrival[i] = static_cast<float>(
          flow.packets[i].timestamp - flow.packets[i - 1].timestamp);
  }
  return rec;
}

}  // namespace mmae::ingest
