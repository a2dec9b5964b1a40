#pragma once

// The 27 side-channel statistics computed over a whole flow (time, size and
// flag/protocol groups), plus the per-packet signals fed to the mask
// predictor. Standard deviations are population (divide by N) so the
// single-sample case is 0 without special-casing.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmae/ingest/flow.hpp"
#include "mmae/ingest/pcap.hpp"

namespace mmae::sidechan {

constexpr int kFeatureCount = 27;

using FeatureVector = std::array<double, kFeatureCount>;

// Column names in feature order: 6 time, 11 size, 10 flag/protocol.
const std::array<const char*, kFeatureCount>& feature_names();

// Features are computed over all packets of the flow, not just the 5 kept in
// the FlowRecord. Uses the pre-anonymization five-tuple metadata, so DNS
// (port 53) stays detectable after bytes are scrubbed.
FeatureVector extract_features(const ingest::RawFlow& flow);

struct PacketSignals {
  std::array<float, ingest::kPacketsPerRecord> s_time;  // inter-arrival, s
  std::array<float, ingest::kPacketsPerRecord> s_len;   // payload bytes
};

PacketSignals packet_signals(const ingest::FlowRecord& rec);

// CSV with a flow_id column followed by the 27 named feature columns.
void save_features_csv(const std::string& path,
                       const std::vector<uint64_t>& flow_ids,
                       const std::vector<FeatureVector>& features);

// Returns (flow_ids, features); throws IoError on parse problems.
std::pair<std::vector<uint64_t>, std::vector<FeatureVector>>
load_features_csv(const std::string& path);

}  // namespace mmae::sidechan
