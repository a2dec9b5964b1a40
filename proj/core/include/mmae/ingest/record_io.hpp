#pragma once

// Flat binary record file. Layout (little-endian, fixed width):
//   magic "MMFR", u32 version = 1, u64 record count, then per record:
//   u64 flow_id, i32 label, 1600 x f32 bytes, 5 x i32 payload lengths,
//   5 x f32 inter-arrival seconds (6452 bytes per record).

#include <string>
#include <vector>

#include "mmae/ingest/flow.hpp"

namespace mmae::ingest {

void save_records(const std::string& path,
                  const std::vector<FlowRecord>& records);

std::vector<FlowRecord> load_records(const std::string& path);

}  // namespace mmae::ingest
