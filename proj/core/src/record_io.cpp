#include "mmae/ingest/record_io.hpp"

#include <cstring>
#include <fstream>

#include "mmae/common.hpp"

namespace mmae::ingest {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'F', 'R'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("record file ended unexpectedly");
  return v;
}

}  // namespace

void save_records(const std::string& path,
                  const std::vector<FlowRecord>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(kMagic, 4);
  put<uint32_t>(f, kVersion);
  put<uint64_t>(f, records.size());
  for (const auto& r : records) {
    if (r.bytes.size() != kRecordBytes ||
        r.pkt_payload_len.size() != kPacketsPerRecord ||
        r.pkt_inter_arrival.size() != kPacketsPerRecord)
      throw IoError("record has wrong field sizes");
    put<uint64_t>(f, r.flow_id);
    put<int32_t>(f, r.label);
    f.write(reinterpret_cast<const char*>(r.bytes.data()),
            kRecordBytes * sizeof(float));
    f.write(reinterpret_cast<const char*>(r.pkt_payload_len.data()),
            kPacketsPerRecord * sizeof(int32_t));
    f.write(reinterpret_cast<const char*>(r.pkt_inter_arrival.data()),
            kPacketsPerRecord * sizeof(float));
  }
  if (!f) throw IoError("write failed for " + path);
}

std::vector<FlowRecord> load_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError(path + " is not a flow record file");
  uint32_t version = get<uint32_t>(f);
  if (version != kVersion) throw IoError("unsupported record file version");
  uint64_t count = get<uint64_t>(f);
  std::vector<FlowRecord> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    FlowRecord r;
    r.flow_id = get<uint64_t>(f);
    r.label = get<int32_t>(f);
    r.bytes.resize(kRecordBytes);
    f.read(reinterpret_cast<char*>(r.bytes.data()),
           kRecordBytes * sizeof(float));
    r.pkt_payload_len.resize(kPacketsPerRecord);
    f.read(reinterpret_cast<char*>(r.pkt_payload_len.data()),
           kPacketsPerRecord * sizeof(int32_t));
    r.pkt_inter_arrival.resize(kPacketsPerRecord);
    f.read(reinterpret_cast<char*>(r.pkt_inter_arrival.data()),
           kPacketsPerRecord * sizeof(float));
    if (!f) throw IoError("record file ended unexpectedly");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mmae::ingest
