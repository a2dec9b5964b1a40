#include "mmae/features/side_channel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmae/common.hpp"

namespace mmae::sidechan {

namespace {

struct Moments {
  double min = 0, max = 0, avg = 0, std_dev = 0;
};

Moments moments(const std::vector<double>& xs) {
  Moments m;
  if (xs.empty()) return m;
  m.min = *std::min_element(xs.begin(), xs.end());
  m.max = *std::max_element(xs.begin(), xs.end());
  double sum = 0;
  for (double x : xs) sum += x;
  m.avg = sum / static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - m.avg) * (x - m.avg);
  m.std_dev = std::sqrt(var / static_cast<double>(xs.size()));
  return m;
}

}  // namespace

const std::array<const char*, kFeatureCount>& feature_names() {
  static const std::array<const char*, kFeatureCount> names = {
      "F-Duration",     "F-Time",         "P-inter-min",   "P-inter-max",
      "P-inter-avg",    "P-inter-std",    "P-total",       "Downlink-Bytes",
      "Downlink-Count", "Payload-P-Count", "Payload-P-min", "Payload-P-max",
      "Payload-P-std",  "P-Length-min",   "P-Length-max",  "P-Length-avg",
      "P-Length-std",   "TCP Count",      "UDP Count",     "DNS Count",
      "ICMP Count",     "SYN Count",      "FIN Count",     "ACK Count",
      "PSH Count",      "URG Count",      "RST Count"};
  return names;
}

FeatureVector extract_features(const ingest::RawFlow& flow) {
  using namespace ingest;
  const auto& pkts = flow.packets;
  FeatureVector f{};
  if (pkts.empty()) return f;

  // time
  f[0] = pkts.back().timestamp - pkts.front().timestamp;
  f[1] = pkts.front().timestamp;
  std::vector<double> gaps;
  gaps.reserve(pkts.size());
  for (size_t i = 1; i < pkts.size(); ++i)
    gaps.push_back(pkts[i].timestamp - pkts[i - 1].timestamp);
  Moments gm = moments(gaps);
  f[2] = gm.min;
  f[3] = gm.max;
  f[4] = gm.avg;
  f[5] = gm.std_dev;

  // size
  f[6] = static_cast<double>(pkts.size());
  std::vector<double> payload_sizes, lengths;
  lengths.reserve(pkts.size());
  for (const auto& p : pkts) {
    if (p.direction == Direction::kDownlink) {
      f[7] += p.total_len;
      f[8] += 1;
    }
    if (p.payload_len > 0) {
      f[9] += 1;
      payload_sizes.push_back(p.payload_len);
    }
    lengths.push_back(p.total_len);
  }
  Moments pm = moments(payload_sizes);
  f[10] = pm.min;
  f[11] = pm.max;
  f[12] = pm.std_dev;
  Moments lm = moments(lengths);
  f[13] = lm.min;
  f[14] = lm.max;
  f[15] = lm.avg;
  f[16] = lm.std_dev;

  // flags and protocols; a DNS-over-TCP packet counts for both TCP and DNS
  for (const auto& p : pkts) {
    const auto& ft = p.five_tuple;
    if (ft.proto == 6) f[17] += 1;
    if (ft.proto == 17) f[18] += 1;
    if ((ft.proto == 6 || ft.proto == 17) &&
        (ft.src_port == 53 || ft.dst_port == 53))
      f[19] += 1;
    if (ft.proto == 1) f[20] += 1;
    if (p.tcp_flags & tcpflag::kSyn) f[21] += 1;
    if (p.tcp_flags & tcpflag::kFin) f[22] += 1;
    if (p.tcp_flags & tcpflag::kAck) f[23] += 1;
    if (p.tcp_flags & tcpflag::kPsh) f[24] += 1;
    if (p.tcp_flags & tcpflag::kUrg) f[25] += 1;
    if (p.tcp_flags & tcpflag::kRst) f[26] += 1;
  }
  return f;
}

PacketSignals packet_signals(const ingest::FlowRecord& rec) {
  PacketSignals s;
  for (int i = 0; i < ingest::kPacketsPerRecord; ++i) {
    s.s_time[i] = rec.pkt_inter_arrival[i];
    s.s_len[i] = static_cast<float>(rec.pkt_payload_len[i]);
  }
  return s;
}

void save_features_csv(const std::string& path,
                       const std::vector<uint64_t>& flow_ids,
                       const std::vector<FeatureVector>& features) {
  if (flow_ids.size() != features.size())
    throw IoError("flow_id / feature row count mismatch");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "flow_id";
  for (const char* name : feature_names()) f << ',' << name;
  f << '\n';
  f.precision(17);
  for (size_t i = 0; i < features.size(); ++i) {
    f << flow_ids[i];
    for (double v : features[i]) f << ',' << v;
    f << '\n';
  }
  if (!f) throw IoError("write failed for " + path);
}

std::pair<std::vector<uint64_t>, std::vector<FeatureVector>>
load_features_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError(path + " is empty");
  std::vector<uint64_t> ids;
  std::vector<FeatureVector> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    if (!std::getline(ss, cell, ',')) throw IoError("bad CSV row in " + path);
    FeatureVector row{};
    ids.push_back(std::stoull(cell));
    for (int i = 0; i < kFeatureCount; ++i) {
      if (!std::getline(ss, cell, ','))
        throw IoError("short CSV row in " + path);
      row[i] = std::stod(cell);
    }
    rows.push_back(row);
  }
  return {std::move(ids), std::move(rows)};
}

}  // namespace mmae::sidechan
