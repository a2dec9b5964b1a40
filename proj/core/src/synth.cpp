#include "mmae/eval/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mmae/common.hpp"

namespace mmae::evalkit {

namespace {

using json = nlohmann::json;

struct ClassTemplate {
  uint8_t proto;         // 6 or 17
  uint16_t server_port;  // 53 for the DNS class
  int byte_lo, byte_hi;  // payload byte value range (inclusive)
  int len_base;          // payload length base
  double gap_rate;       // exponential inter-arrival rate (1/s)
  int count_base;        // packets per flow base
};

ClassTemplate class_template(int c, SynthProfile profile) {
  ClassTemplate t;
  t.proto = (c % 2 == 0) ? 6 : 17;
  t.server_port = (c == 1) ? 53 : static_cast<uint16_t>(4000 + 137 * c);
  if (profile == SynthProfile::kSeparable) {
    t.byte_lo = 16 + (c * 56) % 224;
    t.byte_hi = t.byte_lo + 47;
    t.gap_rate = 40.0 / (1.0 + c);
  } else {
    t.byte_lo = 96 + 2 * (c % 16);
    t.byte_hi = t.byte_lo + 95;
    t.gap_rate = 40.0 / (1.0 + 0.1 * c);
  }
  t.len_base = (c == 1) ? 24 : 48 + 24 * c;
  t.count_base = 4 + c % 4;
  return t;
}

void put_be16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v & 0xFF));
}

void put_be32(std::vector<uint8_t>& b, uint32_t v) {
  put_be16(b, static_cast<uint16_t>(v >> 16));
  put_be16(b, static_cast<uint16_t>(v & 0xFFFF));
}

void put_le16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(static_cast<uint8_t>(v & 0xFF));
  b.push_back(static_cast<uint8_t>(v >> 8));
}

void put_le32(std::vector<uint8_t>& b, uint32_t v) {
  put_le16(b, static_cast<uint16_t>(v & 0xFFFF));
  put_le16(b, static_cast<uint16_t>(v >> 16));
}

struct PendingPacket {
  double time;
  uint64_t order;  // creation index, stable tie-break
  std::vector<uint8_t> frame;
};

std::vector<uint8_t> build_frame(const ClassTemplate& t, uint32_t src_ip,
                                 uint32_t dst_ip, uint16_t src_port,
                                 uint16_t dst_port, uint8_t flags,
                                 uint32_t seq, uint16_t ip_id,
                                 const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> f;
  size_t l4h = t.proto == 6 ? 20 : 8;
  f.reserve(14 + 20 + l4h + payload.size());
  // Ethernet
  const uint8_t dst_mac[6] = {0x02, 0, 0, 0, 0, 0x01};
  const uint8_t src_mac[6] = {0x02, 0, 0, 0, 0, 0x02};
  f.insert(f.end(), dst_mac, dst_mac + 6);
  f.insert(f.end(), src_mac, src_mac + 6);
  put_be16(f, 0x0800);
  // IPv4
  f.push_back(0x45);
  f.push_back(0);
  put_be16(f, static_cast<uint16_t>(20 + l4h + payload.size()));
  put_be16(f, ip_id);
  put_be16(f, 0x4000);  // DF, fragment offset 0
  f.push_back(64);
  f.push_back(t.proto);
  put_be16(f, 0);  // checksum not verified downstream
  put_be32(f, src_ip);
  put_be32(f, dst_ip);
  // transport
  if (t.proto == 6) {
    put_be16(f, src_port);
    put_be16(f, dst_port);
    put_be32(f, seq);
    put_be32(f, 0);
    f.push_back(0x50);  // data offset 5 words
    f.push_back(flags);
    put_be16(f, 65535);
    put_be16(f, 0);
    put_be16(f, 0);
  } else {
    put_be16(f, src_port);
    put_be16(f, dst_port);
    put_be16(f, static_cast<uint16_t>(8 + payload.size()));
    put_be16(f, 0);
  }
  f.insert(f.end(), payload.begin(), payload.end());
  return f;
}

}  // namespace

const char* profile_name(SynthProfile p) {
  return p == SynthProfile::kSeparable ? "separable" : "overlapping";
}

SynthProfile profile_from_name(const std::string& s) {
  if (s == "separable") return SynthProfile::kSeparable;
  if (s == "overlapping") return SynthProfile::kOverlapping;
  throw ConfigError("unknown synth profile: " + s);
}

SynthResult synth_corpus(uint64_t seed, int n_classes, int flows_per_class,
                         SynthProfile profile) {
  if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (flows_per_class < 1) throw ConfigError("flows_per_class must be >= 1");

  SynthResult res;
  res.manifest.seed = seed;
  res.manifest.n_classes = n_classes;
  res.manifest.flows_per_class = flows_per_class;
  res.manifest.profile = profile;

  std::vector<PendingPacket> pending;
  uint64_t order = 0;
  uint16_t ip_id = 1;

  // Flows are created round-robin over classes and overlap on the timeline.
  int total_flows = n_classes * flows_per_class;
  for (int g = 0; g < total_flows; ++g) {
    int c = g % n_classes;
    int k = g / n_classes;  // index within class
    ClassTemplate t = class_template(c, profile);
    Rng rng(derive_seed(seed, 0xF10F, static_cast<uint64_t>(c),
                        static_cast<uint64_t>(k)));

    uint32_t client_ip = (10u << 24) | (static_cast<uint32_t>(c + 1) << 16) |
                         ((static_cast<uint32_t>(k) >> 8) << 8) |
                         (static_cast<uint32_t>(k) & 0xFF);
    uint32_t server_ip =
        (192u << 24) | (168u << 16) | (static_cast<uint32_t>(c + 1) << 8) | 1u;
    uint16_t client_port = static_cast<uint16_t>(20000 + k);

    int count = t.count_base + static_cast<int>(rng.uniform_int(3));
    double tm = g * 0.0137 + rng.uniform() * 0.004;

    for (int j = 0; j < count; ++j) {
      bool uplink = (j % 2 == 0);
      int plen = t.len_base + static_cast<int>(rng.uniform_int(17));
      plen = std::clamp(plen, 8, 360);
      std::vector<uint8_t> payload(static_cast<size_t>(plen));
      for (auto& b : payload)
        b = static_cast<uint8_t>(
            t.byte_lo + static_cast<int>(rng.uniform_int(
                            static_cast<uint64_t>(t.byte_hi - t.byte_lo + 1))));
      uint8_t flags = 0;
      if (t.proto == 6) {
        using namespace ingest::tcpflag;
        if (j == 0)
          flags = kSyn;
        else if (j == 1)
          flags = kSyn | kAck;
        else if (j == count - 1)
          flags = kFin | kAck;
        else
          flags = (j % (2 + c % 2) == 0) ? (kPsh | kAck) : kAck;
      }
      PendingPacket pp;
      pp.time = tm;
      pp.order = order++;
      if (uplink)
        pp.frame = build_frame(t, client_ip, server_ip, client_port,
                               t.server_port, flags,
                               static_cast<uint32_t>(j), ip_id++, payload);
      else
        pp.frame = build_frame(t, server_ip, client_ip, t.server_port,
                               client_port, flags, static_cast<uint32_t>(j),
                               ip_id++, payload);
      pending.push_back(std::move(pp));
      tm += rng.exponential(t.gap_rate);
    }

    SynthFlowTruth truth;
    ingest::FiveTuple ft;
    ft.src_ip = client_ip;
    ft.dst_ip = server_ip;
    ft.src_port = client_port;
    ft.dst_port = t.server_port;
    ft.proto = t.proto;
    truth.tuple = ft.canonical();
    truth.label = c;
    truth.packet_count = count;
    res.manifest.flows.push_back(truth);
  }

  std::stable_sort(pending.begin(), pending.end(),
                   [](const PendingPacket& a, const PendingPacket& b) {
                     if (a.time != b.time) return a.time < b.time;
                     return a.order < b.order;
                   });

  // classic PCAP, microsecond timestamps, Ethernet link type
  auto& pcap = res.pcap;
  put_le32(pcap, 0xA1B2C3D4u);
  put_le16(pcap, 2);
  put_le16(pcap, 4);
  put_le32(pcap, 0);
  put_le32(pcap, 0);
  put_le32(pcap, 65535);
  put_le32(pcap, 1);
  for (const auto& pp : pending) {
    double sec_f = std::floor(pp.time);
    uint32_t sec = static_cast<uint32_t>(sec_f);
    uint32_t usec = static_cast<uint32_t>(
        std::llround((pp.time - sec_f) * 1e6));
    if (usec >= 1000000) {
      sec += 1;
      usec -= 1000000;
    }
    put_le32(pcap, sec);
    put_le32(pcap, usec);
    put_le32(pcap, static_cast<uint32_t>(pp.frame.size()));
    put_le32(pcap, static_cast<uint32_t>(pp.frame.size()));
    pcap.insert(pcap.end(), pp.frame.begin(), pp.frame.end());
  }
  return res;
}

void save_manifest_json(const std::string& path, const SynthManifest& m) {
  json j;
  j["seed"] = m.seed;
  j["n_classes"] = m.n_classes;
  j["flows_per_class"] = m.flows_per_class;
  j["profile"] = profile_name(m.profile);
  json flows = json::array();
  for (const auto& f : m.flows) {
    flows.push_back({{"src_ip", f.tuple.src_ip},
                     {"src_port", f.tuple.src_port},
                     {"dst_ip", f.tuple.dst_ip},
                     {"dst_port", f.tuple.dst_port},
                     {"proto", f.tuple.proto},
                     {"label", f.label},
                     {"packet_count", f.packet_count}});
  }
  j["flows"] = std::move(flows);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

SynthManifest load_manifest_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("bad manifest JSON in " + path + ": " + e.what());
  }
  SynthManifest m;
  try {
    m.seed = j.at("seed").get<uint64_t>();
    m.n_classes = j.at("n_classes").get<int>();
    m.flows_per_class = j.at("flows_per_class").get<int>();
    m.profile = profile_from_name(j.at("profile").get<std::string>());
    for (const auto& f : j.at("flows")) {
      SynthFlowTruth t;
      t.tuple.src_ip = f.at("src_ip").get<uint32_t>();
      t.tuple.src_port = f.at("src_port").get<uint16_t>();
      t.tuple.dst_ip = f.at("dst_ip").get<uint32_t>();
      t.tuple.dst_port = f.at("dst_port").get<uint16_t>();
      t.tuple.proto = f.at("proto").get<uint8_t>();
      t.label = f.at("label").get<int>();
      t.packet_count = f.at("packet_count").get<int>();
      m.flows.push_back(t);
    }
  } catch (const json::exception& e) {
    throw IoError("manifest fields missing in " + path + ": " + e.what());
  }
  return m;
}

std::unordered_map<ingest::FiveTuple, int, ingest::FiveTupleHash>
label_lookup(const SynthManifest& m) {
  std::unordered_map<ingest::FiveTuple, int, ingest::FiveTupleHash> map;
  for (const auto& f : m.flows) map[f.tuple] = f.label;
  return map;
}

}  // namespace mmae::evalkit
