#pragma once

// Deterministic synthetic traffic generator. Classes differ in payload byte
// ranges, packet-length laws, exponential inter-arrival rates, protocol
// (TCP/UDP, one DNS class) and TCP flag patterns; the separable profile uses
// disjoint payload byte ranges so a byte-histogram probe can tell classes
// apart. Same seed -> byte-identical PCAP and manifest.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmae/ingest/pcap.hpp"

namespace mmae::evalkit {

enum class SynthProfile { kSeparable, kOverlapping };

struct SynthFlowTruth {
  ingest::FiveTuple tuple;  // canonical
  int label = 0;
  int packet_count = 0;
};

struct SynthManifest {
  uint64_t seed = 0;
  int n_classes = 0;
  int flows_per_class = 0;
  SynthProfile profile = SynthProfile::kSeparable;
  std::vector<SynthFlowTruth> flows;  // creation order
};

struct SynthResult {
  std::vector<uint8_t> pcap;
  SynthManifest manifest;
};

SynthResult synth_corpus(uint64_t seed, int n_classes, int flows_per_class,
                         SynthProfile profile = SynthProfile::kSeparable);

void save_manifest_json(const std::string& path, const SynthManifest& m);
SynthManifest load_manifest_json(const std::string& path);

// Canonical five-tuple -> class label, for joining parsed flows to truth.
std::unordered_map<ingest::FiveTuple, int, ingest::FiveTupleHash>
label_lookup(const SynthManifest& m);

const char* profile_name(SynthProfile p);
SynthProfile profile_from_name(const std::string& s);

}  // namespace mmae::evalkit
