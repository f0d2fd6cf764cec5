#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "todlab/dialog.hpp"
#include "todlab/rng.hpp"

namespace todlab {

// Which belief spans are eligible for [MASK] replacement, by provenance.
enum class MaskTarget { GroundTruthBelief, GeneratedBelief };

// Whether the two sequences of a consistency pair share mask positions.
enum class MaskPositions { Same, Diff };

struct MaskConfig {
  MaskTarget target = MaskTarget::GroundTruthBelief;
  MaskPositions positions = MaskPositions::Diff;
  double rate = 0.02;
  uint64_t seed = 1;

  void validate() const {
    if (!(rate >= 0.0 && rate <= 1.0))
      throw std::invalid_argument("mask rate must be in [0,1]");
  }
};

struct MaskPlan {
  std::vector<int> positions;  // sorted token indices
};

// Token positions eligible for masking: bodies of belief spans whose
// provenance matches the configured target. Role markers are never eligible
// (masking a boundary would corrupt the span index).
inline std::vector<int> mask_eligible_positions(const TaggedSequence& seq,
                                                MaskTarget target) {
  Provenance want = target == MaskTarget::GroundTruthBelief ? Provenance::GroundTruth
                                                            : Provenance::Generated;
  std::vector<int> out;
  for (const auto& [key, range] : seq.spans) {
    if (key.role != SpanRole::Belief) continue;
    auto p = seq.provenance.find(key);
    if (p == seq.provenance.end() || p->second != want) continue;
    for (int i = range.begin + 1; i < range.end - 1; ++i) out.push_back(i);
  }
  return out;
}

// Draws the two mask plans of a consistency pair. Each eligible position
// enters a plan independently with probability rate; Same shares one draw,
// Diff draws twice.
inline std::pair<MaskPlan, MaskPlan> draw_mask_pair(const TaggedSequence& seq,
                                                    const MaskConfig& config, Rng& rng) {
  config.validate();
  std::vector<int> eligible = mask_eligible_positions(seq, config.target);
  MaskPlan a, b;
  for (int pos : eligible) {
    if (config.positions == MaskPositions::Same) {
      if (rng.bernoulli(config.rate)) {
        a.positions.push_back(pos);
        b.positions.push_back(pos);
      }
    } else {
      if (rng.bernoulli(config.rate)) a.positions.push_back(pos);
      if (rng.bernoulli(config.rate)) b.positions.push_back(pos);
    }
  }
  return {std::move(a), std::move(b)};
}

struct MaskedSequence {
  TaggedSequence seq;
  std::vector<int> original_tokens;  // NLL targets stay the pre-mask tokens
};

// Replaces plan positions with the [MASK] id. Spans, lengths, and all other
// tokens are unchanged; touched spans are re-tagged Masked.
inline MaskedSequence apply_mask(const TaggedSequence& seq, const MaskPlan& plan,
                                 int mask_id) {
  MaskedSequence out;
  out.original_tokens = seq.tokens;
  out.seq = seq;
  for (int pos : plan.positions) {
    if (pos < 0 || pos >= seq.length())
      throw std::out_of_range("mask position " + std::to_string(pos) +
                              " outside sequence");
    out.seq.tokens[pos] = mask_id;
    for (auto& [key, range] : out.seq.spans) {
      if (pos >= range.begin && pos < range.end) {
        out.seq.provenance[key] = Provenance::Masked;
        break;
      }
    }
  }
  return out;
}

}  // namespace todlab
