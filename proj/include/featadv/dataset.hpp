#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include <torch/torch.h>

namespace featadv {

inline constexpr int64_t kNumClasses = 10;
inline constexpr int64_t kImageSide = 32;

/// Class names of the procedural shapes dataset. Consecutive pairs are the
/// "similar class" pairs used by the defense protocol.
inline constexpr std::array<std::string_view, kNumClasses> kClassNames{
    "disc", "ring", "square", "diamond", "hstripes", "vstripes", "plus", "cross", "tri_up", "tri_down"};

/// A labelled image set: images [N,3,S,S] in [0,1], labels [N] int64.
struct LabeledImages {
  torch::Tensor images;
  torch::Tensor labels;

  int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  /// Subset with the given label.
  LabeledImages of_class(int64_t label) const;
  /// Subset without the given label.
  LabeledImages excluding(int64_t label) const;
  LabeledImages take(int64_t count) const;
};

/// Renders `count` images of a 10-class shapes dataset: one coloured shape or
/// texture per image on a random background, with pixel noise. Labels cycle
/// through the classes so every split is balanced. Fully determined by `seed`.
LabeledImages render_shapes(int64_t count, uint64_t seed, int64_t side = kImageSide);

/// Standard splits. The held-out split uses a disjoint seed stream.
LabeledImages training_split(int64_t count = 10000);
LabeledImages heldout_split(int64_t count = 2000);

/// Process-wide cached copies of the default splits (rendered on first use).
const LabeledImages& training_pool();
const LabeledImages& heldout_pool();

}  // namespace featadv
