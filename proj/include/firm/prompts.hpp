#pragma once

#include <vector>

#include "firm/imaging.hpp"

namespace firm {

struct Box {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

// Sparse prompts for one segmentation call. `positive` marks the region
// to segment; negative prompts mark context that must stay outside it.
struct PromptPoint {
  PixelCoord at;
  bool positive = true;
};

struct PromptBox {
  Box box;
  bool positive = true;
};

struct PromptSet {
  std::vector<PromptPoint> points;
  std::vector<PromptBox> boxes;

  bool empty() const noexcept { return points.empty() && boxes.empty(); }
  std::size_t token_count() const noexcept { return points.size() + 2 * boxes.size(); }
};

}  // namespace firm
