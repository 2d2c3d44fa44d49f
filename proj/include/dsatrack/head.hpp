#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "dsatrack/autograd.hpp"
#include "dsatrack/rng.hpp"

namespace dsa {

/// Box in normalized search-region coordinates: center and size, all in [0, 1].
struct BBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

struct ConvLayer {
  Tensor w;  ///< [9 * c_in, c_out]
  Tensor b;  ///< [c_out]
};

/// Score, offset and size branches, each four 3x3 conv layers whose widths
/// halve from d_model before the final projection.
struct HeadParams {
  std::array<std::vector<ConvLayer>, 3> branches;

  static HeadParams init(std::int64_t d_model, RngStream& rng);
  void visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn);
};

/// Differentiable head outputs over an h x w token grid.
struct HeadVars {
  Var score_logits;  ///< [h, w, 1]
  Var offset;        ///< [h, w, 2], sigmoid
  Var size;          ///< [h, w, 2], sigmoid
  std::int64_t h = 0, w = 0;
};

/// x_tokens: [h * w, d] search tokens in row-major grid order.
HeadVars head_forward(const HeadParams& p, Var x_tokens, std::int64_t h, std::int64_t w, ParamBinder& b);

/// Plain head maps: S [h, w] in [0, 1], O and E as [2, h, w].
struct HeadOutput {
  Tensor score, offset, size;
};
HeadOutput head_output(const HeadVars& v);

struct Cell {
  std::int64_t row = 0, col = 0;
};

/// argmax of S, lowest row-major index on ties.
Cell peak_cell(const Tensor& score);

/// Center from the peak cell plus its offset, size read at the peak.
BBox decode_box(const HeadOutput& out);

/// Generalized IoU of two boxes; throws ValidationError for a non-positive extent.
double iou(const BBox& a, const BBox& b);
double giou(const BBox& a, const BBox& b);

/// Differentiable losses on a predicted (cx, cy, w, h) 4-vector.
Var giou_loss(Var pred, const BBox& gt);
Var l1_loss(Var pred, const BBox& gt);

/// Gaussian bump (sigma in cells) peaking at exactly 1 on `center`; [h, w, 1].
Tensor gaussian_target(std::int64_t h, std::int64_t w, Cell center, double sigma = 1.0);

/// Grid cell containing the box center, clamped to the grid.
Cell center_cell(const BBox& box, std::int64_t h, std::int64_t w);

/// Prediction read at `cell`: ((col + O0) / w, (row + O1) / h, E0, E1).
Var box_at(const HeadVars& v, Cell cell);

struct LossWeights {
  double l1 = 5.0, giou = 2.0, focal = 1.0;
};

struct TrackingLoss {
  Var total;
  double focal = 0.0, l1 = 0.0, giou = 0.0;
};

/// Focal loss on the score map plus L1 and GIoU on the box read at the
/// ground-truth cell.
TrackingLoss tracking_loss(const HeadVars& v, const BBox& gt, const LossWeights& w = {});

}  // namespace dsa
