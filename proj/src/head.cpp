#include "dsatrack/head.hpp"

#include <algorithm>
#include <cmath>

namespace dsa {

namespace {

constexpr int kLayers = 4;
constexpr std::array<std::int64_t, 3> kOutWidth = {1, 2, 2};
constexpr std::array<const char*, 3> kBranchName = {"score", "offset", "size"};

void check_box(const BBox& b, const char* what) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) throw ValidationError(std::string(what) + ": box extents must be positive");
}

}  // namespace

HeadParams HeadParams::init(std::int64_t d_model, RngStream& rng) {
  HeadParams p;
  for (std::size_t br = 0; br < 3; ++br) {
    std::int64_t c_in = d_model;
    for (int i = 0; i < kLayers; ++i) {
      const bool last = i == kLayers - 1;
      const std::int64_t c_out = last ? kOutWidth[br] : std::max<std::int64_t>(c_in / 2, 1);
      const double std = last ? 0.01 : std::sqrt(2.0 / static_cast<double>(9 * c_in));
      ConvLayer layer{rng.normal_tensor({9 * c_in, c_out}, std), Tensor({c_out})};
      // score prior of about 0.1 keeps the focal loss tame at the start
      if (last && br == 0) layer.b[0] = -2.19;
      // size prior of a quarter of the search side, what a 4x search crop makes of the target
      if (last && br == 2) layer.b[0] = layer.b[1] = -1.0986;
      p.branches[br].push_back(std::move(layer));
      c_in = c_out;
    }
  }
  return p;
}

void HeadParams::visit(const std::string& prefix, const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t br = 0; br < 3; ++br) {
    for (std::size_t i = 0; i < branches[br].size(); ++i) {
      const std::string name = prefix + kBranchName[br] + "." + std::to_string(i);
      fn(name + ".w", branches[br][i].w);
      fn(name + ".b", branches[br][i].b);
    }
  }
}

HeadVars head_forward(const HeadParams& p, Var x_tokens, std::int64_t h, std::int64_t w, ParamBinder& b) {
  if (x_tokens.rank() != 2 || x_tokens.dim(0) != h * w) {
    throw ShapeError("head_forward: expected " + std::to_string(h * w) + " search tokens, got " +
                     shape_str(x_tokens.shape()));
  }
  Var grid = reshape(x_tokens, {h, w, x_tokens.dim(1)});
  std::array<Var, 3> out;
  for (std::size_t br = 0; br < 3; ++br) {
    Var t = grid;
    const auto& layers = p.branches[br];
    for (std::size_t i = 0; i < layers.size(); ++i) {
      t = conv3x3(t, b(layers[i].w), b(layers[i].b));
      if (i + 1 < layers.size()) t = relu(t);
    }
    out[br] = t;
  }
  return {out[0], sigmoid(out[1]), sigmoid(out[2]), h, w};
}

HeadOutput head_output(const HeadVars& v) {
  const std::int64_t h = v.h, w = v.w;
  HeadOutput o{Tensor({h, w}), Tensor({2, h, w}), Tensor({2, h, w})};
  const Tensor& s = v.score_logits.value();
  for (std::int64_t i = 0; i < h * w; ++i) o.score[i] = 1.0 / (1.0 + std::exp(-s[i]));
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < h * w; ++i) {
      o.offset[c * h * w + i] = v.offset.value()[2 * i + c];
      o.size[c * h * w + i] = v.size.value()[2 * i + c];
    }
  return o;
}

Cell peak_cell(const Tensor& score) {
  if (score.rank() != 2) throw ShapeError("peak_cell: expected [h, w] score map");
  std::size_t best = 0;
  for (std::size_t i = 1; i < score.size(); ++i)
    if (score[i] > score[best]) best = i;
  const auto w = static_cast<std::size_t>(score.dim(1));
  return {static_cast<std::int64_t>(best / w), static_cast<std::int64_t>(best % w)};
}

BBox decode_box(const HeadOutput& out) {
  const std::int64_t h = out.score.dim(0), w = out.score.dim(1);
  const Cell c = peak_cell(out.score);
  const std::int64_t i = c.row * w + c.col, plane = h * w;
  return {(static_cast<double>(c.col) + out.offset[i]) / static_cast<double>(w),
          (static_cast<double>(c.row) + out.offset[plane + i]) / static_cast<double>(h), out.size[i],
          out.size[plane + i]};
}

double iou(const BBox& a, const BBox& b) {
  check_box(a, "iou");
  check_box(b, "iou");
  const double iw = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double ih = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

double giou(const BBox& a, const BBox& b) {
  const double i = iou(a, b);
  const double inter_w = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double inter_h = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double uni = a.w * a.h + b.w * b.h - inter_w * inter_h;
  const double cw = std::max(a.cx + a.w / 2, b.cx + b.w / 2) - std::min(a.cx - a.w / 2, b.cx - b.w / 2);
  const double ch = std::max(a.cy + a.h / 2, b.cy + b.h / 2) - std::min(a.cy - a.h / 2, b.cy - b.h / 2);
  const double enclose = cw * ch;
  return i - (enclose - uni) / enclose;
}

Var giou_loss(Var pred, const BBox& gt) {
  check_box(gt, "giou_loss");
  if (pred.value().size() != 4) throw ShapeError("giou_loss: prediction must hold 4 values");
  const Tensor& pv = pred.value();
  if (!(pv[2] > 0.0) || !(pv[3] > 0.0)) throw ValidationError("giou_loss: predicted box has a non-positive extent");
  Tape& t = pred.tape();
  Var p = reshape(pred, {4});
  auto at = [&](std::int64_t i) { return slice(p, 0, i, i + 1); };
  Var cx = at(0), cy = at(1), w = at(2), h = at(3);
  Var px0 = sub(cx, scale(w, 0.5)), px1 = add(cx, scale(w, 0.5));
  Var py0 = sub(cy, scale(h, 0.5)), py1 = add(cy, scale(h, 0.5));
  auto c = [&](double v) { return t.constant(Tensor::from({1}, {v})); };
  Var gx0 = c(gt.cx - gt.w / 2), gx1 = c(gt.cx + gt.w / 2), gy0 = c(gt.cy - gt.h / 2), gy1 = c(gt.cy + gt.h / 2);
  Var zero = c(0.0);
  Var iw = maximum(sub(minimum(px1, gx1), maximum(px0, gx0)), zero);
  Var ih = maximum(sub(minimum(py1, gy1), maximum(py0, gy0)), zero);
  Var inter = mul(iw, ih);
  Var uni = sub(add(mul(w, h), c(gt.w * gt.h)), inter);
  Var cw = sub(maximum(px1, gx1), minimum(px0, gx0));
  Var ch = sub(maximum(py1, gy1), minimum(py0, gy0));
  Var enclose = mul(cw, ch);
  Var g = sub(div(inter, uni), div(sub(enclose, uni), enclose));
  return reshape(add_scalar(neg(g), 1.0), {});
}

Var l1_loss(Var pred, const BBox& gt) {
  Tape& t = pred.tape();
  Var target = t.constant(Tensor::from({4}, {gt.cx, gt.cy, gt.w, gt.h}));
  return mean(abs(sub(reshape(pred, {4}), target)));
}

Tensor gaussian_target(std::int64_t h, std::int64_t w, Cell center, double sigma) {
  Tensor t({h, w, 1});
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      const double dr = static_cast<double>(r - center.row), dc = static_cast<double>(c - center.col);
      t[r * w + c] = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
    }
  return t;
}

Cell center_cell(const BBox& box, std::int64_t h, std::int64_t w) {
  auto clamp = [](double v, std::int64_t n) {
    return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(v * static_cast<double>(n))), 0, n - 1);
  };
  return {clamp(box.cy, h), clamp(box.cx, w)};
}

Var box_at(const HeadVars& v, Cell cell) {
  Tape& t = v.offset.tape();
  const std::int64_t i = cell.row * v.w + cell.col;
  Var off = reshape(slice(reshape(v.offset, {v.h * v.w, 2}), 0, i, i + 1), {2});
  Var sz = reshape(slice(reshape(v.size, {v.h * v.w, 2}), 0, i, i + 1), {2});
  Var base = t.constant(Tensor::from({2}, {static_cast<double>(cell.col), static_cast<double>(cell.row)}));
  Var inv = t.constant(Tensor::from({2}, {1.0 / static_cast<double>(v.w), 1.0 / static_cast<double>(v.h)}));
  Var center = mul(add(base, off), inv);
  return concat(std::vector<Var>{center, sz}, 0);
}

TrackingLoss tracking_loss(const HeadVars& v, const BBox& gt, const LossWeights& w) {
  const Cell cell = center_cell(gt, v.h, v.w);
  Var focal = focal_loss(v.score_logits, gaussian_target(v.h, v.w, cell));
  Var box = box_at(v, cell);
  Var l1 = l1_loss(box, gt);
  Var g = giou_loss(box, gt);
  TrackingLoss out;
  out.focal = focal.value().item();
  out.l1 = l1.value().item();
  out.giou = g.value().item();
  out.total = add(add(scale(focal, w.focal), scale(l1, w.l1)), scale(g, w.giou));
  return out;
}

}  // namespace dsa
