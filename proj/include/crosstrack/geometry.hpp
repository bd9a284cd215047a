#pragma once

// Boxes in continuous image pixel coordinates (x right, y down), the
// grid-to-image mapping, (w,h,dx,dy) encode/decode, IoU (plain and
// tape-differentiable), and the side-distance centerness prior.

#include <algorithm>
#include <cmath>

#include "crosstrack/tensor.hpp"

namespace crosstrack {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double cx() const { return (x0 + x1) / 2.0; }
  double cy() const { return (y0 + y1) / 2.0; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) &&
           std::isfinite(y1) && x1 >= x0 && y1 >= y0;
  }

  Box translated(double dx, double dy) const {
    return {x0 + dx, y0 + dy, x1 + dx, y1 + dy};
  }
  Box scaled(double f) const { return {x0 * f, y0 * f, x1 * f, y1 * f}; }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
};

inline void require_valid(const Box& b, const char* who) {
  if (!b.valid())
    fail<ContractError>(who, ": invalid box (", b.x0, ",", b.y0, ",", b.x1, ",",
                        b.y1, ")");
}

// Width/height plus signed center offset of the box relative to a location.
struct RegTarget {
  double w = 0, h = 0, dx = 0, dy = 0;
};

struct GridSpec {
  int stride = 8;
  int height = 0;
  int width = 0;
};

inline void require_valid(const GridSpec& g) {
  if (g.stride < 1 || g.height < 1 || g.width < 1)
    fail<ContractError>("grid spec must have stride,height,width >= 1");
}

// Feature-grid location -> image coordinates: (floor(s/2) + x*s, floor(s/2) + y*s).
inline std::pair<double, double> grid_to_image(const GridSpec& grid, int x, int y) {
  require_valid(grid);
  if (x < 0 || x >= grid.width || y < 0 || y >= grid.height)
    fail<ContractError>("grid_to_image: (", x, ",", y, ") outside ", grid.width, "x",
                        grid.height, " grid");
  const double half = double(grid.stride / 2);
  return {half + double(x) * grid.stride, half + double(y) * grid.stride};
}

inline RegTarget encode(const Box& gt, std::pair<double, double> loc) {
  require_valid(gt, "encode");
  return {gt.width(), gt.height(), gt.cx() - loc.first, gt.cy() - loc.second};
}

inline Box decode(const RegTarget& t, std::pair<double, double> loc) {
  if (t.w < 0 || t.h < 0)
    fail<ContractError>("decode: negative extents w=", t.w, " h=", t.h);
  const double cx = loc.first + t.dx, cy = loc.second + t.dy;
  return {cx - t.w / 2, cy - t.h / 2, cx + t.w / 2, cy + t.h / 2};
}

inline double iou(const Box& a, const Box& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double center_error(const Box& a, const Box& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

// ---------------------------------------------------------------------------
// Differentiable IoU over a grid of predicted targets against one box.
// Locations and the box are constants; w,h,dx,dy come off the tape.
// All tensors share one [H,W] (or flat [N]) shape.
// ---------------------------------------------------------------------------
template <typename S>
struct PredGrid {
  Tensor<S> w, h, dx, dy;
};

template <typename S>
Tensor<S> iou_grid(const PredGrid<S>& pred, const Tensor<S>& loc_x,
                   const Tensor<S>& loc_y, const Box& gt) {
  require_valid(gt, "iou_grid");
  {
    const auto& wv = pred.w.values();
    const auto& hv = pred.h.values();
    for (long i = 0; i < wv.size(); ++i)
      if (!(wv[i] > S(0)) || !(hv[i] > S(0)))
        fail<ContractError>("iou_grid: non-positive predicted extent at index ", i);
  }
  Tensor<S> cx = add(pred.dx, loc_x);
  Tensor<S> cy = add(pred.dy, loc_y);
  Tensor<S> half_w = mul_scalar(pred.w, S(0.5));
  Tensor<S> half_h = mul_scalar(pred.h, S(0.5));
  Tensor<S> x0 = sub(cx, half_w), x1 = add(cx, half_w);
  Tensor<S> y0 = sub(cy, half_h), y1 = add(cy, half_h);

  const Shape& sh = pred.w.shape();
  Tensor<S> gx0 = Tensor<S>::constant(sh, S(gt.x0));
  Tensor<S> gx1 = Tensor<S>::constant(sh, S(gt.x1));
  Tensor<S> gy0 = Tensor<S>::constant(sh, S(gt.y0));
  Tensor<S> gy1 = Tensor<S>::constant(sh, S(gt.y1));

  Tensor<S> iw = relu(sub(minimum(x1, gx1), maximum(x0, gx0)));
  Tensor<S> ih = relu(sub(minimum(y1, gy1), maximum(y0, gy0)));
  Tensor<S> inter = mul(iw, ih);
  Tensor<S> uni = add_scalar(sub(mul(pred.w, pred.h), inter), S(gt.area()));
  return div(inter, uni);
}

// element i of a flat tensor as a [1] tensor (differentiable select)
template <typename S>
Tensor<S> slice_of(const Tensor<S>& t, int i) {
  Tensor<S> as3 = reshape(t, Shape{int(t.size()), 1, 1});
  return reshape(slice_channel(as3, i), Shape{1});
}

// Single-location form: pred is a flat 4-tensor (w,h,dx,dy).
template <typename S>
Tensor<S> iou_diff(const Tensor<S>& pred, const RegTarget& gt_target,
                   std::pair<double, double> loc) {
  if (pred.size() != 4)
    fail<ShapeError>("iou_diff: pred must hold (w,h,dx,dy), got ",
                     shape_str(pred.shape()));
  Tensor<S> p4 = reshape(pred, Shape{4});
  PredGrid<S> pg{slice_of(p4, 0), slice_of(p4, 1), slice_of(p4, 2), slice_of(p4, 3)};
  Tensor<S> lx = Tensor<S>::constant(Shape{1}, S(loc.first));
  Tensor<S> ly = Tensor<S>::constant(Shape{1}, S(loc.second));
  Box gt_box = decode(gt_target, loc);
  return reshape(iou_grid(pg, lx, ly, gt_box), Shape{});
}

// ---------------------------------------------------------------------------
// Centerness: sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))) from the four
// side distances; requires the location inside the box.
// ---------------------------------------------------------------------------
inline double centerness(const RegTarget& t) {
  const double l = t.w / 2 - t.dx, r = t.w / 2 + t.dx;
  const double tp = t.h / 2 - t.dy, bt = t.h / 2 + t.dy;
  if (l < 0 || r < 0 || tp < 0 || bt < 0)
    fail<ContractError>("centerness: location outside box (l=", l, " r=", r,
                        " t=", tp, " b=", bt, ")");
  const double fx = std::max(l, r) > 0 ? std::min(l, r) / std::max(l, r) : 0.0;
  const double fy = std::max(tp, bt) > 0 ? std::min(tp, bt) / std::max(tp, bt) : 0.0;
  return std::sqrt(fx * fy);
}

// Loss-target variant: distances clamp at zero, so a location outside the box
// scores 0 instead of erroring.
inline double centerness_clamped(const RegTarget& t) {
  const double l = std::max(0.0, t.w / 2 - t.dx), r = std::max(0.0, t.w / 2 + t.dx);
  const double tp = std::max(0.0, t.h / 2 - t.dy), bt = std::max(0.0, t.h / 2 + t.dy);
  const double fx = std::max(l, r) > 0 ? std::min(l, r) / std::max(l, r) : 0.0;
  const double fy = std::max(tp, bt) > 0 ? std::min(tp, bt) / std::max(tp, bt) : 0.0;
  return std::sqrt(fx * fy);
}

}  // namespace crosstrack
