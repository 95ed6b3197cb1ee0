#pragma once

// RSSI-based transmitter localization: Delaunay triangulation, piecewise
// linear interpolation onto a grid, argmax after discarding the strongest
// readings, and log-distance path-loss fitting.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "crowdsdr/geo.hpp"

namespace crowdsdr::locate {

class LocateError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Point = geo::LocalXY;

struct Triangle {
    std::array<std::size_t, 3> v{};  // counter-clockwise
};

/// Bowyer-Watson. Throws LocateError for fewer than 3 points, duplicate
/// points, or an all-collinear set.
std::vector<Triangle> delaunay(std::span<const Point> pts);

class LinearInterpolant {
public:
    LinearInterpolant(std::vector<Point> pts, std::vector<double> values);

    /// nullopt outside the convex hull.
    std::optional<double> operator()(Point p) const;
    const std::vector<Triangle>& triangles() const { return tris_; }
    const std::vector<Point>& points() const { return pts_; }
    const std::vector<double>& values() const { return vals_; }

private:
    std::vector<Point> pts_;
    std::vector<double> vals_;
    std::vector<Triangle> tris_;
};

struct Grid {
    double x0 = 0.0;
    double y0 = 0.0;
    double res = 0.0;
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::vector<std::optional<double>> values;  // row-major, row = y index

    Point node(std::size_t ix, std::size_t iy) const {
        return {x0 + static_cast<double>(ix) * res, y0 + static_cast<double>(iy) * res};
    }
    const std::optional<double>& at(std::size_t ix, std::size_t iy) const { return values[iy * nx + ix]; }
};

/// Grid over the bounding box of the points grown by `margin_frac` of its
/// size on each side.
Grid interpolate_grid(const LinearInterpolant& f, double res_m, double margin_frac = 0.1);

struct RssiPoint {
    geo::GeoPoint pos;
    double rssi_dbm = 0.0;
};

struct LocateOptions {
    std::size_t discard_top_k = 3;
    double grid_res_m = 2.0;
    double margin_frac = 0.1;
    std::optional<geo::GeoPoint> origin;  // default: first point
};

struct LocalizationResult {
    geo::GeoPoint estimate;
    Point estimate_xy;
    geo::GeoPoint origin;
    double peak_dbm = 0.0;
    double grid_res_m = 0.0;
    std::size_t used = 0;
    std::size_t discarded = 0;
    std::size_t merged = 0;  // duplicates folded into one point
};

/// Points at identical positions are merged (mean RSSI) first. Throws
/// LocateError when fewer than 3 points remain after the discard.
LocalizationResult estimate_tx(std::span<const RssiPoint> points, const LocateOptions& opts = {});

struct PathLossFit {
    double exponent_n = 0.0;
    double intercept_a = 0.0;  // RSSI at 1 m
    double rms_db = 0.0;
    std::size_t count = 0;
};

/// Least squares of rssi = A - 10·n·log10(d). Needs two distinct distances,
/// all positive.
PathLossFit fit_path_loss(std::span<const std::pair<double, double>> distance_rssi);

}  // namespace crowdsdr::locate
