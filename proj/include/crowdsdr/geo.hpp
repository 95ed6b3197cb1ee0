#pragma once

// Local tangent-plane helpers shared by the channel model and localization.

namespace crowdsdr::geo {

inline constexpr double kEarthRadiusM = 6'371'000.0;

struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
};

struct LocalXY {
    double x = 0.0;  // east, meters
    double y = 0.0;  // north, meters
};

bool valid(GeoPoint p);

/// Equirectangular projection about `origin`. Accurate to well under a
/// meter within ~10 km of the origin.
LocalXY to_local_xy(GeoPoint p, GeoPoint origin);
GeoPoint from_local_xy(LocalXY xy, GeoPoint origin);

double distance_m(GeoPoint a, GeoPoint b);

}  // namespace crowdsdr::geo
