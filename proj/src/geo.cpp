#include "crowdsdr/geo.hpp"

#include <cmath>
#include <numbers>

namespace crowdsdr::geo {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
}

bool valid(GeoPoint p) {
    return std::isfinite(p.lat) && std::isfinite(p.lon) && p.lat >= -90.0 && p.lat <= 90.0 &&
           p.lon >= -180.0 && p.lon <= 180.0;
}

LocalXY to_local_xy(GeoPoint p, GeoPoint origin) {
    const double cos_lat0 = std::cos(origin.lat * kDegToRad);
    return {kEarthRadiusM * (p.lon - origin.lon) * kDegToRad * cos_lat0,
            kEarthRadiusM * (p.lat - origin.lat) * kDegToRad};
}

GeoPoint from_local_xy(LocalXY xy, GeoPoint origin) {
    const double cos_lat0 = std::cos(origin.lat * kDegToRad);
    return {origin.lat + xy.y / kEarthRadiusM / kDegToRad,
            origin.lon + xy.x / (kEarthRadiusM * cos_lat0) / kDegToRad};
}

double distance_m(GeoPoint a, GeoPoint b) {
    const LocalXY d = to_local_xy(b, a);
    return std::hypot(d.x, d.y);
}

}  // namespace crowdsdr::geo
