#include <algorithm>
#include <random>

#include "doctest.h"
#include "crowdsdr/locate.hpp"

using namespace crowdsdr;
using namespace crowdsdr::locate;

namespace {

const geo::GeoPoint kOrigin{37.4275, -122.1697};

std::vector<Point> random_points(std::mt19937_64& g, std::size_t n, double size) {
    std::uniform_real_distribution<double> u(0, size);
    std::vector<Point> p(n);
    for (auto& q : p) q = {u(g), u(g)};
    return p;
}

// Monotone-chain hull, counter-clockwise.
std::vector<Point> hull(std::vector<Point> p) {
    std::sort(p.begin(), p.end(), [](auto& a, auto& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
    auto cross = [](Point o, Point a, Point b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); };
    std::vector<Point> h(2 * p.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
        h[k++] = p[i];
    }
    for (std::size_t i = p.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(h[k - 2], h[k - 1], p[i]) <= 0) --k;
        h[k++] = p[i];
    }
    h.resize(k - 1);
    return h;
}

bool inside(const std::vector<Point>& h, Point q, double tol = 1e-6) {
    for (std::size_t i = 0; i < h.size(); ++i) {
        const auto a = h[i], b = h[(i + 1) % h.size()];
        if ((b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x) < -tol) return false;
    }
    return true;
}

std::vector<RssiPoint> field(const std::vector<Point>& xy, Point tx, double n, double p0) {
    std::vector<RssiPoint> out;
    for (auto p : xy) {
        const double d = std::max(1.0, std::hypot(p.x - tx.x, p.y - tx.y));
        out.push_back({geo::from_local_xy(p, kOrigin), p0 - 10 * n * std::log10(d)});
    }
    return out;
}

}  // namespace

TEST_CASE("locate: delaunay basics and degenerate sets") {
    const std::vector<Point> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    const auto t = delaunay(sq);
    CHECK(t.size() == 2);
    for (const auto& tr : t) {
        const auto a = sq[tr.v[0]], b = sq[tr.v[1]], c = sq[tr.v[2]];
        CHECK((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x) > 0);  // counter-clockwise
    }
    CHECK_THROWS_AS(delaunay(std::vector<Point>{{0, 0}, {1, 1}}), LocateError);
    CHECK_THROWS_AS(delaunay(std::vector<Point>{{0, 0}, {1, 1}, {2, 2}, {3, 3}}), LocateError);
    CHECK_THROWS_AS(delaunay(std::vector<Point>{{0, 0}, {1, 0}, {0, 1}, {1, 0}}), LocateError);
    // empty-circumcircle property on random sets; triangle count 2n - 2 - h
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_points(g, 40, 100);
        const auto tri = delaunay(p);
        CHECK(tri.size() == 2 * p.size() - 2 - hull(p).size());
        for (const auto& tr : tri) {
            const auto a = p[tr.v[0]], b = p[tr.v[1]], c = p[tr.v[2]];
            for (std::size_t k = 0; k < p.size(); ++k) {
                if (k == tr.v[0] || k == tr.v[1] || k == tr.v[2]) continue;
                const double ax = a.x - p[k].x, ay = a.y - p[k].y, bx = b.x - p[k].x, by = b.y - p[k].y,
                             cx = c.x - p[k].x, cy = c.y - p[k].y;
                const double det = (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay) +
                                   (cx * cx + cy * cy) * (ax * by - bx * ay);
                CHECK(det <= 1e-6);
            }
        }
    }
}

TEST_CASE("locate: interpolation properties") {
    LinearInterpolant f({{0, 0}, {10, 0}, {0, 10}}, {-60, -70, -80});
    CHECK(*f({0, 0}) == doctest::Approx(-60));
    CHECK(*f({10, 0}) == doctest::Approx(-70));
    CHECK(*f({10.0 / 3, 10.0 / 3}) == doctest::Approx(-70));
    CHECK_FALSE(f({8, 8}));
    CHECK_THROWS(LinearInterpolant({{0, 0}, {1, 0}, {0, 1}}, {1, 2}));

    std::mt19937_64 g(100);
    std::uniform_real_distribution<double> u(-100, -40);
    for (int seed = 0; seed < 100; ++seed) {
        const auto p = random_points(g, 25, 50);
        std::vector<double> v(p.size());
        for (auto& x : v) x = u(g);
        LinearInterpolant li(p, v);
        for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(*li(p[i]) == doctest::Approx(v[i]));
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const auto grid = interpolate_grid(li, 1.0);
        const auto h = hull(p);
        for (std::size_t iy = 0; iy < grid.ny; ++iy)
            for (std::size_t ix = 0; ix < grid.nx; ++ix) {
                const auto& val = grid.at(ix, iy);
                if (!val) continue;
                REQUIRE(*val >= *lo - 1e-9);
                REQUIRE(*val <= *hi + 1e-9);
                REQUIRE(inside(h, grid.node(ix, iy), 1e-6));
            }
    }
}

TEST_CASE("locate: grid covers the margin") {
    LinearInterpolant f({{0, 0}, {100, 0}, {0, 50}, {100, 50}}, {1, 2, 3, 4});
    const auto g = interpolate_grid(f, 2.0, 0.1);
    CHECK(g.x0 == doctest::Approx(-10));
    CHECK(g.y0 == doctest::Approx(-5));
    CHECK(g.nx == 61);
    CHECK(g.ny == 31);
    CHECK_FALSE(g.at(0, 0));
    CHECK(g.at(5, 3).has_value());  // node (0, 1)
    CHECK_THROWS(interpolate_grid(f, 0.0));
}

TEST_CASE("locate: estimate on a noiseless field") {
    std::mt19937_64 g(9);
    const Point tx{85, 85};
    for (int trial = 0; trial < 10; ++trial) {
        auto xy = random_points(g, 30, 170);
        const auto pts = field(xy, tx, 3.0, -30);
        LocateOptions o;
        o.origin = kOrigin;
        const auto r = estimate_tx(pts, o);
        CHECK(r.used == 27);
        CHECK(r.discarded == 3);
        // remaining points keep the estimate inside their hull
        std::vector<RssiPoint> sorted = pts;
        std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.rssi_dbm > b.rssi_dbm; });
        std::vector<Point> rest;
        for (std::size_t i = 3; i < sorted.size(); ++i) rest.push_back(geo::to_local_xy(sorted[i].pos, kOrigin));
        CHECK(inside(hull(rest), r.estimate_xy, 1e-6));
        CHECK(geo::distance_m(r.estimate, geo::from_local_xy(r.estimate_xy, kOrigin)) < 1e-6);
    }
}

TEST_CASE("locate: shift invariance and tie break") {
    std::mt19937_64 g(21);
    const auto xy = random_points(g, 30, 170);
    auto pts = field(xy, {60, 90}, 3.0, -30);
    LocateOptions o;
    o.origin = kOrigin;
    const auto a = estimate_tx(pts, o);
    for (auto& p : pts) p.rssi_dbm += 17.25;
    const auto b = estimate_tx(pts, o);
    CHECK(a.estimate_xy.x == b.estimate_xy.x);
    CHECK(a.estimate_xy.y == b.estimate_xy.y);
    CHECK(b.peak_dbm == doctest::Approx(a.peak_dbm + 17.25));

    // flat field: lowest x, then lowest y, among defined nodes
    std::vector<RssiPoint> flat;
    for (Point p : {Point{0, 0}, Point{10, 0}, Point{10, 10}, Point{0, 10}})
        flat.push_back({geo::from_local_xy(p, kOrigin), -50});
    o.discard_top_k = 0;
    const auto t = estimate_tx(flat, o);
    CHECK(t.estimate_xy.x == doctest::Approx(1.0));
    CHECK(t.estimate_xy.y == doctest::Approx(1.0));
}

TEST_CASE("locate: too few points and duplicates") {
    std::vector<RssiPoint> p;
    for (Point q : {Point{0, 0}, Point{10, 0}, Point{10, 10}, Point{0, 10}, Point{5, 5}})
        p.push_back({geo::from_local_xy(q, kOrigin), -50 - q.x});
    LocateOptions o;
    CHECK_THROWS_AS(estimate_tx(p, o), LocateError);  // 5 < 3 + 3
    o.discard_top_k = 2;
    CHECK_NOTHROW(estimate_tx(p, o));
    p.push_back(p[1]);
    p.back().rssi_dbm = -70;
    o.discard_top_k = 0;
    const auto r = estimate_tx(p, o);
    CHECK(r.merged == 1);
    CHECK(r.used == 5);
}

TEST_CASE("locate: path-loss fit") {
    std::vector<std::pair<double, double>> d;
    for (double x = 2; x < 200; x *= 1.3) d.emplace_back(x, -8.7 - 30.0 * std::log10(x));
    auto f = fit_path_loss(d);
    CHECK(f.exponent_n == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(f.intercept_a == doctest::Approx(-8.7).epsilon(1e-9));
    CHECK(f.rms_db < 1e-9);
    CHECK(f.count == d.size());

    const std::vector<std::pair<double, double>> two{{10, -40}, {100, -65}};
    f = fit_path_loss(two);
    CHECK(f.exponent_n == doctest::Approx(2.5));
    CHECK(f.intercept_a == doctest::Approx(-15));
    CHECK(f.rms_db < 1e-9);

    CHECK_THROWS_AS(fit_path_loss(std::vector<std::pair<double, double>>{{10, -40}, {10, -41}}), LocateError);
    CHECK_THROWS_AS(fit_path_loss(std::vector<std::pair<double, double>>{{0, -40}, {10, -41}}), LocateError);

    std::mt19937_64 g(4);
    std::normal_distribution<double> sh(0, 4);
    std::uniform_real_distribution<double> u(5, 150);
    std::vector<std::pair<double, double>> noisy;
    for (int i = 0; i < 500; ++i) {
        const double x = u(g);
        noisy.emplace_back(x, -10 - 32 * std::log10(x) + sh(g));
    }
    f = fit_path_loss(noisy);
    CHECK(std::abs(f.exponent_n - 3.2) <= 0.3);
    CHECK(f.rms_db == doctest::Approx(4).epsilon(0.15));
}
