#include "crowdsdr/locate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace crowdsdr::locate {

namespace {

double orient(Point a, Point b, Point c) { return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x); }

// > 0 when d lies inside the circumcircle of counter-clockwise (a, b, c)
double incircle(Point a, Point b, Point c, Point d) {
    const double adx = a.x - d.x, ady = a.y - d.y;
    const double bdx = b.x - d.x, bdy = b.y - d.y;
    const double cdx = c.x - d.x, cdy = c.y - d.y;
    const double ad = adx * adx + ady * ady;
    const double bd = bdx * bdx + bdy * bdy;
    const double cd = cdx * cdx + cdy * cdy;
    return adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx);
}

// A finite super triangle can leave thin triangles along the convex hull
// uncreated. Close every concave notch of the triangulation boundary with an
// ear, then let edge flips restore the empty-circumcircle property.
void fill_hull_pockets(const std::vector<Point>& pts, std::size_t n, std::vector<Triangle>& tris) {
    bool changed = true;
    while (changed) {
        changed = false;
        std::set<std::pair<std::size_t, std::size_t>> directed;
        for (const auto& t : tris)
            for (int e = 0; e < 3; ++e) directed.insert({t.v[e], t.v[(e + 1) % 3]});
        std::map<std::size_t, std::size_t> next;
        for (const auto& [a, b] : directed)
            if (!directed.count({b, a})) next[a] = b;
        for (const auto& [a, b] : next) {
            const auto it = next.find(b);
            if (it == next.end()) continue;
            const std::size_t c = it->second;
            if (c == a || orient(pts[a], pts[b], pts[c]) >= 0.0) continue;
            bool empty = true;
            for (std::size_t k = 0; k < n && empty; ++k) {
                if (k == a || k == b || k == c) continue;
                if (orient(pts[a], pts[c], pts[k]) > 0.0 && orient(pts[c], pts[b], pts[k]) > 0.0 &&
                    orient(pts[b], pts[a], pts[k]) > 0.0)
                    empty = false;
            }
            if (!empty) continue;
            tris.push_back({{a, c, b}});
            changed = true;
            break;
        }
    }
}

void restore_delaunay(const std::vector<Point>& pts, std::vector<Triangle>& tris) {
    for (std::size_t pass = 0; pass < 64 * tris.size() + 64; ++pass) {
        std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, int>> owner;
        for (std::size_t t = 0; t < tris.size(); ++t)
            for (int e = 0; e < 3; ++e) owner[{tris[t].v[e], tris[t].v[(e + 1) % 3]}] = {t, e};
        bool flipped = false;
        for (std::size_t t = 0; t < tris.size() && !flipped; ++t) {
            for (int e = 0; e < 3 && !flipped; ++e) {
                const std::size_t a = tris[t].v[e], b = tris[t].v[(e + 1) % 3], c = tris[t].v[(e + 2) % 3];
                const auto it = owner.find({b, a});
                if (it == owner.end()) continue;
                const auto [u, f] = it->second;
                const std::size_t d = tris[u].v[(f + 2) % 3];
                const double scale = 1e-12;
                if (incircle(pts[a], pts[b], pts[c], pts[d]) <= scale) continue;
                // (a, b) is illegal: replace with (c, d)
                if (orient(pts[c], pts[a], pts[d]) <= 0.0 || orient(pts[d], pts[b], pts[c]) <= 0.0) continue;
                tris[t] = {{c, a, d}};
                tris[u] = {{d, b, c}};
                flipped = true;
            }
        }
        if (!flipped) return;
    }
}

}  // namespace

std::vector<Triangle> delaunay(std::span<const Point> in) {
    const std::size_t n = in.size();
    if (n < 3) throw LocateError("triangulation needs at least 3 points");

    // normalize for conditioning
    double minx = in[0].x, maxx = in[0].x, miny = in[0].y, maxy = in[0].y;
    for (const auto& p : in) {
        minx = std::min(minx, p.x);
        maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y);
        maxy = std::max(maxy, p.y);
    }
    const double cx = (minx + maxx) / 2.0, cy = (miny + maxy) / 2.0;
    const double scale = std::max(maxx - minx, maxy - miny);
    if (!(scale > 0.0)) throw LocateError("degenerate point set: all points coincide");
    std::vector<Point> pts(n + 3);
    for (std::size_t i = 0; i < n; ++i) pts[i] = {(in[i].x - cx) / scale, (in[i].y - cy) / scale};

    {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) {
            return std::pair(pts[a].x, pts[a].y) < std::pair(pts[b].x, pts[b].y);
        });
        for (std::size_t i = 1; i < n; ++i) {
            const auto& a = pts[order[i - 1]];
            const auto& b = pts[order[i]];
            if (std::hypot(a.x - b.x, a.y - b.y) < 1e-12) throw LocateError("degenerate point set: duplicate points");
        }
        // collinearity: largest |cross| against the line through two extreme points
        const auto& p0 = pts[order.front()];
        const auto& p1 = pts[order.back()];
        double best = 0.0;
        for (std::size_t i = 0; i < n; ++i) best = std::max(best, std::abs(orient(p0, p1, pts[i])));
        if (best < 1e-10) throw LocateError("degenerate point set: all points collinear");
    }

    constexpr double kBig = 1e3;
    pts[n] = {-kBig, -kBig};
    pts[n + 1] = {kBig, -kBig};
    pts[n + 2] = {0.0, kBig};

    std::vector<Triangle> tris{{{n, n + 1, n + 2}}};
    std::vector<char> bad;
    for (std::size_t i = 0; i < n; ++i) {
        const Point p = pts[i];
        bad.assign(tris.size(), 0);
        for (std::size_t t = 0; t < tris.size(); ++t) {
            const auto& v = tris[t].v;
            if (incircle(pts[v[0]], pts[v[1]], pts[v[2]], p) > 0.0) bad[t] = 1;
        }
        // boundary of the cavity: edges used by exactly one bad triangle
        std::map<std::pair<std::size_t, std::size_t>, int> edge_count;
        std::vector<std::pair<std::size_t, std::size_t>> edges;
        for (std::size_t t = 0; t < tris.size(); ++t) {
            if (!bad[t]) continue;
            const auto& v = tris[t].v;
            for (int e = 0; e < 3; ++e) {
                const std::size_t a = v[e], b = v[(e + 1) % 3];
                edges.emplace_back(a, b);
                ++edge_count[{std::min(a, b), std::max(a, b)}];
            }
        }
        std::vector<Triangle> next;
        next.reserve(tris.size() + 2);
        for (std::size_t t = 0; t < tris.size(); ++t)
            if (!bad[t]) next.push_back(tris[t]);
        for (const auto& [a, b] : edges) {
            if (edge_count[{std::min(a, b), std::max(a, b)}] != 1) continue;
            // cavity edges are CCW around the cavity, so (a, b, p) is CCW
            next.push_back({{a, b, i}});
        }
        tris.swap(next);
    }
    std::vector<Triangle> out;
    for (const auto& t : tris) {
        if (t.v[0] >= n || t.v[1] >= n || t.v[2] >= n) continue;
        if (orient(pts[t.v[0]], pts[t.v[1]], pts[t.v[2]]) <= 0.0) continue;  // sliver from round-off
        out.push_back(t);
    }
    if (out.empty()) throw LocateError("degenerate point set: no triangles");
    fill_hull_pockets(pts, n, out);
    restore_delaunay(pts, out);
    return out;
}

LinearInterpolant::LinearInterpolant(std::vector<Point> pts, std::vector<double> values)
    : pts_(std::move(pts)), vals_(std::move(values)) {
    if (pts_.size() != vals_.size()) throw LocateError("interpolant: points and values differ in length");
    tris_ = delaunay(pts_);
}

std::optional<double> LinearInterpolant::operator()(Point p) const {
    for (const auto& t : tris_) {
        const Point a = pts_[t.v[0]], b = pts_[t.v[1]], c = pts_[t.v[2]];
        const double area = orient(a, b, c);
        const double l0 = orient(b, c, p) / area;
        const double l1 = orient(c, a, p) / area;
        const double l2 = 1.0 - l0 - l1;
        constexpr double eps = -1e-12;
        if (l0 >= eps && l1 >= eps && l2 >= eps) return l0 * vals_[t.v[0]] + l1 * vals_[t.v[1]] + l2 * vals_[t.v[2]];
    }
    return std::nullopt;
}

Grid interpolate_grid(const LinearInterpolant& f, double res_m, double margin_frac) {
    if (!(res_m > 0.0)) throw LocateError("grid resolution must be positive");
    if (margin_frac < 0.0) throw LocateError("grid margin must be non-negative");
    const auto& pts = f.points();
    double minx = pts[0].x, maxx = pts[0].x, miny = pts[0].y, maxy = pts[0].y;
    for (const auto& p : pts) {
        minx = std::min(minx, p.x);
        maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y);
        maxy = std::max(maxy, p.y);
    }
    const double mx = (maxx - minx) * margin_frac, my = (maxy - miny) * margin_frac;
    Grid g;
    g.res = res_m;
    g.x0 = minx - mx;
    g.y0 = miny - my;
    g.nx = static_cast<std::size_t>(std::floor((maxx + mx - g.x0) / res_m)) + 1;
    g.ny = static_cast<std::size_t>(std::floor((maxy + my - g.y0) / res_m)) + 1;
    g.values.assign(g.nx * g.ny, std::nullopt);

    // rasterize each triangle over the nodes in its bounding box
    const auto& vals = f.values();
    for (const auto& t : f.triangles()) {
        const Point a = pts[t.v[0]], b = pts[t.v[1]], c = pts[t.v[2]];
        const double area = orient(a, b, c);
        const double tx0 = std::min({a.x, b.x, c.x}), tx1 = std::max({a.x, b.x, c.x});
        const double ty0 = std::min({a.y, b.y, c.y}), ty1 = std::max({a.y, b.y, c.y});
        const auto ix0 = static_cast<std::size_t>(std::max(0.0, std::ceil((tx0 - g.x0) / res_m - 1e-9)));
        const auto iy0 = static_cast<std::size_t>(std::max(0.0, std::ceil((ty0 - g.y0) / res_m - 1e-9)));
        const auto ix1 = std::min(g.nx - 1, static_cast<std::size_t>(std::floor((tx1 - g.x0) / res_m + 1e-9)));
        const auto iy1 = std::min(g.ny - 1, static_cast<std::size_t>(std::floor((ty1 - g.y0) / res_m + 1e-9)));
        for (std::size_t iy = iy0; iy <= iy1; ++iy) {
            for (std::size_t ix = ix0; ix <= ix1; ++ix) {
                auto& slot = g.values[iy * g.nx + ix];
                if (slot) continue;
                const Point p = g.node(ix, iy);
                const double l0 = orient(b, c, p) / area;
                const double l1 = orient(c, a, p) / area;
                const double l2 = 1.0 - l0 - l1;
                constexpr double eps = -1e-12;
                if (l0 >= eps && l1 >= eps && l2 >= eps)
                    slot = l0 * vals[t.v[0]] + l1 * vals[t.v[1]] + l2 * vals[t.v[2]];
            }
        }
    }
    return g;
}

LocalizationResult estimate_tx(std::span<const RssiPoint> points, const LocateOptions& opts) {
    if (points.empty()) throw LocateError("no points");
    for (const auto& p : points)
        if (!geo::valid(p.pos) || !std::isfinite(p.rssi_dbm)) throw LocateError("point out of range");
    LocalizationResult r;
    r.origin = opts.origin.value_or(points.front().pos);
    r.grid_res_m = opts.grid_res_m;

    // merge points that project to the same spot (within 1 mm)
    struct Acc {
        Point xy;
        double sum = 0.0;
        std::size_t n = 0;
    };
    std::map<std::pair<long long, long long>, Acc> merged;
    for (const auto& p : points) {
        const auto xy = geo::to_local_xy(p.pos, r.origin);
        auto& a = merged[{std::llround(xy.x * 1000.0), std::llround(xy.y * 1000.0)}];
        if (a.n == 0) a.xy = xy;
        a.sum += p.rssi_dbm;
        ++a.n;
    }
    std::vector<std::pair<Point, double>> pv;
    for (const auto& [k, a] : merged) pv.emplace_back(a.xy, a.sum / static_cast<double>(a.n));
    r.merged = points.size() - pv.size();

    if (pv.size() < 3 + opts.discard_top_k)
        throw LocateError("too few points: need at least " + std::to_string(3 + opts.discard_top_k) + ", have " +
                          std::to_string(pv.size()));
    std::stable_sort(pv.begin(), pv.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    pv.erase(pv.begin(), pv.begin() + static_cast<std::ptrdiff_t>(opts.discard_top_k));
    r.discarded = opts.discard_top_k;
    r.used = pv.size();

    std::vector<Point> xy;
    std::vector<double> vals;
    for (const auto& [p, v] : pv) {
        xy.push_back(p);
        vals.push_back(v);
    }
    const LinearInterpolant f(std::move(xy), std::move(vals));
    const Grid g = interpolate_grid(f, opts.grid_res_m, opts.margin_frac);

    bool found = false;
    Point best{};
    double best_v = -std::numeric_limits<double>::infinity();
    // x-major scan gives the lexicographic tie-break; values within
    // kTieDb of each other count as equal so round-off cannot pick the winner
    constexpr double kTieDb = 1e-9;
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
        for (std::size_t iy = 0; iy < g.ny; ++iy) {
            const auto& v = g.at(ix, iy);
            if (v && (!found || *v > best_v + kTieDb)) {
                best_v = *v;
                best = g.node(ix, iy);
                found = true;
            }
        }
    }
    if (!found) throw LocateError("grid too coarse: no node inside the hull");
    r.estimate_xy = best;
    r.estimate = geo::from_local_xy(best, r.origin);
    r.peak_dbm = best_v;
    return r;
}

PathLossFit fit_path_loss(std::span<const std::pair<double, double>> dr) {
    if (dr.size() < 2) throw LocateError("path-loss fit needs at least 2 pairs");
    double sx = 0.0, sy = 0.0;
    for (const auto& [d, rssi] : dr) {
        if (!(d > 0.0) || !std::isfinite(rssi)) throw LocateError("path-loss fit: distances must be positive");
        sx += std::log10(d);
        sy += rssi;
    }
    const double n = static_cast<double>(dr.size());
    const double mx = sx / n, my = sy / n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [d, rssi] : dr) {
        const double x = std::log10(d) - mx;
        sxx += x * x;
        sxy += x * (rssi - my);
    }
    if (sxx <= 1e-18 * n) throw LocateError("path-loss fit needs at least 2 distinct distances");
    const double slope = sxy / sxx;
    PathLossFit fit;
    fit.exponent_n = -slope / 10.0;
    fit.intercept_a = my - slope * mx;
    fit.count = dr.size();
    double ss = 0.0;
    for (const auto& [d, rssi] : dr) {
        const double e = rssi - (fit.intercept_a + slope * std::log10(d));
        ss += e * e;
    }
    fit.rms_db = std::sqrt(ss / n);
    return fit;
}

}  // namespace crowdsdr::locate
