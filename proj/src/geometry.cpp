#include "nmls/geometry.hpp"

#include "nmls/errors.hpp"
#include "nmls/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace nmls {

namespace {

bool is_finite(const Point3& p)
{
    return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

std::string lowercase(std::string_view s)
{
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::vector<std::string_view> split_ws(std::string_view line)
{
    std::vector<std::string_view> tokens;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) tokens.push_back(line.substr(i, j - i));
        i = j;
    }
    return tokens;
}

double parse_real(std::string_view token, std::size_t line)
{
    double value = 0.0;
    const char* first = token.data();
    const char* last = token.data() + token.size();
    if (!token.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
        throw ParseError("invalid number '" + std::string(token) + "'", line);
    }
    if (!std::isfinite(value)) {
        throw ParseError("non-finite coordinate '" + std::string(token) + "'", line);
    }
    return value;
}

long parse_index(std::string_view token, std::size_t line)
{
    // Keep only the vertex part of "v/vt/vn".
    token = token.substr(0, token.find('/'));
    long value = 0;
    auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc{} || ptr != token.data() + token.size() || value == 0) {
        throw ParseError("invalid face index '" + std::string(token) + "'", line);
    }
    return value;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn)
{
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        ++line_no;
        fn(line, line_no);
        if (end == text.size()) break;
        pos = end + 1;
    }
}

Shape parse_obj(std::string_view text)
{
    Shape shape;
    struct PendingFace {
        std::vector<long> indices;
        std::size_t line;
    };
    std::vector<PendingFace> pending;

    for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        line = line.substr(0, line.find('#'));
        auto tokens = split_ws(line);
        if (tokens.empty()) return;
        if (tokens[0] == "v") {
            if (tokens.size() < 4) throw ParseError("vertex record needs 3 coordinates", line_no);
            shape.vertices.emplace_back(parse_real(tokens[1], line_no),
                                        parse_real(tokens[2], line_no),
                                        parse_real(tokens[3], line_no));
        } else if (tokens[0] == "f") {
            if (tokens.size() < 4) throw ParseError("face record needs at least 3 indices", line_no);
            PendingFace face{{}, line_no};
            for (std::size_t k = 1; k < tokens.size(); ++k) {
                long idx = parse_index(tokens[k], line_no);
                // Negative indices are relative to the vertices read so far.
                if (idx < 0) idx = static_cast<long>(shape.vertices.size()) + idx + 1;
                face.indices.push_back(idx);
            }
            pending.push_back(std::move(face));
        }
    });

    const long n = static_cast<long>(shape.vertices.size());
    for (const auto& face : pending) {
        for (long idx : face.indices) {
            if (idx < 1 || idx > n) {
                throw ParseError("face index " + std::to_string(idx) + " out of range (" +
                                     std::to_string(n) + " vertices)",
                                 face.line);
            }
        }
        for (std::size_t k = 1; k + 1 < face.indices.size(); ++k) {
            shape.faces.push_back({static_cast<int>(face.indices[0] - 1),
                                   static_cast<int>(face.indices[k] - 1),
                                   static_cast<int>(face.indices[k + 1] - 1)});
        }
    }
    return shape;
}

Shape parse_xyz(std::string_view text)
{
    Shape shape;
    for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        line = line.substr(0, line.find('#'));
        auto tokens = split_ws(line);
        if (tokens.empty()) return;
        if (tokens.size() != 3) throw ParseError("expected 'x y z'", line_no);
        shape.vertices.emplace_back(parse_real(tokens[0], line_no), parse_real(tokens[1], line_no),
                                    parse_real(tokens[2], line_no));
    });
    return shape;
}

void append_real(std::string& out, double v)
{
    char buf[32];
    int n = std::snprintf(buf, sizeof buf, "%.9g", v);
    out.append(buf, static_cast<std::size_t>(n));
}

std::vector<Point3> parse_point_array(const nlohmann::json& doc, const char* key)
{
    if (!doc.is_object() || !doc.contains(key) || !doc[key].is_array()) {
        throw ParseError(std::string("expected an object with a \"") + key + "\" array");
    }
    std::vector<Point3> points;
    for (const auto& item : doc[key]) {
        if (!item.is_array() || item.size() != 3) {
            throw ParseError(std::string("each entry of \"") + key + "\" must be [x, y, z]");
        }
        Point3 p;
        for (int c = 0; c < 3; ++c) {
            if (!item[c].is_number()) throw ParseError("coordinates must be numbers");
            p[c] = item[c].get<double>();
        }
        if (!is_finite(p)) throw ValidationError("non-finite coordinate");
        points.push_back(p);
    }
    return points;
}

nlohmann::json parse_json(std::string_view text)
{
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what());
    }
}

nlohmann::json points_to_json(std::span<const Point3> points)
{
    auto arr = nlohmann::json::array();
    for (const auto& p : points) arr.push_back({p.x(), p.y(), p.z()});
    return arr;
}

} // namespace

ShapeFormat parse_shape_format(std::string_view name)
{
    const auto lower = lowercase(name);
    if (lower == "obj") return ShapeFormat::obj;
    if (lower == "xyz") return ShapeFormat::xyz;
    throw ValidationError("unknown shape format '" + std::string(name) + "'");
}

ShapeFormat shape_format_from_path(std::string_view path)
{
    const auto dot = path.rfind('.');
    if (dot == std::string_view::npos) {
        throw ValidationError("cannot infer shape format from '" + std::string(path) + "'");
    }
    return parse_shape_format(path.substr(dot + 1));
}

void validate_shape(const Shape& shape)
{
    const int n = static_cast<int>(shape.vertices.size());
    for (const auto& v : shape.vertices) {
        if (!is_finite(v)) throw ValidationError("shape has a non-finite vertex");
    }
    for (const auto& f : shape.faces) {
        for (int idx : f) {
            if (idx < 0 || idx >= n) throw ValidationError("face index out of range");
        }
    }
}

ControlPointConfig::ControlPointConfig(std::vector<Point3> points) : points_(std::move(points))
{
    if (points_.empty()) throw ValidationError("at least one control point is required");
    for (const auto& p : points_) {
        if (!is_finite(p)) throw ValidationError("control point has a non-finite coordinate");
    }
    for (std::size_t i = 0; i < points_.size(); ++i) {
        for (std::size_t j = i + 1; j < points_.size(); ++j) {
            if (points_[i] == points_[j]) {
                throw ValidationError("duplicate control points " + std::to_string(i) + " and " +
                                      std::to_string(j));
            }
        }
    }
}

double ControlPointConfig::min_pairwise_distance() const noexcept
{
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points_.size(); ++i) {
        for (std::size_t j = i + 1; j < points_.size(); ++j) {
            best = std::min(best, (points_[i] - points_[j]).norm());
        }
    }
    return best;
}

DisplacementSet::DisplacementSet(const ControlPointConfig& cps, std::vector<Point3> targets)
    : targets_(std::move(targets))
{
    if (targets_.size() != cps.size()) {
        throw ValidationError("expected " + std::to_string(cps.size()) + " targets, got " +
                              std::to_string(targets_.size()));
    }
    for (const auto& q : targets_) {
        if (!is_finite(q)) throw ValidationError("target has a non-finite coordinate");
    }
}

DisplacementSet DisplacementSet::identity(const ControlPointConfig& cps)
{
    return DisplacementSet(cps, {cps.points().begin(), cps.points().end()});
}

ControlPointConfig random_control_points(std::uint64_t seed, std::size_t count,
                                         double min_distance, double extent)
{
    Xoshiro256 rng(seed);
    std::vector<Point3> points;
    std::size_t attempts = 0;
    while (points.size() < count) {
        if (++attempts > 1000 * (count + 1)) {
            throw ValidationError("cannot place " + std::to_string(count) +
                                  " points with the requested spacing");
        }
        const Point3 p(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                       rng.uniform(-extent, extent));
        const bool far_enough = std::all_of(points.begin(), points.end(), [&](const Point3& q) {
            return (p - q).norm() >= min_distance;
        });
        if (far_enough) points.push_back(p);
    }
    return ControlPointConfig(std::move(points));
}

NormalizationTransform normalization_for(const Shape& shape)
{
    if (shape.vertices.empty()) throw ValidationError("cannot normalize an empty shape");
    Point3 lo = shape.vertices.front();
    Point3 hi = lo;
    for (const auto& v : shape.vertices) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    const double scale = 0.5 * (hi - lo).maxCoeff();
    if (!(scale > 0.0)) {
        throw DegenerateError("degenerate shape: all vertices coincide");
    }
    return {0.5 * (lo + hi), scale};
}

std::vector<Point3> apply_normalization(std::span<const Point3> points,
                                        const NormalizationTransform& t)
{
    std::vector<Point3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(t.apply(p));
    return out;
}

std::vector<Point3> denormalize_points(std::span<const Point3> points,
                                       const NormalizationTransform& t)
{
    if (!(t.scale > 0.0)) throw ValidationError("normalization scale must be positive");
    std::vector<Point3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(t.invert(p));
    return out;
}

NormalizedInputs normalize_shape(const Shape& shape, const ControlPointConfig& cps)
{
    const auto t = normalization_for(shape);
    Shape normalized = shape;
    normalized.vertices = apply_normalization(shape.vertices, t);
    return {std::move(normalized), ControlPointConfig(apply_normalization(cps.points(), t)), t};
}

Shape load_shape(std::string_view text, ShapeFormat format)
{
    return format == ShapeFormat::obj ? parse_obj(text) : parse_xyz(text);
}

std::string save_shape(const Shape& shape, ShapeFormat format)
{
    std::string out;
    out.reserve(shape.vertices.size() * 40 + shape.faces.size() * 24);
    const char* prefix = format == ShapeFormat::obj ? "v " : "";
    for (const auto& v : shape.vertices) {
        out += prefix;
        append_real(out, v.x());
        out += ' ';
        append_real(out, v.y());
        out += ' ';
        append_real(out, v.z());
        out += '\n';
    }
    if (format == ShapeFormat::obj) {
        for (const auto& f : shape.faces) {
            out += "f " + std::to_string(f[0] + 1) + ' ' + std::to_string(f[1] + 1) + ' ' +
                   std::to_string(f[2] + 1) + '\n';
        }
    }
    return out;
}

ControlPointConfig load_control_points(std::string_view json_text)
{
    return ControlPointConfig(parse_point_array(parse_json(json_text), "points"));
}

DisplacementSet load_displacements(std::string_view json_text, const ControlPointConfig& cps)
{
    return DisplacementSet(cps, parse_point_array(parse_json(json_text), "targets"));
}

std::string save_control_points(std::span<const Point3> points)
{
    return nlohmann::json{{"points", points_to_json(points)}}.dump();
}

std::string save_displacements(const DisplacementSet& disp)
{
    return nlohmann::json{{"targets", points_to_json(disp.targets())}}.dump();
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view contents)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

} // namespace nmls
