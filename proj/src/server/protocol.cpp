#include "nmls/server/protocol.hpp"

#include "nmls/errors.hpp"
#include "nmls/version.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>

namespace nmls::server {

namespace {

void put_u32(std::string& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view in, std::size_t offset)
{
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    }
    return v;
}

std::optional<double> optional_real(const nlohmann::json& doc, const char* key)
{
    if (!doc.contains(key) || doc[key].is_null()) return std::nullopt;
    if (!doc[key].is_number()) throw ValidationError(std::string("\"") + key + "\" must be a number");
    return doc[key].get<double>();
}

std::optional<std::string> optional_string(const nlohmann::json& doc, const char* key)
{
    if (!doc.contains(key) || doc[key].is_null()) return std::nullopt;
    if (!doc[key].is_string()) throw ValidationError(std::string("\"") + key + "\" must be a string");
    return doc[key].get<std::string>();
}

Point3 read_point(const nlohmann::json& item)
{
    if (!item.is_array() || item.size() != 3) throw ValidationError("points must be [x, y, z]");
    Point3 p;
    for (int c = 0; c < 3; ++c) {
        if (!item[c].is_number()) throw ValidationError("coordinates must be numbers");
        p[c] = item[c].get<double>();
    }
    return p;
}

SettingsOverride read_overrides(const nlohmann::json& doc)
{
    SettingsOverride s;
    if (auto m = optional_string(doc, "method")) s.method = parse_weight_method(*m);
    if (auto m = optional_string(doc, "mode")) s.mode = parse_deform_mode(*m);
    s.temperature = optional_real(doc, "temperature");
    s.alpha = optional_real(doc, "alpha");
    s.epsilon = optional_real(doc, "epsilon");
    // Range checks against defaults; the session re-validates the merged settings.
    s.applied_to(DeformSettings{});
    return s;
}

GridSpec read_grid(const nlohmann::json& doc)
{
    if (!doc.is_object()) throw ValidationError("\"grid\" must be an object");
    GridSpec grid;
    if (doc.contains("min")) grid.min = read_point(doc["min"]);
    if (doc.contains("max")) grid.max = read_point(doc["max"]);
    if (!doc.contains("counts") || !doc["counts"].is_array() || doc["counts"].size() != 3) {
        throw ValidationError("\"grid.counts\" must be [nx, ny, nz]");
    }
    for (int c = 0; c < 3; ++c) {
        if (!doc["counts"][c].is_number_integer()) throw ValidationError("grid counts must be integers");
        grid.counts[c] = doc["counts"][c].get<int>();
    }
    grid.validate();
    return grid;
}

} // namespace

std::string encode_positions(std::span<const Point3> positions)
{
    std::string out;
    out.reserve(4 + 12 * positions.size());
    put_u32(out, static_cast<std::uint32_t>(positions.size()));
    for (const auto& p : positions) {
        for (int c = 0; c < 3; ++c) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(p[c])));
    }
    return out;
}

std::vector<Point3> decode_positions(std::string_view frame)
{
    if (frame.size() < 4) throw ParseError("position frame shorter than its header");
    const std::uint32_t count = get_u32(frame, 0);
    if (frame.size() != 4 + 12 * static_cast<std::size_t>(count)) {
        throw ParseError("position frame length does not match its vertex count");
    }
    std::vector<Point3> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        for (int c = 0; c < 3; ++c) {
            out[i][c] = std::bit_cast<float>(get_u32(frame, 4 + 12 * i + 4 * static_cast<std::size_t>(c)));
        }
    }
    return out;
}

ClientMessage parse_client_message(std::string_view text)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what());
    }
    if (!doc.is_object()) throw ValidationError("message must be a JSON object");
    const auto type = optional_string(doc, "type");
    if (!type) throw ValidationError("message has no \"type\"");

    if (*type == "deform") {
        if (!doc.contains("targets") || !doc["targets"].is_array()) {
            throw ValidationError("deform message needs a \"targets\" array");
        }
        DeformRequest req;
        for (const auto& item : doc["targets"]) req.targets.push_back(read_point(item));
        req.settings = read_overrides(doc);
        return req;
    }
    if (*type == "weights") {
        WeightsRequest req;
        const std::string at = optional_string(doc, "at").value_or("vertices");
        if (at == "vertices") {
            req.at = WeightSite::vertices;
        } else if (at == "control_points") {
            req.at = WeightSite::control_points;
        } else if (at == "grid") {
            req.at = WeightSite::grid;
            if (!doc.contains("grid")) throw ValidationError("weights at grid needs a \"grid\"");
            req.grid = read_grid(doc["grid"]);
        } else {
            throw ValidationError("unknown weights site '" + at + "'");
        }
        req.settings = read_overrides(doc);
        return req;
    }
    throw ValidationError("unknown message type '" + *type + "'");
}

std::string weights_to_json(const WeightsResponse& response)
{
    static constexpr const char* sites[] = {"vertices", "control_points", "grid"};
    nlohmann::json weights = nlohmann::json::array();
    for (const auto& w : response.weights) {
        weights.push_back(std::vector<double>(w.values.data(), w.values.data() + w.values.size()));
    }
    nlohmann::json doc{{"type", "weights"},
                       {"at", sites[static_cast<int>(response.at)]},
                       {"count", response.weights.size()},
                       {"weights", std::move(weights)}};
    return doc.dump();
}

std::string error_to_json(std::string_view message)
{
    return nlohmann::json{{"type", "error"}, {"message", std::string(message)}}.dump();
}

std::string health_json()
{
    return nlohmann::json{{"status", "ok"}, {"version", kVersion}}.dump();
}

} // namespace nmls::server
