#pragma once

#include "nmls/server/session.hpp"

#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace nmls::server {

/// Little-endian u32 vertex count followed by 3 * count little-endian f32 coordinates.
std::string encode_positions(std::span<const Point3> positions);

/// Inverse of encode_positions. Throws ParseError on a malformed frame.
std::vector<Point3> decode_positions(std::string_view frame);

using ClientMessage = std::variant<DeformRequest, WeightsRequest>;

/// Parses a WebSocket text frame:
///   {"type":"deform","targets":[[x,y,z],...],"method":..,"mode":..,"temperature":..,"alpha":..,"epsilon":..}
///   {"type":"weights","at":"vertices"|"control_points"|"grid","grid":{...}}
/// Throws ParseError or ValidationError.
ClientMessage parse_client_message(std::string_view text);

std::string weights_to_json(const WeightsResponse& response);
std::string error_to_json(std::string_view message);

/// {"status":"ok","version":...}
std::string health_json();

} // namespace nmls::server
