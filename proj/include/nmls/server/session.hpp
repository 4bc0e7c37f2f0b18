#pragma once

#include "nmls/geometry.hpp"
#include "nmls/mls.hpp"
#include "nmls/neural.hpp"
#include "nmls/weighting.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace nmls::server {

enum class WeightMethod { neural, euclidean };

WeightMethod parse_weight_method(std::string_view name);

/// Parameters a client may change between requests.
struct DeformSettings {
    WeightMethod method = WeightMethod::neural;
    DeformMode mode = DeformMode::rigid;
    double temperature = 1.0;
    double alpha = 1.0;
    double epsilon = 0.0;

    void validate() const;
};

/// Per-request overrides; unset fields keep the session's current value.
struct SettingsOverride {
    std::optional<WeightMethod> method;
    std::optional<DeformMode> mode;
    std::optional<double> temperature;
    std::optional<double> alpha;
    std::optional<double> epsilon;

    DeformSettings applied_to(DeformSettings base) const;
};

struct DeformRequest {
    /// Absolute target positions in the source frame.
    std::vector<Point3> targets;
    SettingsOverride settings;
};

struct DeformResponse {
    /// Deformed vertices in the source frame.
    std::vector<Point3> vertices;
};

enum class WeightSite { vertices, control_points, grid };

struct WeightsRequest {
    WeightSite at = WeightSite::vertices;
    /// Grid bounds in the source frame; used when at == grid.
    GridSpec grid;
    SettingsOverride settings;
};

struct WeightsResponse {
    WeightSite at = WeightSite::vertices;
    std::vector<WeightVector> weights;
};

/// One interactive editing session: a shape, its control points and a frozen
/// weighting network. Deformation requests on one session are serialized.
class Session {
public:
    /// Throws ValidationError when the model's output size differs from the
    /// control-point count. The model may be null, in which case only the
    /// euclidean method is available.
    Session(std::string id, Shape shape, const ControlPointConfig& control_points,
            std::shared_ptr<const MlpParams> model, unsigned deform_threads = 0);

    const std::string& id() const noexcept { return id_; }
    const Shape& source_shape() const noexcept { return source_; }
    const ControlPointConfig& source_control_points() const noexcept { return source_cps_; }
    const NormalizationTransform& transform() const noexcept { return transform_; }
    std::shared_ptr<const MlpParams> model() const noexcept { return model_; }

    DeformSettings settings() const;
    DisplacementSet last_displacements() const;

    /// Runs the deformation with the request's overrides, which then become the
    /// session's current settings. On error the session state is unchanged.
    DeformResponse deform(const DeformRequest& request);

    WeightsResponse weights(const WeightsRequest& request) const;

private:
    std::unique_ptr<WeightField> make_field(const DeformSettings& settings) const;

    std::string id_;
    Shape source_;
    ControlPointConfig source_cps_;
    NormalizationTransform transform_;
    std::vector<Point3> normalized_vertices_;
    ControlPointConfig normalized_cps_;
    std::shared_ptr<const MlpParams> model_;
    unsigned deform_threads_;

    mutable std::mutex mutex_;
    DeformSettings settings_;
    DisplacementSet last_;
};

/// Thread-safe id -> session map.
class SessionRegistry {
public:
    std::shared_ptr<Session> create(Shape shape, const ControlPointConfig& cps,
                                    std::shared_ptr<const MlpParams> model,
                                    unsigned deform_threads = 0);
    std::shared_ptr<Session> find(const std::string& id) const;
    std::size_t size() const;

private:
    std::string next_id();

    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t counter_ = 0;
    std::uint64_t salt_ = 0;
};

} // namespace nmls::server
