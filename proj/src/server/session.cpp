#include "nmls/server/session.hpp"

#include "nmls/errors.hpp"

#include <cmath>
#include <cstdio>
#include <random>

namespace nmls::server {

WeightMethod parse_weight_method(std::string_view name)
{
    if (name == "neural") return WeightMethod::neural;
    if (name == "euclidean") return WeightMethod::euclidean;
    throw ValidationError("unknown weighting method '" + std::string(name) + "'");
}

void DeformSettings::validate() const
{
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError("temperature must be > 0");
    }
    EuclideanWeightParams{alpha, epsilon}.validate();
}

DeformSettings SettingsOverride::applied_to(DeformSettings base) const
{
    if (method) base.method = *method;
    if (mode) base.mode = *mode;
    if (temperature) base.temperature = *temperature;
    if (alpha) base.alpha = *alpha;
    if (epsilon) base.epsilon = *epsilon;
    base.validate();
    return base;
}

Session::Session(std::string id, Shape shape, const ControlPointConfig& control_points,
                 std::shared_ptr<const MlpParams> model, unsigned deform_threads)
    : id_(std::move(id)),
      source_(std::move(shape)),
      source_cps_(control_points),
      transform_(normalization_for(source_)),
      normalized_vertices_(apply_normalization(source_.vertices, transform_)),
      normalized_cps_(apply_normalization(source_cps_.points(), transform_)),
      model_(std::move(model)),
      deform_threads_(deform_threads),
      last_(DisplacementSet::identity(source_cps_))
{
    validate_shape(source_);
    if (model_ && static_cast<std::size_t>(model_->output_size()) != source_cps_.size()) {
        throw ValidationError("model was trained for " + std::to_string(model_->output_size()) +
                              " control points but the session has " +
                              std::to_string(source_cps_.size()));
    }
    if (!model_) settings_.method = WeightMethod::euclidean;
}

DeformSettings Session::settings() const
{
    std::lock_guard lock(mutex_);
    return settings_;
}

DisplacementSet Session::last_displacements() const
{
    std::lock_guard lock(mutex_);
    return last_;
}

std::unique_ptr<WeightField> Session::make_field(const DeformSettings& settings) const
{
    if (settings.method == WeightMethod::neural) {
        if (!model_) throw ValidationError("this session has no neural model");
        return std::make_unique<NeuralField>(NeuralWeightParams{model_, settings.temperature});
    }
    return std::make_unique<EuclideanField>(normalized_cps_,
                                            EuclideanWeightParams{settings.alpha, settings.epsilon});
}

DeformResponse Session::deform(const DeformRequest& request)
{
    std::lock_guard lock(mutex_);
    const DeformSettings next = request.settings.applied_to(settings_);
    DisplacementSet targets(source_cps_, request.targets);
    const DisplacementSet normalized(normalized_cps_,
                                     apply_normalization(targets.targets(), transform_));
    const auto field = make_field(next);
    const auto deformed = deform_points(normalized_vertices_, normalized_cps_, normalized, *field,
                                       {next.mode, deform_threads_});
    settings_ = next;
    last_ = std::move(targets);
    return {denormalize_points(deformed, transform_)};
}

WeightsResponse Session::weights(const WeightsRequest& request) const
{
    std::lock_guard lock(mutex_);
    const DeformSettings current = request.settings.applied_to(settings_);
    const auto field = make_field(current);
    WeightsResponse response{request.at, {}};
    switch (request.at) {
    case WeightSite::vertices:
        response.weights = field->at_many(normalized_vertices_);
        break;
    case WeightSite::control_points:
        response.weights = field->at_many(normalized_cps_.points());
        break;
    case WeightSite::grid:
        response.weights = field->at_many(apply_normalization(request.grid.points(), transform_));
        break;
    }
    return response;
}

std::shared_ptr<Session> SessionRegistry::create(Shape shape, const ControlPointConfig& cps,
                                                 std::shared_ptr<const MlpParams> model,
                                                 unsigned deform_threads)
{
    std::string id;
    {
        std::lock_guard lock(mutex_);
        id = next_id();
    }
    auto session =
        std::make_shared<Session>(id, std::move(shape), cps, std::move(model), deform_threads);
    std::lock_guard lock(mutex_);
    sessions_.emplace(id, session);
    return session;
}

std::shared_ptr<Session> SessionRegistry::find(const std::string& id) const
{
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

std::size_t SessionRegistry::size() const
{
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::string SessionRegistry::next_id()
{
    if (salt_ == 0) salt_ = (static_cast<std::uint64_t>(std::random_device{}()) << 32) | 1u;
    ++counter_;
    std::uint64_t z = salt_ + counter_ * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(z));
    return buf;
}

} // namespace nmls::server
