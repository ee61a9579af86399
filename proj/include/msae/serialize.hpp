#pragma once

// JSON schemas shared by the CLI, the service and checkpoint headers.

#include "msae/apps.hpp"
#include "msae/concepts.hpp"
#include "msae/embedset.hpp"
#include "msae/metrics.hpp"
#include "msae/sae.hpp"
#include "msae/trainer.hpp"

#include <json.hpp>

namespace msae {

using Json = nlohmann::json;

Json vector_to_json(const Vector& v);
Vector vector_from_json(const Json& j);

void to_json(Json& j, const NormStats& stats);
void from_json(const Json& j, NormStats& stats);

void to_json(Json& j, const SaeConfig& config);
void from_json(const Json& j, SaeConfig& config);

void to_json(Json& j, const Provenance& provenance);
void from_json(const Json& j, Provenance& provenance);

void to_json(Json& j, const EpochRecord& record);

// Keys: l0 fvu evr cs cknna do ndn lp_kl lp_acc, plus *_std spreads.
void to_json(Json& j, const MetricsReport& report);

void to_json(Json& j, const RecoveryPoint& point);
void to_json(Json& j, const ActivationHistogram& histogram);

// {"weights": [[...]], "bias": [...]} or the binary form {"w": [...], "b": x}.
void to_json(Json& j, const ProbeModel& probe);
void from_json(const Json& j, ProbeModel& probe);

void to_json(Json& j, const ConceptAssignment& a);
void from_json(const Json& j, ConceptAssignment& a);
void to_json(Json& j, const ValidationSummary& summary);

void to_json(Json& j, const SearchHit& hit);
void to_json(Json& j, const NamedActivation& a);
void to_json(Json& j, const MatchExplanation& m);
void to_json(Json& j, const BiasSweep& sweep);
void to_json(Json& j, const DistributionSummary& s);
void to_json(Json& j, const AssociationStats& s);

} // namespace msae
