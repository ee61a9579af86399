#include "msae/service.hpp"

#include "msae/error.hpp"
#include "msae/serialize.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace msae {

namespace {

constexpr Index kDefaultTop = 8;
constexpr Index kDefaultSearchT = 10;

class BadRequest : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

class MethodNotAllowed : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

ServiceReply json_reply(int status, const Json& body) { return {status, body.dump(), "application/json", {}}; }

ServiceReply error_reply(int status, const std::string& message) {
    return json_reply(status, Json{{"error", {{"status", status}, {"message", message}}}});
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(path);
    while (std::getline(in, part, '/'))
        if (!part.empty()) parts.push_back(part);
    return parts;
}

bool parse_bool(const std::string& text, const char* name) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw BadRequest(std::string("query parameter '") + name + "' must be true or false");
}

Index parse_count(const std::string& text, const char* name) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used == text.size() && v >= 0) return static_cast<Index>(v);
    } catch (const std::exception&) {
    }
    throw BadRequest(std::string("query parameter '") + name + "' must be a non-negative integer");
}

Json parse_body(const std::string& body) {
    Json j;
    try {
        j = Json::parse(body);
    } catch (const Json::parse_error& e) {
        throw BadRequest(std::string("malformed JSON body: ") + e.what());
    }
    if (!j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
}

Index body_count(const Json& body, const char* key, Index fallback) {
    if (!body.contains(key)) return fallback;
    const auto& v = body.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw BadRequest(std::string("'") + key + "' must be a non-negative integer");
    return v.get<Index>();
}

std::string id_string(const Json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    throw BadRequest("sample ids must be strings or integers");
}

Vector body_vector(const Json& v) {
    if (!v.is_array() || v.empty()) throw BadRequest("'vector' must be a non-empty array of numbers");
    Vector out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].is_number()) throw BadRequest("'vector' must contain only numbers");
        out[static_cast<Index>(i)] = v[i].get<double>();
    }
    if (!out.allFinite()) throw BadRequest("'vector' must be finite");
    return out;
}

std::vector<Edit> body_edits(const Json& body) {
    std::vector<Edit> edits;
    if (!body.contains("edits")) return edits;
    const auto& list = body.at("edits");
    if (!list.is_array()) throw BadRequest("'edits' must be an array");
    for (const auto& e : list) {
        if (!e.is_object() || !e.contains("neuron") || !e.contains("magnitude") || !e.at("neuron").is_number_integer() ||
            !e.at("magnitude").is_number())
            throw BadRequest("each edit needs an integer 'neuron' and a numeric 'magnitude'");
        edits.push_back({e.at("neuron").get<Index>(), e.at("magnitude").get<double>()});
    }
    return edits;
}

Json vector_json(const Vector& v) { return vector_to_json(v); }

} // namespace

int service_threads(int requested) {
    int threads = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("MSAE_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && cap > 0) threads = std::min<int>(threads, static_cast<int>(cap));
    }
    return std::max(threads, 1);
}

struct Service::Impl {
    httplib::Server server;
    bool bound = false;
    int port = 0;
};

namespace {

// Route handlers. Each takes the immutable state and returns a JSON body.
struct Routes {
    const ServiceState& s;

    Index sample_of(const Json& body) const {
        for (const char* key : {"query_id", "sample"})
            if (body.contains(key)) return s.index.find(id_string(body.at(key)));
        throw BadRequest("request needs 'query_id' (or 'sample') or 'vector'");
    }

    // Raw vector of the request subject: an indexed sample or an explicit vector.
    Vector subject_raw(const Json& body) const {
        if (body.contains("vector")) return body_vector(body.at("vector"));
        return s.index.raw.row(sample_of(body)).transpose();
    }

    Json health() const {
        const auto valid = std::count_if(s.assignments.begin(), s.assignments.end(), [](const auto& a) { return a.valid; });
        return {{"status", "ok"},
                {"model", s.checkpoint.config},
                {"modality", std::string(to_string(s.index.modality))},
                {"samples", s.index.size()},
                {"concepts", s.assignments.size()},
                {"valid_concepts", valid},
                {"classifier", s.classifier.has_value()}};
    }

    Json concepts(const ServiceRequest& req) const {
        bool valid_only = false;
        if (auto it = req.query.find("valid_only"); it != req.query.end()) valid_only = parse_bool(it->second, "valid_only");
        Json list = Json::array();
        for (const auto& a : s.assignments)
            if (!valid_only || a.valid) list.push_back(a);
        return {{"concepts", std::move(list)}};
    }

    Json sample_activations(const ServiceRequest& req, const std::string& id) const {
        Index top = kDefaultTop;
        if (auto it = req.query.find("top"); it != req.query.end()) top = parse_count(it->second, "top");
        const Index row = s.index.find(id);
        const Vector z = s.index.activations.row(row).transpose();
        return {{"id", s.index.ids[static_cast<std::size_t>(row)]},
                {"sample", row},
                {"active", (z.array() > 0.0).count()},
                {"activations", top_named_activations(z, s.assignments, top)}};
    }

    Json search_route(const Json& body) const {
        const SearchSpace space =
            body.contains("space") ? search_space_from_string(body.at("space").get<std::string>()) : SearchSpace::embedding;
        const Index t = body_count(body, "t", kDefaultSearchT);
        const auto edits = body_edits(body);
        Query query;
        if (!edits.empty()) {
            const auto m = manipulate(s.checkpoint, {subject_raw(body), s.index.modality, edits});
            query = {m.edited_raw, m.edited_activation};
        } else if (body.contains("vector")) {
            query = query_from_vector(s.checkpoint, s.index.modality, body_vector(body.at("vector")));
        } else {
            query = query_from_sample(s.index, sample_of(body));
        }
        return {{"space", std::string(to_string(space))}, {"t", t}, {"results", search(s.index, query, space, t)}};
    }

    Json manipulate_route(const Json& body) const {
        const Index top = body_count(body, "top", kDefaultTop);
        const auto r = manipulate(s.checkpoint, {subject_raw(body), s.index.modality, body_edits(body)});
        return {{"displacement", r.displacement},
                {"distance_to_input", r.distance_to_input},
                {"edited_vector", vector_json(r.edited_raw)},
                {"plain_reconstruction", vector_json(r.plain_recon_raw)},
                {"top_original", top_named_activations(r.original_activation, s.assignments, top)},
                {"top_edited", top_named_activations(r.edited_activation, s.assignments, top)}};
    }

    Json sweep_route(const Json& body) const {
        if (!body.contains("neuron") || !body.at("neuron").is_number_integer())
            throw BadRequest("'neuron' must be an integer");
        if (!body.contains("magnitudes") || !body.at("magnitudes").is_array())
            throw BadRequest("'magnitudes' must be an array of numbers");
        std::vector<double> grid;
        for (const auto& v : body.at("magnitudes")) {
            if (!v.is_number()) throw BadRequest("'magnitudes' must be an array of numbers");
            grid.push_back(v.get<double>());
        }

        ProbeModel classifier;
        if (body.contains("classifier")) {
            try {
                classifier = body.at("classifier").get<ProbeModel>();
            } catch (const Json::exception& e) {
                throw BadRequest(std::string("malformed classifier: ") + e.what());
            }
        } else if (s.classifier) {
            classifier = *s.classifier;
        } else {
            throw BadRequest("no classifier loaded; pass one in the request");
        }

        std::vector<Index> rows;
        Matrix inputs;
        if (body.contains("samples")) {
            if (!body.at("samples").is_array() || body.at("samples").empty())
                throw BadRequest("'samples' must be a non-empty array of ids");
            for (const auto& id : body.at("samples")) rows.push_back(s.index.find(id_string(id)));
            inputs.resize(static_cast<Index>(rows.size()), s.index.raw.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) inputs.row(static_cast<Index>(i)) = s.index.raw.row(rows[i]);
        } else {
            const Vector raw = subject_raw(body);
            if (!body.contains("vector")) rows.push_back(sample_of(body));
            inputs = raw.transpose();
        }
        const int target = body.contains("target_class") ? body.at("target_class").get<int>() : 1;
        Json out = bias_sweep(s.checkpoint, classifier, inputs, s.index.modality, body.at("neuron").get<Index>(), grid, target);
        Json ids = Json::array();
        for (Index r : rows) ids.push_back(s.index.ids[static_cast<std::size_t>(r)]);
        out["samples"] = std::move(ids);
        return out;
    }
};

} // namespace

Service::Service(std::shared_ptr<const ServiceState> state, ServiceOptions options)
    : state_(std::move(state)), options_(std::move(options)), impl_(std::make_unique<Impl>()) {
    if (!state_) throw InvalidArgument("service needs a state");
    auto& server = impl_->server;
    const int threads = service_threads(options_.threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };

    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
        ServiceRequest r{req.method, req.path, {}, req.body, req.get_header_value("Origin")};
        for (const auto& [k, v] : req.params) r.query[k] = v;
        const ServiceReply reply = dispatch(r);
        res.status = reply.status;
        for (const auto& [k, v] : reply.headers) res.set_header(k, v);
        if (!reply.body.empty()) res.set_content(reply.body, reply.content_type);
    };
    server.Get(".*", forward);
    server.Post(".*", forward);
    server.Put(".*", forward);
    server.Delete(".*", forward);
    server.Patch(".*", forward);
    server.Options(".*", forward);
}

Service::~Service() { stop(); }

ServiceReply Service::dispatch(const ServiceRequest& request) const {
    ServiceReply reply;
    const bool cors_ok = !request.origin.empty() &&
                         std::any_of(options_.cors_origins.begin(), options_.cors_origins.end(),
                                     [&](const std::string& o) { return o == "*" || o == request.origin; });

    if (request.method == "OPTIONS") {
        reply = {204, "", "application/json", {}};
        if (cors_ok) {
            reply.headers["Access-Control-Allow-Methods"] = "GET, POST, OPTIONS";
            reply.headers["Access-Control-Allow-Headers"] = "Content-Type";
            reply.headers["Access-Control-Max-Age"] = "600";
        }
    } else {
        const Routes routes{*state_};
        const auto parts = split_path(request.path);
        const bool get = request.method == "GET";
        const bool post = request.method == "POST";
        auto expect = [&](bool ok) {
            if (!ok) throw MethodNotAllowed("method " + request.method + " not allowed on " + request.path);
        };
        try {
            if (parts.size() == 1 && parts[0] == "health") {
                expect(get);
                reply = json_reply(200, routes.health());
            } else if (parts.size() == 1 && parts[0] == "spec") {
                expect(get);
                reply = {200, openapi_document(), "application/json", {}};
            } else if (parts.size() == 1 && parts[0] == "concepts") {
                expect(get);
                reply = json_reply(200, routes.concepts(request));
            } else if (parts.size() == 3 && parts[0] == "samples" && parts[2] == "activations") {
                expect(get);
                reply = json_reply(200, routes.sample_activations(request, httplib::detail::decode_url(parts[1], false)));
            } else if (parts.size() == 1 && parts[0] == "search") {
                expect(post);
                reply = json_reply(200, routes.search_route(parse_body(request.body)));
            } else if (parts.size() == 1 && parts[0] == "manipulate") {
                expect(post);
                reply = json_reply(200, routes.manipulate_route(parse_body(request.body)));
            } else if (parts.size() == 1 && parts[0] == "sweep") {
                expect(post);
                reply = json_reply(200, routes.sweep_route(parse_body(request.body)));
            } else {
                reply = error_reply(404, "no route for " + request.path);
            }
        } catch (const MethodNotAllowed& e) {
            reply = error_reply(405, e.what());
        } catch (const NotFound& e) {
            reply = error_reply(404, e.what());
        } catch (const DimensionMismatch& e) {
            reply = error_reply(422, e.what());
        } catch (const FormatError& e) {
            reply = error_reply(422, e.what());
        } catch (const InvalidArgument& e) {
            reply = error_reply(400, e.what());
        } catch (const Json::exception& e) {
            reply = error_reply(400, std::string("malformed request: ") + e.what());
        } catch (const std::exception& e) {
            reply = error_reply(500, e.what());
        }
    }
    if (cors_ok) {
        reply.headers["Access-Control-Allow-Origin"] = request.origin;
        reply.headers["Vary"] = "Origin";
    }
    return reply;
}

int Service::bind() {
    if (impl_->bound) return impl_->port;
    auto& server = impl_->server;
    if (options_.port == 0) {
        impl_->port = server.bind_to_any_port(options_.host);
    } else {
        impl_->port = server.bind_to_port(options_.host, options_.port) ? options_.port : -1;
    }
    if (impl_->port < 0)
        throw Error(ErrorKind::usage, "cannot bind " + options_.host + ":" + std::to_string(options_.port));
    impl_->bound = true;
    return impl_->port;
}

void Service::run() {
    bind();
    impl_->server.listen_after_bind();
}

void Service::stop() {
    if (impl_) impl_->server.stop();
}

std::string openapi_document() {
    const Json error_ref = {{"$ref", "#/components/schemas/Error"}};
    auto responses = [&](const std::string& what) {
        return Json{{"200", {{"description", what}}},
                    {"400", {{"description", "malformed request"}, {"content", {{"application/json", {{"schema", error_ref}}}}}}},
                    {"404", {{"description", "unknown sample id or neuron"}}},
                    {"422", {{"description", "dimension mismatch"}}},
                    {"500", {{"description", "numeric failure"}}}};
    };
    auto body = [](const Json& properties) {
        return Json{{"required", true},
                    {"content", {{"application/json", {{"schema", {{"type", "object"}, {"properties", properties}}}}}}}};
    };
    const Json id = {{"oneOf", Json::array({{{"type", "string"}}, {{"type", "integer"}}})}};
    const Json vec = {{"type", "array"}, {"items", {{"type", "number"}}}};
    Json edit_item = {{"type", "object"}};
    edit_item["properties"] = {{"neuron", {{"type", "integer"}}}, {"magnitude", {{"type", "number"}, {"minimum", 0}}}};
    const Json edits = {{"type", "array"}, {"items", edit_item}};

    Json doc = {
        {"openapi", "3.0.3"},
        {"info", {{"title", "msae service"}, {"version", "1.0.0"}}},
        {"paths",
         {{"/health", {{"get", {{"summary", "Liveness and model summary"}, {"responses", responses("status")}}}}},
          {"/spec", {{"get", {{"summary", "This document"}, {"responses", responses("OpenAPI JSON")}}}}},
          {"/concepts",
           {{"get",
             {{"summary", "Concept assignments"},
              {"parameters", Json::array({{{"name", "valid_only"}, {"in", "query"}, {"schema", {{"type", "boolean"}}}}})},
              {"responses", responses("assignment list")}}}}},
          {"/samples/{id}/activations",
           {{"get",
             {{"summary", "Top named activations of an indexed sample"},
              {"parameters",
               Json::array({{{"name", "id"}, {"in", "path"}, {"required", true}, {"schema", {{"type", "string"}}}},
                            {{"name", "top"}, {"in", "query"}, {"schema", {{"type", "integer"}, {"minimum", 0}}}}})},
              {"responses", responses("named activations")}}}}},
          {"/search",
           {{"post",
             {{"summary", "Similarity search in embedding (cosine) or activation (L1) space"},
              {"requestBody", body({{"query_id", id},
                                    {"vector", vec},
                                    {"edits", edits},
                                    {"space", {{"type", "string"}, {"enum", {"embedding", "activation"}}}},
                                    {"t", {{"type", "integer"}, {"minimum", 0}}}})},
              {"responses", responses("ranked results")}}}}},
          {"/manipulate",
           {{"post",
             {{"summary", "Set concept magnitudes and decode back to embedding space"},
              {"requestBody", body({{"sample", id}, {"query_id", id}, {"vector", vec}, {"edits", edits}, {"top", {{"type", "integer"}}}})},
              {"responses", responses("edited vector summary")}}}}},
          {"/sweep",
           {{"post",
             {{"summary", "Classifier probability across a magnitude grid"},
              {"requestBody", body({{"neuron", {{"type", "integer"}}},
                                    {"magnitudes", vec},
                                    {"sample", id},
                                    {"samples", {{"type", "array"}, {"items", id}}},
                                    {"vector", vec},
                                    {"target_class", {{"type", "integer"}}},
                                    {"classifier", {{"type", "object"}}}})},
              {"responses", responses("probability curves")}}}}}}}
    };
    Json error_schema = {{"type", "object"}};
    error_schema["properties"]["error"] = {{"type", "object"}};
    error_schema["properties"]["error"]["properties"] = {{"status", {{"type", "integer"}}}, {"message", {{"type", "string"}}}};
    doc["components"]["schemas"]["Error"] = error_schema;
    return doc.dump(2);
}

} // namespace msae
