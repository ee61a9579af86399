#pragma once

#include "msae/apps.hpp"
#include "msae/concepts.hpp"
#include "msae/metrics.hpp"
#include "msae/trainer.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace msae {

// Everything the HTTP layer reads. Built once, never mutated afterwards.
struct ServiceState {
    Checkpoint checkpoint;
    SearchIndex index;
    std::vector<ConceptAssignment> assignments;
    std::optional<ProbeModel> classifier;
};

struct ServiceOptions {
    std::string host = "127.0.0.1";
    int port = 8080; // 0 picks an ephemeral port
    std::vector<std::string> cors_origins; // "*" allows any origin
    int threads = 0;                       // 0 uses hardware concurrency, then MSAE_THREADS caps it
};

struct ServiceRequest {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
    std::string origin;
};

struct ServiceReply {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
    std::map<std::string, std::string> headers;
};

// Thread count for the request pool after applying MSAE_THREADS.
int service_threads(int requested);

class Service {
public:
    Service(std::shared_ptr<const ServiceState> state, ServiceOptions options = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Routing without a socket; the HTTP server forwards every request here.
    ServiceReply dispatch(const ServiceRequest& request) const;

    // Binds the listening socket and returns the bound port.
    int bind();
    // Serves until stop(); bind() is called first if needed.
    void run();
    void stop();

    const ServiceState& state() const { return *state_; }

private:
    struct Impl;
    std::shared_ptr<const ServiceState> state_;
    ServiceOptions options_;
    std::unique_ptr<Impl> impl_;
};

// The OpenAPI description served at /spec.
std::string openapi_document();

} // namespace msae
