#include "patchlens/http_server.hpp"

#include <chrono>

#include <httplib.h>

#include "patchlens/errors.hpp"
#include "patchlens/log.hpp"

namespace patchlens {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const std::exception& e) {
    const auto cls = classify_error(e);
    std::string field;
    if (const auto* f = dynamic_cast<const FieldError*>(&e)) field = f->field();
    const std::string message = cls.status == 500 ? "internal error" : e.what();
    if (cls.status == 500) log_event(LogLevel::error, "internal_error", {{"what", e.what()}});
    send_json(res, cls.status, error_json(cls.code, message, field));
}

nlohmann::json parse_body(const httplib::Request& req) {
    try {
        return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("request body is not valid JSON: ") + e.what());
    }
}

AnalyzeRequest parse_multipart(const httplib::Request& req) {
    nlohmann::json j = nlohmann::json::object();
    AnalyzeRequest r;
    for (const auto& [name, file] : req.files) {
        if (name == "image") continue;
        if (name == "top_k" || name == "max_new_tokens") {
            try {
                j[name] = std::stoi(file.content);
            } catch (const std::exception&) {
                throw FieldError(name, "expected an integer");
            }
        } else if (name == "shared_scale") {
            j[name] = file.content == "true" || file.content == "1" || file.content == "on";
        } else {
            j[name] = file.content;
        }
    }
    r = AnalyzeRequest::from_json(j);
    if (req.has_file("image")) {
        const auto part = req.get_file_value("image");
        r.image.assign(part.content.begin(), part.content.end());
    }
    return r;
}

template <class F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const std::exception& e) {
            send_error(res, e);
        }
    };
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<Service> service)
    : service_(std::move(service)), server_(std::make_unique<httplib::Server>()) {
    auto& s = *server_;
    auto svc = service_;

    s.Get("/healthz", guarded([svc](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200,
                  {{"status", "ok"},
                   {"default_model", svc->config().default_model},
                   {"loaded_models", svc->models().loaded()},
                   {"sessions", svc->sessions().size()},
                   {"session_capacity", svc->sessions().capacity()}});
    }));

    s.Post("/analyze", guarded([svc](const httplib::Request& req, httplib::Response& res) {
        const AnalyzeRequest ar = req.is_multipart_form_data() ? parse_multipart(req)
                                                               : AnalyzeRequest::from_json(parse_body(req));
        send_json(res, 200, svc->analyze_json(ar));
    }));

    s.Post("/probe", guarded([svc](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, svc->probe(parse_body(req)));
    }));

    std::filesystem::create_directories(svc->config().heatmap_dir);
    s.set_mount_point("/heatmaps", svc->config().heatmap_dir.string());

    s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            send_error(res, e);
        } catch (...) {
            send_json(res, 500, error_json("internal", "internal error"));
        }
    });
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send_json(res, res.status, error_json("not_found", "no such route or file"));
    });
    s.set_logger([](const httplib::Request& req, const httplib::Response& res) {
        log_event(res.status >= 500 ? LogLevel::error : LogLevel::info, "request",
                  {{"method", req.method}, {"path", req.path}, {"status", res.status},
                   {"bytes", res.body.size()}});
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = server_->bind_to_any_port(host);
    } else if (!server_->bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw InputError("cannot bind " + host + ":" + std::to_string(port));
    log_event(LogLevel::info, "listening", {{"host", host}, {"port", bound}});
    return bound;
}

void HttpServer::listen() { server_->listen_after_bind(); }

void HttpServer::wait_until_ready() const { server_->wait_until_ready(); }

void HttpServer::stop() {
    if (server_ && server_->is_running()) server_->stop();
}

}  // namespace patchlens
