#include "cfkd/annotation_server.hpp"

#include <cmath>
#include <regex>

#include "cfkd/errors.hpp"
#include "cfkd/png.hpp"
#include "httplib.h"

namespace cfkd::annotate {

using nlohmann::json;

const char* class_name(int label) noexcept { return label == 0 ? "omega1 (dim square)" : "omega2 (bright square)"; }

json item_json(const AnnotationItem& item) {
  const std::string base = "/api/item/" + item.id + "/";
  json j = {{"id", item.id},
            {"example_id", item.example_id},
            {"iteration", item.iteration},
            {"original_class", class_name(item.original_label)},
            {"target_class", class_name(item.target_label)},
            {"original_label", item.original_label},
            {"target_label", item.target_label},
            {"images",
             {{"factual", base + "factual.png"}, {"counterfactual", base + "counterfactual.png"}, {"diff", base + "diff.png"}}},
            {"state", to_string(item.state)},
            {"created_at", item.created_at}};
  j["verdict"] = item.verdict ? json(to_string(*item.verdict)) : json(nullptr);
  return j;
}

json status_json(const QueueStatus& s) {
  return {{"iteration", s.iteration},
          {"pending_count", s.pending},
          {"decided_count", s.decided},
          {"expired_count", s.expired},
          {"total_count", s.total},
          {"feedback_accuracy_so_far", s.feedback_accuracy ? json(*s.feedback_accuracy) : json(nullptr)},
          {"aga_history", s.aga_history}};
}

std::optional<std::vector<std::uint8_t>> render_item(const AnnotationItem& item, const std::string& kind,
                                                     std::size_t scale) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(item.factual.size()))));
  png::Image img;
  if (kind == "factual") {
    img = png::from_unit_gray(item.factual.values(), side, side);
  } else if (kind == "counterfactual") {
    img = png::from_unit_gray(item.counterfactual.values(), side, side);
  } else if (kind == "diff") {
    std::vector<double> d(item.factual.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = item.counterfactual.values()[i] - item.factual.values()[i];
    img = png::diverging(d, side, side);
  } else {
    return std::nullopt;
  }
  return png::encode(scale > 1 ? png::upscale(img, scale) : img);
}

struct AnnotationServer::Impl {
  httplib::Server http;
};

AnnotationServer::AnnotationServer(AnnotationQueue& queue, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>()) {
  auto& srv = impl_->http;
  auto send_json = [](httplib::Response& res, int code, const json& body) {
    res.status = code;
    res.set_content(body.dump(), "application/json");
  };

  srv.Get("/api/queue", [&queue, send_json](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    for (const auto& it : queue.pending()) list.push_back(item_json(it));
    send_json(res, 200, list);
  });

  srv.Get("/api/status", [&queue, send_json](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, status_json(queue.status()));
  });

  srv.Get(R"(/api/item/([^/]+)/(factual|counterfactual|diff)\.png)",
          [&queue, send_json](const httplib::Request& req, httplib::Response& res) {
            const auto item = queue.find(req.matches[1]);
            if (!item) return send_json(res, 404, {{"error", "unknown item"}});
            const auto bytes = render_item(*item, req.matches[2]);
            res.set_content(std::string(bytes->begin(), bytes->end()), "image/png");
          });

  srv.Post(R"(/api/item/([^/]+)/verdict)", [&queue, send_json](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!queue.find(id)) return send_json(res, 404, {{"error", "unknown item"}});
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("verdict") || !body["verdict"].is_string()) {
      return send_json(res, 400, {{"error", "body must be {\"verdict\": \"incorporate\" | \"discard\"}"}});
    }
    const auto choice = parse_choice(body["verdict"].get<std::string>());
    if (!choice) return send_json(res, 400, {{"error", "verdict must be \"incorporate\" or \"discard\""}});
    AnnotationItem updated;
    switch (queue.post(id, *choice, &updated)) {
      case PostResult::ok: return send_json(res, 200, item_json(updated));
      case PostResult::not_found: return send_json(res, 404, {{"error", "unknown item"}});
      case PostResult::conflict: {
        const auto cur = queue.find(id);
        return send_json(res, 409, {{"error", "item is not pending"}, {"item", item_json(*cur)}});
      }
    }
  });

  if (static_dir) {
    if (!srv.set_mount_point("/", static_dir->string())) {
      throw Error("cannot serve static files from " + static_dir->string());
    }
  }
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::start(const std::string& host, int port) {
  auto& srv = impl_->http;
  port_ = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { impl_->http.listen_after_bind(); });
  srv.wait_until_ready();
  return port_;
}

void AnnotationServer::stop() {
  if (impl_) impl_->http.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace cfkd::annotate
