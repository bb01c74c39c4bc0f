#pragma once

// HTTP front of the annotation queue. Polling only; every mutation goes
// through AnnotationQueue::post.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "cfkd/annotation_queue.hpp"
#include "json.hpp"

namespace cfkd::annotate {

/// Human-readable class names shown to the annotator.
const char* class_name(int label) noexcept;

/// Metadata view of an item as served by /api/queue and the verdict endpoint.
nlohmann::json item_json(const AnnotationItem& item);
nlohmann::json status_json(const QueueStatus& status);

/// PNG bytes for one of "factual", "counterfactual", "diff"; nullopt for an unknown kind.
std::optional<std::vector<std::uint8_t>> render_item(const AnnotationItem& item, const std::string& kind,
                                                     std::size_t scale = 8);

class AnnotationServer {
 public:
  /// `static_dir`, if given, is mounted at / for a browser client.
  explicit AnnotationServer(AnnotationQueue& queue, std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port; throws cfkd::Error if binding fails.
  int start(const std::string& host, int port);
  void stop();
  [[nodiscard]] int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace cfkd::annotate
