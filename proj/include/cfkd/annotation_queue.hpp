#pragma once

// Server-held queue of factual/counterfactual pairs awaiting a human verdict.
// All mutations go through one mutex; the engine blocks on a per-item
// condition until a verdict arrives or the wait times out.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cfkd/tensor.hpp"

namespace cfkd::annotate {

enum class ItemState { pending, decided, expired };
/// The two options offered to the annotator.
enum class Choice { incorporate, discard };

const char* to_string(ItemState s) noexcept;
const char* to_string(Choice c) noexcept;
std::optional<Choice> parse_choice(std::string_view s) noexcept;

struct AnnotationItem {
  std::string id;
  std::size_t example_id = 0;
  std::size_t iteration = 0;
  int original_label = 0;
  int target_label = 0;
  Tensor factual;
  Tensor counterfactual;
  ItemState state = ItemState::pending;
  std::optional<Choice> verdict;
  std::uint64_t sequence = 0;
  std::string created_at;
};

struct QueueStatus {
  std::size_t iteration = 0;
  std::size_t pending = 0;
  std::size_t decided = 0;
  std::size_t expired = 0;
  std::size_t total = 0;
  /// N_correct / N_total as reported by the engine, if any feedback was measured.
  std::optional<double> feedback_accuracy;
  std::vector<double> aga_history;
};

enum class PostResult { ok, not_found, conflict };

class AnnotationQueue {
 public:
  AnnotationQueue() = default;
  AnnotationQueue(const AnnotationQueue&) = delete;
  AnnotationQueue& operator=(const AnnotationQueue&) = delete;

  /// Adds a pending item and returns its id.
  std::string enqueue(std::size_t example_id, std::size_t iteration, int original_label, int target_label,
                      Tensor factual, Tensor counterfactual);
  /// Blocks until the item is decided or `timeout` passes; on timeout the
  /// item becomes expired and nullopt is returned.
  std::optional<Choice> wait(const std::string& id, std::chrono::milliseconds timeout);
  /// First write wins; later posts get `conflict`.
  PostResult post(const std::string& id, Choice choice, AnnotationItem* updated = nullptr);

  [[nodiscard]] std::vector<AnnotationItem> pending() const;
  [[nodiscard]] std::optional<AnnotationItem> find(const std::string& id) const;
  [[nodiscard]] QueueStatus status() const;

  void set_iteration(std::size_t iteration);
  void set_feedback(std::size_t n_correct, std::size_t n_total);
  void push_aga(double aga);

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, AnnotationItem> items_;
  std::deque<std::string> order_;
  std::uint64_t next_ = 0;
  QueueStatus status_;
};

}  // namespace cfkd::annotate
