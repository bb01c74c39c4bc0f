#include "cfkd/annotation_queue.hpp"

#include <ctime>
#include <iomanip>
#include <sstream>

namespace cfkd::annotate {

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

const char* to_string(ItemState s) noexcept {
  switch (s) {
    case ItemState::pending: return "pending";
    case ItemState::decided: return "decided";
    case ItemState::expired: return "expired";
  }
  return "?";
}

const char* to_string(Choice c) noexcept { return c == Choice::incorporate ? "incorporate" : "discard"; }

std::optional<Choice> parse_choice(std::string_view s) noexcept {
  if (s == "incorporate") return Choice::incorporate;
  if (s == "discard") return Choice::discard;
  return std::nullopt;
}

std::string AnnotationQueue::enqueue(std::size_t example_id, std::size_t iteration, int original_label,
                                     int target_label, Tensor factual, Tensor counterfactual) {
  std::lock_guard lock(mu_);
  AnnotationItem item;
  item.sequence = next_++;
  item.id = "it" + std::to_string(iteration) + "-ex" + std::to_string(example_id) + "-" + std::to_string(item.sequence);
  item.example_id = example_id;
  item.iteration = iteration;
  item.original_label = original_label;
  item.target_label = target_label;
  item.factual = std::move(factual);
  item.counterfactual = std::move(counterfactual);
  item.created_at = utc_now();
  const std::string id = item.id;
  order_.push_back(id);
  items_.emplace(id, std::move(item));
  ++status_.pending;
  ++status_.total;
  return id;
}

std::optional<Choice> AnnotationQueue::wait(const std::string& id, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  auto it = items_.find(id);
  if (it == items_.end()) return std::nullopt;
  cv_.wait_for(lock, timeout, [&] { return it->second.state != ItemState::pending; });
  if (it->second.state == ItemState::pending) {
    it->second.state = ItemState::expired;
    --status_.pending;
    ++status_.expired;
    return std::nullopt;
  }
  return it->second.verdict;
}

PostResult AnnotationQueue::post(const std::string& id, Choice choice, AnnotationItem* updated) {
  {
    std::lock_guard lock(mu_);
    auto it = items_.find(id);
    if (it == items_.end()) return PostResult::not_found;
    if (it->second.state != ItemState::pending) {
      if (updated != nullptr) *updated = it->second;
      return PostResult::conflict;
    }
    it->second.state = ItemState::decided;
    it->second.verdict = choice;
    --status_.pending;
    ++status_.decided;
    if (updated != nullptr) *updated = it->second;
  }
  cv_.notify_all();
  return PostResult::ok;
}

std::vector<AnnotationItem> AnnotationQueue::pending() const {
  std::lock_guard lock(mu_);
  std::vector<AnnotationItem> out;
  for (const auto& id : order_) {
    const auto& item = items_.at(id);
    if (item.state == ItemState::pending) out.push_back(item);
  }
  return out;
}

std::optional<AnnotationItem> AnnotationQueue::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = items_.find(id);
  if (it == items_.end()) return std::nullopt;
  return it->second;
}

QueueStatus AnnotationQueue::status() const {
  std::lock_guard lock(mu_);
  return status_;
}

void AnnotationQueue::set_iteration(std::size_t iteration) {
  std::lock_guard lock(mu_);
  status_.iteration = iteration;
}

void AnnotationQueue::set_feedback(std::size_t n_correct, std::size_t n_total) {
  std::lock_guard lock(mu_);
  if (n_total == 0) {
    status_.feedback_accuracy.reset();
  } else {
    status_.feedback_accuracy = static_cast<double>(n_correct) / static_cast<double>(n_total);
  }
}

void AnnotationQueue::push_aga(double aga) {
  std::lock_guard lock(mu_);
  status_.aga_history.push_back(aga);
}

}  // namespace cfkd::annotate
