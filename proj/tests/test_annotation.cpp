#include <gtest/gtest.h>

#include <thread>

#include "cfkd/annotation_server.hpp"
#include "cfkd/png.hpp"
#include "cfkd/squareworld.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace cfkd;
using namespace cfkd::annotate;
using nlohmann::json;

namespace {

Tensor image(double fg, double bg) { return square::render({fg, bg, 4, 6, std::nullopt}, square::Geometry{}); }

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    server = std::make_unique<AnnotationServer>(queue);
    port = server->start("127.0.0.1", 0);
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
  }
  void TearDown() override { server->stop(); }

  std::string add(double fg = 0.3, double bg = 0.8) {
    return queue.enqueue(1, 2, 0, 1, image(fg, bg), image(fg, 1.0 - bg));
  }
  httplib::Result post(const std::string& id, const std::string& body) {
    return client->Post("/api/item/" + id + "/verdict", body, "application/json");
  }

  AnnotationQueue queue;
  std::unique_ptr<AnnotationServer> server;
  std::unique_ptr<httplib::Client> client;
  int port = 0;
};

}  // namespace

TEST_F(ServiceTest, EmptyQueueAndFreshStatus) {
  auto r = client->Get("/api/queue");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body), json::array());
  r = client->Get("/api/status");
  const auto s = json::parse(r->body);
  EXPECT_EQ(s["iteration"], 0);
  EXPECT_EQ(s["pending_count"], 0);
  EXPECT_EQ(s["decided_count"], 0);
  EXPECT_TRUE(s["feedback_accuracy_so_far"].is_null());
  EXPECT_EQ(s["aga_history"], json::array());
}

TEST_F(ServiceTest, QueueListsPendingFifoWithSchema) {
  const auto a = add(), b = add(), c = add();
  ASSERT_EQ(post(b, R"({"verdict":"discard"})")->status, 200);
  const auto list = json::parse(client->Get("/api/queue")->body);
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[0]["id"], a);
  EXPECT_EQ(list[1]["id"], c);
  for (const char* key : {"id", "original_class", "target_class", "images", "created_at", "state", "example_id",
                          "iteration"}) {
    EXPECT_TRUE(list[0].contains(key)) << key;
  }
  EXPECT_EQ(list[0]["images"]["factual"], "/api/item/" + a + "/factual.png");
  EXPECT_EQ(list[0]["state"], "pending");
  EXPECT_FALSE(list[0].contains("pixels"));
}

TEST_F(ServiceTest, ImagesDecodeAndDiffOfIdenticalIsUniform) {
  const auto id = add();
  const auto f = client->Get("/api/item/" + id + "/factual.png");
  ASSERT_EQ(f->status, 200);
  EXPECT_EQ(f->get_header_value("Content-Type"), "image/png");
  const auto img = png::decode(std::span(reinterpret_cast<const std::uint8_t*>(f->body.data()), f->body.size()));
  EXPECT_EQ(img.channels, 1u);
  EXPECT_EQ(img.width, img.height);
  EXPECT_EQ(img.width % 32, 0u);
  ASSERT_EQ(client->Get("/api/item/" + id + "/counterfactual.png")->status, 200);

  const auto same = queue.enqueue(3, 1, 1, 0, image(0.7, 0.2), image(0.7, 0.2));
  const auto d = client->Get("/api/item/" + same + "/diff.png");
  ASSERT_EQ(d->status, 200);
  const auto diff = png::decode(std::span(reinterpret_cast<const std::uint8_t*>(d->body.data()), d->body.size()));
  for (std::size_t i = 0; i < diff.pixels.size(); ++i) ASSERT_EQ(diff.pixels[i], diff.pixels[i % diff.channels]);

  // Renders are deterministic.
  EXPECT_EQ(client->Get("/api/item/" + id + "/diff.png")->body, client->Get("/api/item/" + id + "/diff.png")->body);
  EXPECT_EQ(client->Get("/api/item/nope/factual.png")->status, 404);
  EXPECT_EQ(client->Get("/api/item/" + id + "/other.png")->status, 404);
}

TEST_F(ServiceTest, VerdictErrors) {
  const auto id = add();
  EXPECT_EQ(post("missing", R"({"verdict":"discard"})")->status, 404);
  EXPECT_EQ(post(id, R"({"verdict":"maybe"})")->status, 400);
  EXPECT_EQ(post(id, "not json")->status, 400);
  EXPECT_EQ(post(id, R"({"choice":"discard"})")->status, 400);
  EXPECT_EQ(post(id, R"({"verdict":1})")->status, 400);
  const auto ok = post(id, R"({"verdict":"incorporate"})");
  ASSERT_EQ(ok->status, 200);
  const auto item = json::parse(ok->body);
  EXPECT_EQ(item["state"], "decided");
  EXPECT_EQ(item["verdict"], "incorporate");
  EXPECT_EQ(post(id, R"({"verdict":"discard"})")->status, 409);
  EXPECT_EQ(queue.find(id)->verdict, Choice::incorporate);
}

TEST_F(ServiceTest, VerdictReachesBlockedWaiter) {
  const auto id = add();
  std::optional<Choice> got;
  std::thread waiter([&] { got = queue.wait(id, std::chrono::seconds(10)); });
  ASSERT_EQ(post(id, R"({"verdict":"discard"})")->status, 200);
  waiter.join();
  EXPECT_EQ(got, Choice::discard);
}

TEST_F(ServiceTest, ConcurrentPostsFirstWriteWins) {
  const auto id = add();
  std::vector<int> codes(8);
  std::vector<std::thread> ts;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    ts.emplace_back([&, i] {
      httplib::Client c("127.0.0.1", port);
      codes[i] = c.Post("/api/item/" + id + "/verdict", i % 2 ? R"({"verdict":"discard"})" : R"({"verdict":"incorporate"})",
                        "application/json")
                     ->status;
    });
  }
  for (auto& t : ts) t.join();
  EXPECT_EQ(std::count(codes.begin(), codes.end(), 200), 1);
  EXPECT_EQ(std::count(codes.begin(), codes.end(), 409), 7);
}

TEST_F(ServiceTest, StatusCountsAndFeedback) {
  const auto a = add(), b = add();
  add();
  post(a, R"({"verdict":"discard"})");
  EXPECT_FALSE(queue.wait(b, std::chrono::milliseconds(1)));
  queue.set_iteration(2);
  queue.set_feedback(8, 10);
  queue.push_aga(0.61);
  queue.push_aga(0.83);
  const auto before = client->Get("/api/status")->body;
  const auto s = json::parse(before);
  EXPECT_EQ(s["iteration"], 2);
  EXPECT_EQ(s["pending_count"], 1);
  EXPECT_EQ(s["decided_count"], 1);
  EXPECT_EQ(s["expired_count"], 1);
  EXPECT_EQ(s["pending_count"].get<int>() + s["decided_count"].get<int>() + s["expired_count"].get<int>(),
            s["total_count"].get<int>());
  EXPECT_DOUBLE_EQ(s["feedback_accuracy_so_far"].get<double>(), 0.8);
  EXPECT_EQ(s["aga_history"].size(), 2u);
  // GETs never mutate.
  client->Get("/api/queue");
  EXPECT_EQ(client->Get("/api/status")->body, before);
  // Expired items cannot be decided later.
  EXPECT_EQ(post(b, R"({"verdict":"discard"})")->status, 409);
}
