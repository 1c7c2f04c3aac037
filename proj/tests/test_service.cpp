#include <thread>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "memscore/service.hpp"
#include "test_util.hpp"

using namespace memscore;

namespace {

std::string png_bytes(const ImageTensor& img) {
  const auto v = encode_png(img);
  return {v.begin(), v.end()};
}

std::string jpeg_bytes(const ImageTensor& img) {
  std::vector<std::uint8_t> out;
  cv::imencode(".jpg", to_mat(img), out);
  return {out.begin(), out.end()};
}

/// Service on an ephemeral port, torn down with the fixture.
class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Model<float> m(preset("tiny", Variant::resmem), 8);
    ck_ = std::make_unique<Checkpoint>(Checkpoint{m, SimplePipelineConfig{}, {}});
    ServiceConfig cfg;
    cfg.max_body_bytes = 256 * 1024;
    cfg.max_batch = 4;
    svc_ = std::make_unique<ScoringService>(*ck_, cfg);
    port_ = svc_->bind_any();
    ASSERT_GT(port_, 0);
    thread_ = std::thread([this] { svc_->listen_after_bind(); });
    svc_->wait_until_ready();
  }
  void TearDown() override {
    svc_->stop();
    if (thread_.joinable()) thread_.join();
  }
  httplib::Client client() { return httplib::Client("127.0.0.1", port_); }

  std::unique_ptr<Checkpoint> ck_;
  std::unique_ptr<ScoringService> svc_;
  std::thread thread_;
  int port_ = 0;
};

ImageTensor sample_image(std::uint64_t seed) {
  Rng rng(seed);
  return testutil::random_image(rng, 3, 48, 40);
}

}  // namespace

TEST_F(ServiceTest, RawPngBodyScores) {
  auto c = client();
  const auto res = c.Post("/score", png_bytes(sample_image(1)), "image/png");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto r = nlohmann::json::parse(res->body).get<ScoreResponse>();
  EXPECT_GE(r.score, 0.0);
  EXPECT_LE(r.score, 1.0);
  EXPECT_EQ(r.model_tag, "resmem-tiny");
  EXPECT_EQ(r.pipeline_tag, "simple-32");
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST_F(ServiceTest, MultipartJpegMatchesLibraryPath) {
  const auto bytes = jpeg_bytes(sample_image(2));
  auto c = client();
  httplib::MultipartFormDataItems items{{"image", bytes, "a.jpg", "image/jpeg"}};
  const auto res = c.Post("/score", items);
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const double served = nlohmann::json::parse(res->body)["score"];
  const double offline = score_image(ck_->model, ck_->pipeline, decode_image(bytes));
  EXPECT_NEAR(served, offline, 1e-6);
}

TEST_F(ServiceTest, SameImageTwiceSameScore) {
  const auto bytes = png_bytes(sample_image(3));
  auto c = client();
  const auto a = c.Post("/score", bytes, "image/png"), b = c.Post("/score", bytes, "image/png");
  ASSERT_TRUE(a && b);
  EXPECT_EQ(nlohmann::json::parse(a->body)["score"], nlohmann::json::parse(b->body)["score"]);
}

TEST_F(ServiceTest, TextBodyIs400) {
  auto c = client();
  const auto res = c.Post("/score", "just some text", "text/plain");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_TRUE(nlohmann::json::parse(res->body).contains("error"));
  const auto empty = c.Post("/score", "", "image/png");
  EXPECT_EQ(empty->status, 400);
}

TEST_F(ServiceTest, OversizeBodyIs413) {
  auto c = client();
  const std::string big(300 * 1024, '\x42');
  const auto res = c.Post("/score", big, "image/png");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 413);
}

TEST_F(ServiceTest, HealthzReportsLoadedTag) {
  auto c = client();
  const auto res = c.Get("/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j["model_tag"], ck_->model.tag());
  EXPECT_GE(j["uptime_s"].get<double>(), 0.0);
}

TEST_F(ServiceTest, BatchReturnsOneResponsePerPart) {
  auto c = client();
  httplib::MultipartFormDataItems items;
  for (int i = 0; i < 3; ++i) items.push_back({"image", png_bytes(sample_image(10 + i)), "i.png", "image/png"});
  const auto res = c.Post("/score/batch", items);
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto arr = nlohmann::json::parse(res->body);
  ASSERT_EQ(arr.size(), 3u);
  std::vector<double> got;
  for (const auto& r : arr) got.push_back(r["score"]);
  // Parts arrive in a multimap keyed by field name; identical names keep insertion order.
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(got[i], score_image(ck_->model, ck_->pipeline, decode_image(png_bytes(sample_image(10 + i)))), 1e-6);

  items.push_back({"image", "not an image", "bad.txt", "text/plain"});
  EXPECT_EQ(c.Post("/score/batch", items)->status, 400);
  items.pop_back();
  items.push_back(items.front());
  items.push_back(items.front());
  EXPECT_EQ(c.Post("/score/batch", items)->status, 413);
  EXPECT_EQ(c.Post("/score/batch", png_bytes(sample_image(1)), "image/png")->status, 400);
}

TEST_F(ServiceTest, ModelTagMismatchIs400) {
  auto c = client();
  httplib::MultipartFormDataItems items{{"image", png_bytes(sample_image(4)), "a.png", "image/png"},
                                        {"model", "memnet-small", "", ""}};
  EXPECT_EQ(c.Post("/score", items)->status, 400);
  items[1].content = "resmem-tiny";
  EXPECT_EQ(c.Post("/score", items)->status, 200);
}

TEST_F(ServiceTest, PreflightAllowed) {
  auto c = client();
  const auto res = c.Options("/score");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  EXPECT_FALSE(res->get_header_value("Access-Control-Allow-Methods").empty());
}

TEST(ServiceConfigTest, CheckpointFromEnv) {
  EXPECT_EQ(checkpoint_path_or_env("a.ckpt"), "a.ckpt");
  ::setenv(kCheckpointEnv, "env.ckpt", 1);
  EXPECT_EQ(checkpoint_path_or_env(""), "env.ckpt");
  ::unsetenv(kCheckpointEnv);
  EXPECT_THROW(checkpoint_path_or_env(""), ValidationError);
}
