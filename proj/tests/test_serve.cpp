#include <gtest/gtest.h>

#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "support/run_fixture.hpp"
#include "vaffect/serve/png.hpp"
#include "vaffect/serve/server.hpp"

using namespace vaffect;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Two synthetic videos of 6 frames; the second loses its merged file so
// ground truth has to be derived from the raw tracks.
class ServeTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fixture::scratch("serve"));
    fixture::synth_records(*root_, 2, 6);
    fs::remove(*root_ / "videos" / "video002" / "merged.txt");
    fs::create_directories(*root_ / "predictions");
    std::ofstream(*root_ / "predictions" / "run1.csv") << "video,frame,valence,arousal\n"
                                                       << "video001,1,12.5,-3\n"
                                                       << "video002,1,7,8\n"
                                                       << "video001,2,13,-4\n";
    outside_ = new fs::path(fixture::scratch("serve_outside"));
    fs::create_directory_symlink(*outside_, *root_ / "videos" / "escape");

    server_ = new serve::AnnotationServer(*root_);
    port_ = server_->bind_any_port();
    thread_ = new std::thread([] { server_->listen_after_bind(); });
    server_->wait_until_ready();
  }

  static void TearDownTestSuite() {
    server_->stop();
    thread_->join();
    delete thread_;
    delete server_;
    fs::remove_all(*root_);
    fs::remove_all(*outside_);
    delete root_;
    delete outside_;
  }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  static json get_json(const std::string& path, int expect = 200) {
    httplib::Client c("127.0.0.1", port_);
    auto res = c.Get(path);
    EXPECT_TRUE(res) << path;
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << path << ": " << res->body;
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*") << path;
    return json::parse(res->body, nullptr, false);
  }

  static inline fs::path* root_ = nullptr;
  static inline fs::path* outside_ = nullptr;
  static inline serve::AnnotationServer* server_ = nullptr;
  static inline std::thread* thread_ = nullptr;
  static inline int port_ = 0;
};

}  // namespace

TEST_F(ServeTest, ListsVideos) {
  const auto j = get_json("/videos");
  ASSERT_TRUE(j.is_array());
  // The symlink leading out of the corpus is listed by name but never served.
  std::vector<std::string> ids;
  for (const auto& v : j) ids.push_back(v.at("id"));
  EXPECT_EQ(ids, (std::vector<std::string>{"escape", "video001", "video002"}));
  EXPECT_EQ(j[1].at("frames"), 6);
  EXPECT_EQ(j[1].at("fps"), 30);
  EXPECT_EQ(j[1].at("annotated_dims"), json({"valence", "arousal"}));
}

TEST_F(ServeTest, FrameIsPngOfTheStoredImage) {
  auto res = client().Get("/videos/video001/frames/3");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  const std::vector<std::uint8_t> bytes(res->body.begin(), res->body.end());
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes[1], 'P');
  EXPECT_EQ(serve::decode_png(bytes), read_ppm(*root_ / "videos" / "video001" / "frames" / "3.ppm"));

  EXPECT_EQ(client().Get("/videos/video001/frames/99")->status, 404);
  EXPECT_EQ(client().Get("/videos/video001/frames/0")->status, 404);
  EXPECT_EQ(client().Get("/videos/nosuch/frames/1")->status, 404);
}

TEST_F(ServeTest, GroundTruthFromMergedFileAndFromTracks) {
  const auto merged = get_json("/videos/video001/groundtruth");
  const auto rows = corpus::read_merged(*root_ / "videos" / "video001" / "merged.txt");
  ASSERT_EQ(merged.size(), rows.size());
  EXPECT_EQ(merged[2].at("k"), rows[2].frame);
  EXPECT_EQ(merged[2].at("valence"), rows[2].valence);
  EXPECT_EQ(merged[2].at("arousal"), rows[2].arousal);

  const auto derived = get_json("/videos/video002/groundtruth");
  const auto dir = *root_ / "videos" / "video002";
  const auto v = corpus::match_track(corpus::read_track(dir / "valence.txt", corpus::Dimension::Valence), 6);
  ASSERT_EQ(derived.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(derived[k].at("valence"), v[k]);
}

TEST_F(ServeTest, PredictionsFilteredByVideo) {
  const auto j = get_json("/videos/video001/predictions");
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0].at("k"), 1);
  EXPECT_EQ(j[0].at("valence"), 12.5);
  EXPECT_EQ(j[1].at("arousal"), -4.0);
  EXPECT_EQ(get_json("/videos/video002/predictions?report=run1").size(), 1u);
  get_json("/videos/video001/predictions?report=missing", 404);
  get_json("/videos/video001/predictions?report=..%2Fmeta", 400);
}

TEST_F(ServeTest, PostWritesTrackInTextFormat) {
  const json body = json::array({{{"t", 0.0}, {"v", 120}}, {{"t", 0.05}, {"v", -300}}, {{"t", 0.1}, {"v", 1000}}});
  auto res = client().Post("/videos/video001/annotations/arousal", body.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto path = *root_ / "videos" / "video001" / "arousal.txt";
  const auto track = corpus::read_track(path, corpus::Dimension::Arousal);
  ASSERT_EQ(track.samples.size(), 3u);
  EXPECT_EQ(track.samples[1].value, -300);
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));

  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  corpus::AnnotationTrack expected;
  expected.dimension = corpus::Dimension::Arousal;
  expected.samples = {{0.0, 120}, {0.05, -300}, {0.1, 1000}};
  const auto dir = fixture::scratch("serve_expected");
  corpus::write_track(dir / "t.txt", expected);
  std::ifstream ref(dir / "t.txt");
  std::stringstream rs;
  rs << ref.rdbuf();
  EXPECT_EQ(ss.str(), rs.str());
  fs::remove_all(dir);
}

TEST_F(ServeTest, PostRejectsBadInput) {
  auto post = [&](const std::string& path, const std::string& body) {
    auto res = client().Post(path, body, "application/json");
    return res ? res->status : -1;
  };
  EXPECT_EQ(post("/videos/video001/annotations/valence", "not json"), 400);
  EXPECT_EQ(post("/videos/video001/annotations/valence", R"({"t":0,"v":1})"), 400);
  EXPECT_EQ(post("/videos/video001/annotations/valence", R"([{"t":0,"v":1001}])"), 400);
  EXPECT_EQ(post("/videos/video001/annotations/valence", R"([{"t":0,"v":1.5}])"), 400);
  EXPECT_EQ(post("/videos/video001/annotations/valence", R"([{"t":0.1,"v":1},{"t":0.0,"v":2}])"), 400);
  EXPECT_EQ(post("/videos/video001/annotations/dominance", R"([{"t":0,"v":1}])"), 404);
  EXPECT_EQ(post("/videos/nosuch/annotations/valence", R"([{"t":0,"v":1}])"), 404);
}

TEST_F(ServeTest, NothingEscapesTheCorpus) {
  const std::string ok = R"([{"t":0,"v":1}])";
  for (const std::string id : {"..", "..%2F..", "%2E%2E", "escape"}) {
    auto res = client().Post("/videos/" + id + "/annotations/valence", ok, "application/json");
    ASSERT_TRUE(res) << id;
    EXPECT_GE(res->status, 400) << id;
    EXPECT_EQ(client().Get("/videos/" + id + "/groundtruth")->status / 100, 4) << id;
  }
  EXPECT_TRUE(fs::is_empty(*outside_));
  EXPECT_FALSE(fs::exists(*root_ / "valence.txt"));
  EXPECT_FALSE(fs::exists(root_->parent_path() / "valence.txt"));
}

TEST_F(ServeTest, CorsPreflight) {
  auto res = client().Options("/videos/video001/annotations/valence");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 204);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  EXPECT_NE(res->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST(Png, RoundTripsRandomImages) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Image img(1 + rng() % 40, 1 + rng() % 40);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
    EXPECT_EQ(serve::decode_png(serve::encode_png(img)), img);
  }
}
