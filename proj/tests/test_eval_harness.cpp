#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "taintradar/dataset.hpp"
#include "taintradar/eval.hpp"

using namespace taintradar;

namespace {

constexpr Verdict A = Verdict::kAdversarial;
constexpr Verdict B = Verdict::kBenign;

const char* kArch = "input 3 16 16\nconv 6 3 1 1\nrelu\nmaxpool 2 2\nconv 8 3 1 1\nrelu\ngap\ndense 4\n";

// Random images labelled by the model itself, so all count as correctly classified.
Dataset self_labelled(const Model<float>& model, Index count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Dataset d;
  d.images = Tensor<float>({count, 3, 16, 16});
  for (Index i = 0; i < d.images.size(); ++i) d.images[i] = u(rng);
  d.labels = predict_labels(model, d.images);
  return d;
}

}  // namespace

TEST_CASE("iou of simple masks") {
  const auto a = BinaryMask::block(8, 8, 0, 0, 4, 4);
  const auto b = BinaryMask::block(8, 8, 2, 0, 4, 4);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, b) == doctest::Approx(8.0 / 24.0));
  CHECK(iou(a, BinaryMask::block(8, 8, 4, 4, 4, 4)) == 0.0);
  CHECK(iou(BinaryMask(8, 8), BinaryMask(8, 8)) == 0.0);
}

TEST_CASE("frame vote takes strict majorities over full windows") {
  CHECK(frame_vote({A, A, B, B, A}, 5) == std::vector<Verdict>{A});
  CHECK(frame_vote({A, A, B, B, B}, 5) == std::vector<Verdict>{B});
  CHECK(frame_vote({A, A, B, B, A, A}, 5) == std::vector<Verdict>{A, A});
  CHECK(frame_vote({A, B, A, B}, 4) == std::vector<Verdict>{B});
  CHECK(frame_vote({A, B}, 5) == std::vector<Verdict>{B});
  CHECK(frame_vote({}, 5).empty());
  CHECK_THROWS_AS(frame_vote({A}, 0), std::invalid_argument);
}

TEST_CASE("the standard battery has eighteen entries") {
  const auto battery = expand_battery({0.2, 0.3, 0.4}, {Placement::right_bottom(), Placement::random()}, {1, 4, 16});
  CHECK(battery.size() == 18);
  CHECK(battery.front().label() == "square-0.2-rb-b1");
  CHECK(battery.back().label() == "square-0.4-random-b16");
  CHECK(expand_battery({}, {Placement::random()}, {1}).empty());
}

TEST_CASE("post-defense success rate is SR times the miss rate") {
  MetricsRow row;
  row.attempts = 40;
  row.successes = 30;
  row.detected = 24;
  finish_row(row);
  CHECK(row.sr == doctest::Approx(0.75));
  CHECK(row.tpr == doctest::Approx(0.8));
  CHECK(row.post_defense_sr == doctest::Approx(0.75 * 0.2));
  MetricsRow empty;
  finish_row(empty);
  CHECK(empty.sr == 0.0);
  CHECK(empty.tpr == 0.0);
}

TEST_CASE("experiment specs parse keys, attacks and grids") {
  const auto spec = parse_experiment_spec(
      "# comment\n"
      "model = m.trm1\n"
      "benign = b\n"
      "victims = /abs/v\n"
      "out = results\n"
      "target_fpr = 0.03, 0.06\n"
      "fill = noise\n"
      "seed = 17\n"
      "target = 3\n"
      "attack size=0.2 placement=fixed:1,2 batch=4 shape=star\n"
      "grid sizes=0.2,0.3 placements=rb,random batches=1\n",
      "/base");
  CHECK(spec.model == std::filesystem::path("/base/m.trm1"));
  CHECK(spec.victims == std::filesystem::path("/abs/v"));
  CHECK(spec.target_fprs == std::vector<double>{0.03, 0.06});
  CHECK(spec.detection.fill == FillMode::kRandomNoise);
  CHECK(spec.target == 3);
  REQUIRE(spec.battery.size() == 5);
  CHECK(spec.battery[0].label() == "star-0.2-fixed1x2-b4");
  CHECK(spec.battery[4].label() == "square-0.3-random-b1");
  if (!std::getenv("TAINTRADAR_SEED")) CHECK(spec.seed == 17);
  CHECK_THROWS_WITH_AS(parse_experiment_spec("model = a\nbogus = 1\n"), doctest::Contains("line 2"),
                       std::invalid_argument);
}

TEST_CASE("the seed environment variable overrides the default") {
  const char* saved = std::getenv("TAINTRADAR_SEED");
  const std::string restore = saved ? saved : "";
  setenv("TAINTRADAR_SEED", "1234", 1);
  CHECK(seed_from_env(5) == 1234);
  CHECK(parse_experiment_spec("seed = 9\n").seed == 1234);
  unsetenv("TAINTRADAR_SEED");
  CHECK(seed_from_env(5) == 5);
  if (saved) setenv("TAINTRADAR_SEED", restore.c_str(), 1);
}

TEST_CASE("a small experiment writes its tables") {
  const auto dir = std::filesystem::temp_directory_path() / "taintradar_eval_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto model = Model<float>::build(parse_architecture(kArch), 12);
  model.set_mean_image(Tensor<float>({3, 16, 16}, 0.5f));
  save_model(dir / "m.trm1", model);
  save_dataset(dir / "benign", self_labelled(model, 30, 1));
  save_dataset(dir / "victims", self_labelled(model, 30, 2));

  std::ofstream(dir / "exp.txt") << "model = m.trm1\nbenign = benign\nvictims = victims\nout = out\n"
                                    "k = 2\ndr = 1\ntarget = 1\nvictims_per_entry = 3\niterations = 10\n"
                                    "attack size=0.3 placement=rb batch=1\n";
  const auto spec = load_experiment_spec(dir / "exp.txt");
  const auto table = run_experiment(spec);
  CHECK(!table.partial);
  REQUIRE(table.rows.size() == 1);
  const auto& row = table.rows[0];
  CHECK(row.setting == "square-0.3-rb-b1");
  CHECK(row.k == 2);
  CHECK(row.attempts > 0);
  CHECK(row.post_defense_sr == doctest::Approx(row.sr * (1.0 - row.tpr)));
  for (const char* f : {"metrics.csv", "reports.jsonl", "roc.csv"}) CHECK(std::filesystem::exists(dir / "out" / f));
  std::ifstream csv(dir / "out" / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == kMetricsCsvHeader);

  std::ofstream(dir / "bad.txt") << "model = m.trm1\nbenign = missing\nout = out\n";
  CHECK_THROWS(load_experiment_spec(dir / "bad.txt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("bench reports latency and per-K cost") {
  auto model = Model<float>::build(parse_architecture(kArch), 3);
  model.set_mean_image(Tensor<float>({3, 16, 16}, 0.5f));
  const auto data = self_labelled(model, 4, 9);
  std::vector<Tensor<float>> images;
  for (Index i = 0; i < data.size(); ++i) images.push_back(data.image(i));
  DetectionConfig c;
  c.top_k = 2;
  c.rank_threshold = 1;
  const auto s = bench(model, images, c, {1, 2, 3});
  CHECK(s.images == 4);
  CHECK(s.pass_counts_ok);
  CHECK(s.mean_ms > 0.0);
  CHECK(s.p50_ms <= s.max_ms);
  CHECK(s.median_ms_per_k.size() == 3);
  CHECK(bench_to_text(s).find("mean") != std::string::npos);
}
