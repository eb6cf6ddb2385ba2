#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "poolnet/bench.hpp"
#include "poolnet/checkpoint.hpp"
#include "poolnet/cli.hpp"
#include "poolnet/error.hpp"
#include "poolnet/predict.hpp"
#include "support/corpus.hpp"
#include "support/synthetic_scene.hpp"
#include "support/temp_dir.hpp"

using namespace poolnet;
using poolnet::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string out, err;
};

RunResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

// Small model settings shared by the end-to-end runs.
const char* kSmallConfig =
    "# tiny network for tests\n"
    "image_side = 16\n"
    "channels = 4,4,8,8\n"
    "sequence_length = 4\n"
    "pretrain.batch_size = 32\n"
    "pretrain.eval_pairs = 64\n"
    "train.max_steps = 20\n"
    "train.eval_every = 5\n";

}  // namespace

TEST_CASE("baselines: parsing and line-numbered errors") {
  const auto rows = bench::parse_baselines(
      "dataset,method,seconds\n# comment\n\ncourtyard, Theia, 80.5\ncourtyard,COLMAP,300\n", "b.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].dataset == "courtyard");
  CHECK(rows[0].method == "Theia");
  CHECK(rows[0].seconds == 80.5);

  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      bench::parse_baselines(text, "b.csv");
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  CHECK(line_of("a,m,1\nb,m\n") == 2);
  CHECK(line_of("a,m,1\nb,m,1\nc,m,fast\n") == 3);
  CHECK(line_of("a,m,-1\n") == 1);
  CHECK(line_of("a,m,1\n# x\na,m,2\n") == 3);
  CHECK(line_of("a,,1\n") == 1);
  CHECK(line_of("a,m,1,2\n") == 1);
  CHECK(line_of("a,m,nan\n") == 1);
}

TEST_CASE("bench table: averages, ratio against the fastest baseline") {
  // Theia averages 91.8 over three datasets, our timings average 15.6.
  const std::vector<bench::BaselineTiming> baselines{
      {"courtyard", "Theia", 80.0},   {"delivery_area", "Theia", 95.4}, {"facade", "Theia", 100.0},
      {"courtyard", "COLMAP", 400.0}, {"facade", "COLMAP", 500.0}};
  std::vector<bench::SceneTiming> ours{{"courtyard", 38, 0, 10.0, ""},
                                       {"delivery_area", 44, 1, 15.6, ""},
                                       {"facade", 76, 0, 21.2, ""}};
  const auto table = bench::build_table(ours, baselines);
  REQUIRE(table.methods == std::vector<std::string>{"Theia", "COLMAP", "Ours"});
  REQUIRE(table.rows.size() == 3);
  for (std::size_t c = 0; c < table.methods.size(); ++c) {
    double sum = 0;
    int n = 0;
    for (const auto& r : table.rows) {
      if (r.seconds[c]) {
        sum += *r.seconds[c];
        ++n;
      }
    }
    CHECK(std::abs(*table.average[c] - sum / n) <= 1e-9);
  }
  CHECK(std::abs(*table.average[0] - 91.8) <= 1e-9);
  CHECK(std::abs(*table.average[2] - 15.6) <= 1e-9);
  CHECK(!table.rows[1].seconds[1]);
  REQUIRE(table.fastest_baseline == 0u);
  CHECK(std::abs(*table.ratio[0] - 15.6 / 91.8) <= 1e-12);
  CHECK(!table.ratio[2]);

  const auto text = bench::render_text(table);
  CHECK(text.find("0.170 of the time of the fastest baseline (Theia)") != std::string::npos);
  CHECK(text.find("Average") != std::string::npos);
  const auto csv = bench::render_csv(table);
  CHECK(csv.rfind("dataset,frames,unreadable,Theia,COLMAP,Ours\n", 0) == 0);
  CHECK(csv.find("delivery_area,44,1,95.4,,15.6\n") != std::string::npos);
}

TEST_CASE("bench table: no baselines gives absolute times only") {
  const auto table = bench::build_table({{"a", 3, 0, 1.5, ""}, {"b", 4, 0, 2.5, ""}}, {});
  REQUIRE(table.methods == std::vector<std::string>{"Ours"});
  CHECK(*table.average[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(!table.fastest_baseline);
  const auto text = bench::render_text(table);
  CHECK(text.find("no baselines given") != std::string::npos);
  CHECK(text.find("Ours/method") == std::string::npos);
}

TEST_CASE("config: parsing, overrides and invariants") {
  const auto cfg = cli::parse_config("seed = 9 # trailing\n\nthreshold=0.5\nchannels = 8,8,8,8\n", "c");
  CHECK(cfg.seed == 9);
  CHECK(cfg.threshold == 0.5);
  CHECK(cfg.channels == std::vector<std::size_t>{8, 8, 8, 8});
  CHECK(cfg.sequence_length == 10);
  CHECK_THROWS_AS(cli::parse_config("seed 9\n", "c"), ParseError);
  CHECK_THROWS_AS(cli::parse_config("colour = red\n", "c"), ParseError);
  CHECK_THROWS_AS(cli::parse_config("seed = x\n", "c"), ParseError);

  cli::Config bad;
  bad.threshold = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.sequence_length = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.image_side = 40;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(cli::Config{}.validate());
}

TEST_CASE("cli label: three scenes, one without a reconstruction") {
  TempDir dir("label");
  const auto scenes = dir / "scenes";
  const auto models = dir / "models";
  const auto frame = poolnet::testing::solid_image(8, 10, 20, 30);
  for (const char* id : {"alpha", "bravo", "charlie"}) {
    poolnet::testing::write_scene(scenes, id, std::vector<data::RgbImage>(10, frame));
  }
  // alpha: best of two models registers 8/10; bravo: 4/10; charlie: nothing.
  for (auto [id, k, n] : {std::tuple{"alpha", "0", 3}, {"alpha", "1", 8}, {"bravo", "0", 4}}) {
    const auto d = models / id / k;
    fs::create_directories(d);
    poolnet::testing::write_fixture_text(poolnet::testing::images_only_model(n), d);
  }
  fs::create_directories(models / "charlie");
  const auto manifest = dir / "manifest.jsonl";
  const auto r = run_cli({"label", "--scenes", scenes.string(), "--models", models.string(),
                          "--manifest", manifest.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("T_s=1 1, T_s=0 2") != std::string::npos);
  const auto records = data::read_manifest(manifest);
  REQUIRE(records.size() == 3);
  CHECK(records[0].labels->T_s == 1);
  CHECK(records[0].labels->T_o == doctest::Approx(0.8));
  CHECK(records[0].labels->source_model_index == 1);
  CHECK(records[1].labels->T_s == 0);
  CHECK(records[2].labels->T_s == 0);
  CHECK(records[2].labels->source_model_index == -1);
  CHECK(records[0].label_source == "colmap");

  // threshold flag moves bravo (0.4) across
  const auto r2 = run_cli({"label", "--scenes", scenes.string(), "--models", models.string(),
                           "--manifest", manifest.string(), "--threshold", "0.4"});
  CHECK(r2.code == 0);
  CHECK(data::read_manifest(manifest)[1].labels->T_s == 1);

  // a scene folder without frames is an error record, the rest still lands
  fs::create_directories(scenes / "delta");
  const auto r3 = run_cli({"label", "--scenes", scenes.string(), "--models", models.string(),
                           "--manifest", manifest.string()});
  CHECK(r3.code == 1);
  CHECK(r3.err.find("delta") != std::string::npos);
  CHECK(data::read_manifest(manifest).size() == 3);
}

TEST_CASE("cli label: empty scenes dir is exit 2 and writes nothing") {
  TempDir dir("label_empty");
  fs::create_directories(dir / "scenes");
  const auto manifest = dir / "m.jsonl";
  const auto r = run_cli({"label", "--scenes", (dir / "scenes").string(), "--models",
                          (dir / "models").string(), "--manifest", manifest.string()});
  CHECK(r.code == 2);
  CHECK(!fs::exists(manifest));
}

TEST_CASE("cli: usage errors are exit 2") {
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"predict", "--manifest", "x"}).code == 2);
  CHECK(run_cli({"fly"}).code == 2);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("cli pipeline: pretrain, train, predict, bench") {
  TempDir dir("pipeline");
  const auto config = dir / "small.cfg";
  write_text(config, kSmallConfig);

  // Phase 1 on a colour corpus with no split in the manifest.
  auto colour = poolnet::testing::colour_corpus(dir / "colour", 3, 3, 16);
  for (auto& s : colour) s.split = data::Split::unassigned;
  const auto colour_manifest = dir / "colour.jsonl";
  data::write_manifest(colour_manifest, colour);

  const auto enc1 = (dir / "enc1.ckpt").string();
  const auto enc2 = (dir / "enc2.ckpt").string();
  auto p1 = run_cli({"pretrain", "--manifest", colour_manifest.string(), "--config", config.string(),
                     "--out", enc1, "--seed", "7"});
  REQUIRE(p1.code == 0);
  CHECK(p1.err.find("no split") != std::string::npos);
  CHECK(p1.out.find("pair_accuracy") != std::string::npos);
  auto p2 = run_cli({"pretrain", "--manifest", colour_manifest.string(), "--config", config.string(),
                     "--out", enc2, "--seed", "7"});
  REQUIRE(p2.code == 0);
  CHECK(slurp(enc1) == slurp(enc2));
  CHECK(fs::exists(enc1 + ".report.jsonl"));

  auto missing = run_cli({"pretrain", "--manifest", (dir / "nope.jsonl").string(), "--out", enc1});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("nope.jsonl") != std::string::npos);

  // Phase 2 on a marker corpus.
  const auto markers = poolnet::testing::marker_corpus(dir / "markers", 5, 20, 6, 16, 5);
  const auto marker_manifest = dir / "markers.jsonl";
  data::write_manifest(marker_manifest, markers);
  const auto encoder_bytes = slurp(enc1);
  const auto model = (dir / "seq.ckpt").string();
  auto t1 = run_cli({"train", "--manifest", marker_manifest.string(), "--encoder", enc1, "--config",
                     config.string(), "--out", model});
  REQUIRE(t1.code == 0);
  CHECK(t1.out.find("test_accuracy") != std::string::npos);
  CHECK(slurp(enc1) == encoder_bytes);
  const auto model2 = (dir / "seq2.ckpt").string();
  REQUIRE(run_cli({"train", "--manifest", marker_manifest.string(), "--encoder", enc1, "--config",
                   config.string(), "--out", model2})
              .code == 0);
  CHECK(slurp(model) == slurp(model2));

  // One class absent.
  std::vector<data::SceneRecord> negatives;
  for (const auto& s : markers)
    if (s.labels->T_s == 0) negatives.push_back(s);
  const auto neg_manifest = dir / "neg.jsonl";
  data::write_manifest(neg_manifest, negatives);
  auto absent = run_cli({"train", "--manifest", neg_manifest.string(), "--encoder", enc1, "--config",
                         config.string(), "--out", (dir / "x.ckpt").string()});
  CHECK(absent.code == 2);
  CHECK(absent.err.find("T_s=1") != std::string::npos);

  // Predict: two runs agree and match direct library calls.
  for (bool full : {false, true}) {
    std::vector<std::string> args{"predict", "--manifest", marker_manifest.string(), "--encoder",
                                  enc1, "--model", model};
    if (full) args.push_back("--full");
    const auto a = run_cli(args);
    const auto b = run_cli(args);
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);

    const auto encoder = checkpoint::load_encoder(enc1).params;
    const auto sequence = checkpoint::load_sequence_model(model).params;
    auto sorted = markers;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& x, const auto& y) { return x.scene_id < y.scene_id; });
    std::string expected;
    for (const auto& s : sorted) {
      const auto p = full ? model::predict_scene_full(s, encoder, sequence)
                          : model::predict_scene(s, encoder, sequence);
      char prob[32];
      std::snprintf(prob, sizeof prob, "%.6f", p.probability);
      expected += s.scene_id + "\t" + prob + "\t" + (p.accept ? "true" : "false") + "\n";
    }
    CHECK(a.out == expected);
  }

  // Bench: measured run, twice; count columns must agree.
  const auto baselines = dir / "baselines.csv";
  write_text(baselines, "dataset,method,seconds\nmarker_000,Theia,9.0\n");
  std::vector<std::string> bench_args{"bench", "--manifest", marker_manifest.string(), "--encoder", enc1,
                                      "--model", model, "--baselines", baselines.string(), "--out"};
  auto b1 = run_cli([&] { auto a = bench_args; a.push_back((dir / "b1").string()); return a; }());
  auto b2 = run_cli([&] { auto a = bench_args; a.push_back((dir / "b2").string()); return a; }());
  REQUIRE(b1.code == 0);
  CHECK(b1.out.find("frames/s") != std::string::npos);
  auto counts = [](const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string field;
      while (std::getline(ls, field, ',')) f.push_back(field);
      out += f[0] + "," + (f.size() > 1 ? f[1] : "") + "," + (f.size() > 2 ? f[2] : "") + "\n";
    }
    return out;
  };
  CHECK(counts(slurp(dir / "b1" / "bench.csv")) == counts(slurp(dir / "b2" / "bench.csv")));
  CHECK(fs::exists(dir / "b1" / "bench.txt"));
}

TEST_CASE("cli bench: fixture timings reproduce the ratio, malformed CSV is exit 2") {
  TempDir dir("bench");
  write_text(dir / "baselines.csv",
             "dataset,method,seconds\ncourtyard,Theia,80.0\ndelivery_area,Theia,95.4\n"
             "facade,Theia,100.0\ncourtyard,COLMAP,250\n");
  write_text(dir / "ours.csv", "courtyard,Ours,10.0\ndelivery_area,Ours,15.6\nfacade,Ours,21.2\n");
  const auto r = run_cli({"bench", "--baselines", (dir / "baselines.csv").string(), "--timings",
                          (dir / "ours.csv").string(), "--out", (dir / "out").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("0.170 of the time of the fastest baseline (Theia)") != std::string::npos);
  CHECK(slurp(dir / "out" / "bench.txt") == r.out);

  write_text(dir / "broken.csv", "dataset,method,seconds\na,Theia,1\nb,Theia\n");
  const auto bad = run_cli({"bench", "--baselines", (dir / "broken.csv").string(), "--timings",
                            (dir / "ours.csv").string(), "--out", (dir / "out2").string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("broken.csv:3") != std::string::npos);

  const auto none = run_cli({"bench", "--out", (dir / "out3").string()});
  CHECK(none.code == 2);
}
