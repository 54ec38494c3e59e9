#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "corelm/cli.hpp"
#include "corelm/error.hpp"

using namespace corelm;
namespace fs = std::filesystem;

namespace {

const std::string kNestedDoc =
    "doc\tpm1\tnews\n"
    "The\tprime\tminister\tof\tIsrael\t,\tBinyamin\tNetanyahu\t,\ttold\ta\tnews\n"
    "11\t11\t11\t11\t11\t0\t11\t11\t0\t0\t13\t13\n"
    "0\t0\t0\t0\t7\t0\t0\t0\t0\t0\t0\t0\n";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("corelm_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

std::string base_config(const fs::path& dir, const std::string& corpus) {
  return "run.seed = 11\n"
         "paths.runs = " + (dir / "runs").string() + "\n"
         "paths.corpus = " + corpus + "\n"
         "tokenizer.vocab_size = 270\n"
         "model.context_window = 16\n"
         "model.d_model = 8\n"
         "model.d_ff = 16\n"
         "model.n_layers = 1\n";
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return std::string(error_category(e)) + ": " + e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("configuration parsing") {
  SUBCASE("defaults and canonical values") {
    auto c = RunConfig::parse("# comment\nrun.seed = 4   # trailing\n\nmodel.delta = 0.50\nmodel.bos = yes\n");
    CHECK(c.get_uint("run.seed") == 4);
    CHECK(c.get("model.delta") == "0.5");
    CHECK(c.get_bool("model.bos"));
    CHECK(c.get_uint("model.d_model") == 32);
    CHECK_FALSE(c.has("eval.delta"));
    auto same = RunConfig::parse("model.delta = 5e-1\nrun.seed = 4\nmodel.bos = true\n");
    CHECK(c.resolved() == same.resolved());
    CHECK(c.hash({"model", "run"}) == same.hash({"model", "run"}));
  }
  SUBCASE("rejections") {
    CHECK_THROWS_AS(RunConfig::parse("model.delta = 0.5\n"), ConfigError);  // the seed is mandatory
    CHECK_THROWS_AS(RunConfig::parse("run.seed = 1\nmodel.dmodel = 8\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed = 1\nrun.seed = 2\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed = -1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed = 1\nmodel.delta = half\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed = 1\nmodel.gate_mode = vector\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed = 1\nmodel.bos = maybe\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("run.seed 1\n"), ConfigError);
    const std::string msg = error_of([] { RunConfig::parse("run.seed = 1\n\nfoo.bar = 2\n"); });
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("foo.bar") != std::string::npos);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/corelm.cfg"), IoError);
  }
  SUBCASE("overrides") {
    auto c = RunConfig::parse("run.seed = 1\n");
    c.set("eval.store_mode=reset");
    CHECK(c.get("eval.store_mode") == "reset");
    CHECK_THROWS_AS(c.set("eval.store_mode=sometimes"), ConfigError);
    CHECK_THROWS_AS(c.set("nonsense"), ConfigError);
    CHECK_THROWS_AS(c.set("eval.nothing=1"), ConfigError);
  }
  SUBCASE("stage hashes depend only on upstream keys") {
    auto a = RunConfig::parse("run.seed = 1\n");
    auto b = a;
    b.set("eval.store_mode=online");
    CHECK(run_layout(a).data == run_layout(b).data);
    CHECK(run_layout(a).finetune == run_layout(b).finetune);
    CHECK(run_layout(a).eval != run_layout(b).eval);
    b.set("model.d_model=64");
    CHECK(run_layout(a).data == run_layout(b).data);
    CHECK(run_layout(a).base != run_layout(b).base);
    b.set("paths.runs=elsewhere");
    CHECK(run_layout(b).data.filename() == run_layout(a).data.filename());
    b.set("run.seed=2");
    CHECK(run_layout(b).data.filename() != run_layout(a).data.filename());
  }
  SUBCASE("typed views") {
    auto c = RunConfig::parse("run.seed = 9\nmodel.bos = true\nfinetune.train_decoder_blocks = true\n");
    auto m = c.model_config(300);
    CHECK(m.vocab_size == 301);
    CHECK(m.bos_token == std::optional<TokenId>(300));
    auto t = c.finetune_config();
    CHECK(t.seed == 9);
    CHECK(t.trainable.decoder_blocks);
    c.set("model.n_heads=3");
    CHECK_THROWS_AS(c.model_config(300), ConfigError);
  }
  CHECK(fnv1a64("") == 14695981039346656037ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("prepare-data on the nested example") {
  Scratch s("prepare");
  spit(s.dir / "pm1.txt", kNestedDoc);
  auto c = RunConfig::parse(base_config(s.dir, (s.dir / "pm1.txt").string()));
  std::ostringstream log;
  const fs::path out = cmd_prepare_data(c, log);
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(manifest["documents"] == 1);
  CHECK(manifest["instances"] == 2);
  CHECK(slurp(out / "config.resolved") == c.resolved());
  const auto train = load_split(out, "train");
  REQUIRE(train.size() == 2);
  CHECK(train[1].id == "pm1/L1");
  CHECK(load_split(out, "eval").empty());

  // Idempotent: a second run rewrites identical bytes.
  const std::string first = slurp(out / "train.txt") + slurp(out / "tokenizer.txt") + slurp(out / "manifest.json");
  cmd_prepare_data(c, log);
  CHECK(slurp(out / "train.txt") + slurp(out / "tokenizer.txt") + slurp(out / "manifest.json") == first);

  SUBCASE("missing inputs") {
    auto bad = c;
    bad.set("paths.corpus=" + (s.dir / "absent.txt").string());
    CHECK(error_of([&] { cmd_prepare_data(bad, log); }).rfind("io: ", 0) == 0);
    bad.set("paths.corpus=");
    CHECK(error_of([&] { cmd_prepare_data(bad, log); }).rfind("config: ", 0) == 0);
    spit(s.dir / "broken.txt", "doc\tx\ty\nA\tB\n1\n");
    bad.set("paths.corpus=" + (s.dir / "broken.txt").string());
    CHECK(error_of([&] { cmd_prepare_data(bad, log); }).rfind("format: ", 0) == 0);
  }
}

TEST_CASE("the command chain") {
  Scratch s("chain");
  // Every document is the word "a" repeated, so after BPE every scored token
  // is " a" and a trained model approaches perplexity 1.
  std::string corpus;
  for (int d = 0; d < 12; ++d) {
    corpus += "doc\tr" + std::to_string(d) + "\tnews\n";
    std::string words, ents;
    for (int i = 0; i < 30; ++i) {
      words += (i ? "\t" : "") + std::string("a");
      ents += (i ? "\t" : "") + std::string(i % 4 == 0 ? "1" : "0");
    }
    corpus += words + "\n" + ents + "\n\n";
  }
  spit(s.dir / "rep.txt", corpus);
  auto c = RunConfig::parse(base_config(s.dir, (s.dir / "rep.txt").string()) +
                            "data.holdout_fraction = 0.25\n"
                            "pretrain.epochs = 30\npretrain.batch_size = 4\npretrain.lr_start = 0.02\n"
                            "finetune.epochs = 2\nfinetune.batch_size = 4\nfinetune.lr_start = 0.001\n");
  std::ostringstream log;

  const std::string early = error_of([&] { cmd_finetune(c, log); });
  CHECK(early.rfind("io: ", 0) == 0);
  CHECK(early.find("`pretrain`") != std::string::npos);  // names the nearest missing stage
  CHECK(error_of([&] { cmd_pretrain(c, log); }).find("`prepare-data`") != std::string::npos);
  cmd_prepare_data(c, log);
  cmd_pretrain(c, log);
  cmd_finetune(c, log);

  auto base_eval = c;
  base_eval.set("eval.model=base");
  const fs::path dir = cmd_eval(base_eval, "ppl", log);
  const EvalReport report = load_report(dir / "ppl.report");
  CHECK(report.aggregate("ppl") == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(report.examples.size() == 3);

  const fs::path ft_dir = cmd_eval(c, "ppl", log);
  CHECK(ft_dir != dir);
  std::ostringstream cmp;
  const TTestResult self = cmd_compare(dir / "ppl.report", dir / "ppl.report", cmp);
  CHECK(self.t == 0.0);
  CHECK(self.p == 1.0);
  CHECK(cmp.str().rfind("t\t0\np\t1\n", 0) == 0);

  std::ostringstream inspect;
  cmd_inspect_entities(run_layout(c).finetune / "store.archive", inspect);
  CHECK(inspect.str().find("id\tnorm\tdistance_to_ones\n") != std::string::npos);

  SUBCASE("bad eval requests") {
    CHECK(error_of([&] { cmd_eval(c, "bleu", log); }).rfind("config: ", 0) == 0);
    CHECK(error_of([&] { cmd_eval(c, "cbt", log); }).rfind("config: ", 0) == 0);
    auto delta = c;
    delta.set("eval.delta=1.5");
    CHECK(error_of([&] { cmd_eval(delta, "ppl", log); }).rfind("config: ", 0) == 0);
  }
  SUBCASE("a checkpoint that disagrees with the configuration") {
    const fs::path ckpt = run_layout(c).base / "base.ckpt";
    auto meta = nlohmann::json::parse(slurp(ckpt.string() + ".json"));
    meta["config"]["init_std"] = 0.5;
    spit(ckpt.string() + ".json", meta.dump());
    const std::string msg = error_of([&] { cmd_finetune(c, log); });
    CHECK(msg.rfind("checkpoint: ", 0) == 0);
    CHECK(exit_code_for(CheckpointError("x")) == 6);
  }
  SUBCASE("comparing different tasks") {
    EvalReport other = report;
    other.task = "cbt";
    save_report(s.dir / "other.report", other);
    CHECK(error_of([&] { cmd_compare(dir / "ppl.report", s.dir / "other.report", cmp); }).rfind("value: ", 0) == 0);
  }
}

TEST_CASE("error categories and exit codes") {
  CHECK(std::string(error_category(ConfigError("x"))) == "config");
  CHECK(std::string(error_category(std::runtime_error("x"))) == "internal");
  CHECK(exit_code_for(ConfigError("x")) == 3);
  CHECK(exit_code_for(IoError("x")) == 4);
  CHECK(exit_code_for(FormatError("x")) == 5);
  CHECK(exit_code_for(ValueError("x")) == 1);
}
