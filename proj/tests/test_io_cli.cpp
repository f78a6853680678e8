#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "vbltr/cli.hpp"

using namespace vbltr;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("vbltr_test_" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "vbltr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

FittedModel small_model(std::mt19937_64& rng, std::size_t rank = 2) {
  const Dataset d = planted_dataset({3, 2, 2}, 30, rng);
  Hyperparams hp;
  hp.rank = rank;
  hp.max_iters = 10;
  hp.seed = 8;
  const FitReport r = fit(d, hp);
  return FittedModel{r.state, r.hp, 0.42, 300, 77, r.elbo_trace};
}

}  // namespace

TEST(DatasetFile, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(1);
  const Dataset d = random_dataset({3, 4, 2}, 9, rng);
  TempDir tmp;
  save_dataset(tmp / "d.vtns", d);
  const Dataset back = load_dataset(tmp / "d.vtns");
  EXPECT_EQ(back.dims, d.dims);
  EXPECT_EQ(back.labels, d.labels);
  ASSERT_EQ(back.covariates.size(), d.covariates.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(back.covariates[i], d.covariates[i]);
}

TEST(DatasetFile, HeaderArithmetic) {
  Dataset d{{2, 2, 2}, {DenseTensor(Dims{2, 2, 2})}, {-1}};
  const auto bytes = encode_dataset(d);
  EXPECT_EQ(bytes.size(), 89u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VTNS");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 3);  // order
  EXPECT_EQ(static_cast<std::int8_t>(bytes.back()), -1);
}

TEST(DatasetFile, TruncationAtEveryLength) {
  std::mt19937_64 rng(2);
  const auto bytes = encode_dataset(random_dataset({2, 3}, 3, rng));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    const std::vector<unsigned char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    EXPECT_THROW(decode_dataset(cut), TruncationError) << "length " << len;
  }
}

TEST(DatasetFile, DistinctErrors) {
  std::mt19937_64 rng(3);
  const auto good = encode_dataset(random_dataset({2, 2}, 2, rng));
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_dataset(bad), MagicError);
  bad = good;
  bad.back() = 0;
  EXPECT_THROW(decode_dataset(bad), LabelError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_dataset(bad), SchemaError);
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(decode_dataset(bad), DataError);
  EXPECT_THROW(load_dataset("/nonexistent/file.vtns"), DataError);
}

TEST(ModelFile, RoundTripReproducesProbabilities) {
  std::mt19937_64 rng(4);
  const FittedModel m = small_model(rng);
  TempDir tmp;
  save_model(tmp / "m.json", m);
  const FittedModel back = load_model(tmp / "m.json");
  EXPECT_EQ(back.threshold, m.threshold);
  EXPECT_EQ(back.draws, m.draws);
  EXPECT_EQ(back.seed, m.seed);
  EXPECT_EQ(back.elbo_trace, m.elbo_trace);
  EXPECT_EQ(back.state.xi, m.state.xi);
  EXPECT_EQ(back.state.margins[2][1].mean, m.state.margins[2][1].mean);
  EXPECT_EQ(back.state.margins[0][0].cov_chol, m.state.margins[0][0].cov_chol);
  EXPECT_EQ(back.state.scales.tau, m.state.scales.tau);
  EXPECT_EQ(back.hp.restarts, m.hp.restarts);
  const Predictor a(m), b(back);
  for (int i = 0; i < 10; ++i) {
    const DenseTensor x = random_tensor({3, 2, 2}, rng);
    EXPECT_EQ(a.probability(x), b.probability(x));
  }
}

TEST(ModelFile, InconsistentFieldsAreRejected) {
  std::mt19937_64 rng(5);
  const FittedModel m = small_model(rng);
  json j = to_json(m);
  j["rank"] = 3;
  EXPECT_THROW(model_from_json(j), SchemaError);
  j = to_json(m);
  j["hyperparams"]["rank"] = 1;
  j["rank"] = 1;
  EXPECT_THROW(model_from_json(j), SchemaError);
  j = to_json(m);
  j["schema_version"] = 99;
  EXPECT_THROW(model_from_json(j), SchemaError);
  j = to_json(m);
  j["margins"][0][0]["mean"] = std::vector<double>{1.0};
  EXPECT_THROW(model_from_json(j), SchemaError);
  j = to_json(m);
  j["threshold"] = 1.5;
  EXPECT_THROW(model_from_json(j), SchemaError);
}

TEST(Format, ShortestDoublesReadBackExactly) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::uint64_t> bits;
  int checked = 0;
  while (checked < 10000) {
    const double v = std::bit_cast<double>(bits(rng));
    if (!std::isfinite(v)) continue;
    const std::string s = format_double(v);
    EXPECT_EQ(std::strtod(s.c_str(), nullptr), v) << s;
    const json j = v;
    EXPECT_EQ(json::parse(j.dump()).get<double>(), v);
    ++checked;
  }
}

TEST(Cli, SimulateFitPredictEvaluate) {
  TempDir tmp;
  const std::string data = (tmp / "train.vtns").string();
  auto r = cli({"simulate", "--n1", "30", "--n2", "30", "--dims", "4,3,2", "--support", "0:2,0:2,0:1",
                "--mu2", "0.5", "--seed", "3", "--out", data, "--truth", (tmp / "w.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_dataset(data).size(), 60u);
  const DenseTensor w = tensor_from_json(json::parse(detail::read_text(tmp / "w.json")));
  EXPECT_EQ(w.dims(), (Dims{4, 3, 2}));

  const std::string model = (tmp / "m.json").string();
  r = cli({"fit", "--data", data, "--rank", "2", "--max-iters", "10", "--restarts", "1", "--out", model});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("0 "), std::string::npos);
  const FittedModel m = load_model(model);
  EXPECT_EQ(m.state.rank, 2u);
  EXPECT_GT(m.threshold, 0.0);

  const std::string scores = (tmp / "s.csv").string();
  r = cli({"predict", "--model", model, "--data", data, "--out", scores});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = detail::read_text(scores);
  EXPECT_EQ(csv.rfind("id,probability,label\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 61);

  r = cli({"evaluate", "--model", model, "--data", data});
  ASSERT_EQ(r.code, 0) << r.err;
  const json metrics = json::parse(r.out);
  std::vector<std::string> keys;
  for (const auto& [k, v] : metrics.items()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  EXPECT_EQ(keys, (std::vector<std::string>{"accuracy", "auc", "f1", "precision", "sensitivity",
                                            "specificity"}));

  r = cli({"rank-select", "--data", data, "--ranks", "1,2", "--max-iters", "5", "--restarts", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rs = json::parse(r.out);
  EXPECT_EQ(rs.at("fits").size(), 2u);
}

TEST(Cli, ExitCodes) {
  TempDir tmp;
  const std::string data = (tmp / "d.vtns").string();
  const std::string other = (tmp / "o.vtns").string();
  ASSERT_EQ(cli({"simulate", "--n1", "10", "--n2", "10", "--dims", "3,2,2", "--support", "0:1,0:1,0:1",
                 "--out", data}).code, 0);
  ASSERT_EQ(cli({"simulate", "--n1", "5", "--n2", "5", "--dims", "2,2,2", "--support", "0:1,0:1,0:1",
                 "--out", other}).code, 0);
  const std::string model = (tmp / "m.json").string();
  ASSERT_EQ(cli({"fit", "--data", data, "--max-iters", "3", "--restarts", "1", "--out", model}).code, 0);

  // dimension mismatch is a data error
  auto r = cli({"predict", "--model", model, "--data", other, "--out", (tmp / "s.csv").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
  // usage errors
  EXPECT_EQ(cli({"fit", "--data", data}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"fit", "--data", data, "--rank", "0", "--out", model}).code, 1);
  EXPECT_EQ(cli({"fit", "--data", data, "--formula-mode", "guess", "--out", model}).code, 1);
  // unreadable input
  EXPECT_EQ(cli({"fit", "--data", (tmp / "missing").string(), "--out", model}).code, 2);
}

TEST(Cli, ExperimentReportIsDeterministic) {
  TempDir tmp;
  const std::vector<std::string> base{"experiment", "--n1", "15", "--n2", "15", "--dims", "3,3,2",
                                      "--support", "0:2,0:2,0:1", "--seed", "4", "--replications",
                                      "2", "--ranks", "1,2", "--max-iters", "8", "--draws", "100"};
  auto a = base;
  a.insert(a.end(), {"--out", (tmp / "a.json").string(), "--timing", (tmp / "t.json").string()});
  auto b = base;
  b.insert(b.end(), {"--out", (tmp / "b.json").string()});
  ASSERT_EQ(cli(a).code, 0);
  ASSERT_EQ(cli(b).code, 0);
  EXPECT_EQ(detail::read_text(tmp / "a.json"), detail::read_text(tmp / "b.json"));
  const json rep = json::parse(detail::read_text(tmp / "a.json"));
  EXPECT_EQ(rep.at("replications").size(), 2u);
  EXPECT_FALSE(rep.at("replications")[0].contains("ctime"));
  EXPECT_EQ(json::parse(detail::read_text(tmp / "t.json")).size(), 2u);
}

TEST(Cli, BinaryRuns) {
  const std::string cmd = std::string(VBLTR_CLI_PATH) + " --help > /dev/null";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  const std::string bad = std::string(VBLTR_CLI_PATH) + " predict 2> /dev/null";
  const int status = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(status), 1);
}
