// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsbel/checkpoint.hpp"
#include "dsbel/dataset.hpp"
#include "dsbel/ensemble.hpp"
#include "dsbel/metrics.hpp"
#include "dsbel/train.hpp"
#include "oracles.hpp"

using namespace dsbel;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void verdict(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

int run(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  return compute_metrics(confusion(predicted, truth)).accuracy;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const int code = run(std::string("\"") + DSBEL_GRADIENT_SUITE + "\"");
  const double secs = seconds_since(t0);
  verdict(code == 0 && secs < 60.0, "gradient-suite",
          fmt("finite-difference suite exit %d in %.1f s (limit 60 s)", code, secs));
}

void split_fidelity() {
  LabeledDataset ds;
  for (int i = 0; i < 2486; ++i) ds.add(GrayImage(1, 1), Label::Benign, {});
  for (int i = 0; i < 1473; ++i) ds.add(GrayImage(1, 1), Label::Malware, {});
  const SplitPlan plan = split_dataset(ds, 1);
  std::size_t test[2] = {0, 0}, rest[2] = {0, 0};
  for (auto i : plan.test) ++test[ds.items[i].label == Label::Malware];
  for (const auto* part : {&plan.train, &plan.validation})
    for (auto i : *part) ++rest[ds.items[i].label == Label::Malware];
  const bool ok = test[0] == 745 && test[1] == 441 && rest[0] == 1741 && rest[1] == 1032;
  verdict(ok, "split-fidelity",
          fmt("test (%zu, %zu), train+val (%zu, %zu); expected (745, 441), (1741, 1032)", test[0], test[1], rest[0],
              rest[1]));
}

void metrics_oracle() {
  Rng rng(2024);
  double worst_metric = 0.0;
  for (int t = 0; t < 1000; ++t) {
    ConfusionMatrix cm{static_cast<std::int64_t>(rng.below(5000)), static_cast<std::int64_t>(rng.below(5000)),
                       static_cast<std::int64_t>(rng.below(5000)), static_cast<std::int64_t>(rng.below(5000))};
    if (cm.total() == 0) cm.tn = 1;
    const MetricsRecord m = compute_metrics(cm);
    const auto o = oracle::metrics(static_cast<double>(cm.tp), static_cast<double>(cm.tn), static_cast<double>(cm.fp),
                                   static_cast<double>(cm.fn));
    for (auto [a, b] : {std::pair{m.accuracy, o.accuracy}, {m.precision, o.precision}, {m.recall, o.recall},
                        {m.f1, o.f1}, {m.mcc, o.mcc}})
      worst_metric = std::max(worst_metric, std::abs(a - b) / std::max(1.0, std::abs(b)));
  }
  double worst_auc = 0.0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = t % 2 ? rng.uniform() : static_cast<double>(rng.below(8));
    }
    y[0] = 0;
    y[1] = 1;
    worst_auc = std::max(worst_auc, std::abs(roc_auc(s, y).auc - oracle::auc_pairs(s, y)));
  }
  verdict(worst_metric <= 1e-12 && worst_auc <= 1e-9, "metrics-oracle",
          fmt("worst metric rel. error %.2e (limit 1e-12), worst AUC error %.2e (limit 1e-9)", worst_metric,
              worst_auc));
}

void round_trips() {
  const fs::path dir = fs::temp_directory_path() / "dsbel_acceptance_roundtrip";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(5);

  ModelConfig mc;
  mc.seed = 5;
  Model m = Model::build(mc);
  const std::string ck_path = (dir / "m.dsbl").string();
  save_checkpoint(m, ck_path);
  Checkpoint back = load_checkpoint(ck_path);
  const auto first = read_file_bytes(ck_path);
  const auto second = encode_checkpoint(back.model);
  bool params_equal = true;
  auto a = m.parameters();
  auto b = back.model.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    params_equal = params_equal && std::equal(a[i].value.begin(), a[i].value.end(), b[i].value.begin(), b[i].value.end());
  const bool ck_ok = params_equal && first == second && back.model.config() == mc;

  bool pgm_ok = true;
  for (int t = 0; t < 50; ++t) {
    GrayImage img(1 + static_cast<int>(rng.below(200)), 1 + static_cast<int>(rng.below(200)));
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const std::string p = (dir / "x.pgm").string();
    write_pgm(img, p);
    pgm_ok = pgm_ok && read_pgm(p) == img;
  }

  bool bytes_ok = true;
  for (int t = 0; t < 200; ++t) {
    std::vector<std::uint8_t> blob(1 + rng.below(20000));
    for (auto& v : blob) v = static_cast<std::uint8_t>(rng.below(256));
    const GrayImage img = bytes_to_image(blob);
    bytes_ok = bytes_ok && std::equal(blob.begin(), blob.end(), img.pixels.begin()) &&
               std::all_of(img.pixels.begin() + static_cast<std::ptrdiff_t>(blob.size()), img.pixels.end(),
                           [](std::uint8_t v) { return v == 0; });
  }
  verdict(ck_ok && pgm_ok && bytes_ok, "round-trips",
          fmt("checkpoint %s (%zu bytes), PGM %s (50 images), bytes_to_image %s (200 blobs)", ck_ok ? "exact" : "differs",
              first.size(), pgm_ok ? "exact" : "differs", bytes_ok ? "invertible" : "differs"));
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / "dsbel_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "tiny.cfg") << "stm_widths=4,4,4\ninput_side=32\nfusion_width=16\nepochs=4\n"
                                     "pretrain_epochs=1\nsurrogate_per_class=8\n";
  const std::string cli = std::string("\"") + DSBEL_CLI + "\"";
  bool ok = true;
  for (const char* run_name : {"a", "b"}) {
    const fs::path model = dir / (std::string(run_name) + ".dsbl");
    ok = ok && run(cli + " train --synthetic 20 --seed 11 --config \"" + (dir / "tiny.cfg").string() + "\" --out \"" +
                   model.string() + "\"") == 0;
    ok = ok && run(cli + " fit-ensemble --model \"" + model.string() + "\"") == 0;
    ok = ok && run(cli + " eval --model \"" + model.string() + "\" --report \"" +
                   (dir / (std::string("report_") + run_name)).string() + "\"") == 0;
  }
  const bool history = ok && slurp(dir / "a.history.csv") == slurp(dir / "b.history.csv");
  const bool report = ok && slurp(dir / "report_a" / "report.csv") == slurp(dir / "report_b" / "report.csv") &&
                      !slurp(dir / "report_a" / "report.csv").empty();
  const bool svgs = ok && slurp(dir / "report_a" / "roc.svg") == slurp(dir / "report_b" / "roc.svg") &&
                    slurp(dir / "report_a" / "pr.svg") == slurp(dir / "report_b" / "pr.svg");
  verdict(history && report && svgs, "determinism",
          fmt("CLI runs %s; history %s, report.csv %s, SVGs %s", ok ? "succeeded" : "failed",
              history ? "identical" : "differ", report ? "identical" : "differ", svgs ? "identical" : "differ"));
}

// Default network on the synthetic corpus; also feeds the architecture and
// ensemble criteria.
void desk_scale() {
  const auto t0 = Clock::now();
  const std::uint64_t seed = 7;
  const LabeledDataset ds = generate_synthetic_corpus(100, 64, seed);
  const SplitPlan plan = split_dataset(ds, seed);
  ModelConfig mc;
  mc.seed = seed;
  Model model = Model::build(mc);
  TrainConfig tc;
  tc.seed = seed;

  const auto widths = mc.merged_widths();
  const bool widths_ok = widths == std::vector<int>{128, 256, 512} && mc.boosted_channels() == 1536;

  pretrain_auxiliary(model, generate_surrogate_textures(tc.surrogate_per_class, mc.input_side, seed + 1),
                     tc.pretrain_epochs, tc);
  const auto aux_before = aux_parameter_bytes(model);
  TrainResult r = train(model, ds, plan, tc, [](const EpochRecord& e) {
    std::fprintf(stderr, "  epoch %d loss %.4f acc %.3f val_acc %.3f (%.1f s)\n", e.epoch, e.train_loss,
                 e.train_accuracy, e.val_accuracy, e.seconds);
  });
  const double train_secs = seconds_since(t0);
  const bool aux_ok = aux_parameter_bytes(r.best_model) == aux_before && aux_parameter_bytes(r.final_model) == aux_before;
  verdict(widths_ok && aux_ok, "architecture-ledger",
          fmt("merged widths [%d, %d, %d], boosted channels %d, frozen aux stem %s across %d epochs", widths[0],
              widths[1], widths[2], mc.boosted_channels(), aux_ok ? "byte-stable" : "changed",
              static_cast<int>(r.history.epochs.size())));

  // The delivered model is the best-validation checkpoint.
  const Scores tr = score(r.best_model, ds, plan.train);
  const Scores te = score(r.best_model, ds, plan.test);
  const double train_acc = accuracy(tr.predictions, tr.labels);
  const double test_acc = accuracy(te.predictions, te.labels);
  const bool learn_ok = train_acc >= 95.0 && test_acc >= 90.0 && train_secs < 600.0 && tc.epochs <= 20;
  verdict(learn_ok, "desk-scale-learning",
          fmt("%zu train / %zu test images, best epoch %d of %d: train %.2f%%, test %.2f%%, %.0f s (limits 95%%, "
              "90%%, 600 s)",
              plan.train.size(), plan.test.size(), r.history.best_epoch, tc.epochs, train_acc, test_acc, train_secs));

  const FeatureMatrix train_f = extract_feature_matrix(r.best_model, ds, plan.train);
  const FeatureMatrix test_f = extract_feature_matrix(r.best_model, ds, plan.test);
  EnsembleOptions eo;
  eo.svm.seed = seed;
  eo.mlp.seed = seed;
  const ClassifierEnsemble ens = fit_ensemble(train_f, eo);
  const EnsemblePrediction p = ens.predict(test_f);
  const double a_svm = accuracy(p.svm.labels, test_f.labels);
  const double a_mlp = accuracy(p.mlp.labels, test_f.labels);
  const double a_ada = accuracy(p.adaboost.labels, test_f.labels);
  const double a_ens = accuracy(p.labels, test_f.labels);
  bool votes_ok = true;
  for (int mask = 0; mask < 8; ++mask) {
    const std::array<int, 3> v{mask & 1, (mask >> 1) & 1, (mask >> 2) & 1};
    votes_ok = votes_ok && majority_vote(v) == (v[0] + v[1] + v[2] >= 2 ? 1 : 0);
  }
  const double floor = std::min({a_svm, a_mlp, a_ada});
  verdict(a_ens >= floor && votes_ok, "ensemble-lift",
          fmt("test accuracy SVM %.2f%%, MLP %.2f%%, AdaBoostM1 %.2f%%, DSBEL %.2f%% (>= min %.2f%%); 8 vote "
              "patterns %s",
              a_svm, a_mlp, a_ada, a_ens, floor, votes_ok ? "hold" : "violated"));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  gradient_suite();
  split_fidelity();
  metrics_oracle();
  desk_scale();
  determinism();
  round_trips();
  std::printf("%d failure(s), %.0f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
