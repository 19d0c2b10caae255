#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsbel/checkpoint.hpp"
#include "dsbel/dataset.hpp"
#include "dsbel/ensemble.hpp"
#include "dsbel/metrics.hpp"
#include "dsbel/model.hpp"
#include "dsbel/report.hpp"
#include "dsbel/train.hpp"

#ifndef DSBEL_VERSION
#define DSBEL_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace dsbel;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::string_view kDataTag = "DATA";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string read_text(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& where) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

// Keys shared by both configs (seed) apply to both.
void apply_config_file(const std::string& path, ModelConfig& mc, TrainConfig& tc) {
  for (const auto& [key, value] : parse_key_values(read_text(path), path)) {
    bool known = false;
    try {
      known |= mc.set(key, value);
      known |= tc.set(key, value);
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "': invalid value '" + value + "'");
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
}

// Where the images come from and which seed drives the split.
struct DataSource {
  std::string dir;
  int synthetic = 0;  // images per class
  std::uint64_t seed = 0;
  bool from_flags = false;

  std::string describe() const {
    return synthetic > 0 ? "synthetic:" + std::to_string(synthetic) : "dir:" + dir;
  }
};

Section data_section(const DataSource& src) {
  std::ostringstream os;
  if (src.synthetic > 0) os << "source=synthetic\nsynthetic=" << src.synthetic << "\n";
  else os << "source=dir\ndata=" << src.dir << "\n";
  os << "seed=" << src.seed << "\n";
  const std::string text = os.str();
  Section s;
  std::copy(kDataTag.begin(), kDataTag.end(), s.tag.begin());
  s.payload.assign(text.begin(), text.end());
  return s;
}

DataSource data_from_section(const Section& s) {
  const auto kv = parse_key_values(std::string(s.payload.begin(), s.payload.end()), "checkpoint DATA section");
  DataSource src;
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError(std::string("checkpoint DATA section lacks '") + k + "'");
    return it->second;
  };
  if (get("source") == "synthetic") src.synthetic = std::stoi(get("synthetic"));
  else src.dir = get("data");
  src.seed = std::stoull(get("seed"));
  return src;
}

LabeledDataset load_source(const DataSource& src, int side) {
  if (src.synthetic > 0) return generate_synthetic_corpus(src.synthetic, side, src.seed);
  std::vector<std::string> warnings;
  auto ds = load_dataset(src.dir, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  return ds;
}

// Options shared by the subcommands that read a checkpoint and a dataset.
struct SourceFlags {
  std::string data;
  int synthetic = 0;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* cmd) {
    auto* d = cmd->add_option("--data", data, "Dataset root with benign/ and malware/ PGM folders");
    auto* s = cmd->add_option("--synthetic", synthetic, "Generate a synthetic corpus with this many images per class")
                  ->check(CLI::PositiveNumber);
    d->excludes(s);
    seed_opt = cmd->add_option("--seed", seed, "Corpus and split seed");
  }

  // Falls back to the source recorded in the checkpoint.
  DataSource resolve(const Checkpoint* ckpt) const {
    DataSource src;
    if (!data.empty() || synthetic > 0) {
      src.dir = data;
      src.synthetic = synthetic;
      src.from_flags = true;
      if (ckpt)
        if (const Section* s = ckpt->find(kDataTag)) src.seed = data_from_section(*s).seed;
    } else if (ckpt && ckpt->find(kDataTag)) {
      src = data_from_section(*ckpt->find(kDataTag));
    } else {
      throw UsageError("no data source: pass --data or --synthetic");
    }
    if (*seed_opt) src.seed = seed;
    return src;
  }
};

std::vector<std::size_t> select_split(const SplitPlan& plan, const std::string& name, std::size_t n) {
  if (name == "all") {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  return plan.get(name);
}

nlohmann::ordered_json manifest_base(const std::string& subcommand, Clock::time_point t0) {
  nlohmann::ordered_json j;
  j["subcommand"] = subcommand;
  j["tool_version"] = DSBEL_VERSION;
  j["wall_clock_seconds"] = seconds_since(t0);
  return j;
}

void write_manifest(const std::string& path, nlohmann::ordered_json j, Clock::time_point t0) {
  j["wall_clock_seconds"] = seconds_since(t0);
  write_text(path, j.dump(2) + "\n");
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

// convert -----------------------------------------------------------------------

struct ConvertArgs {
  std::string in;
  std::string out;
};

int run_convert(const ConvertArgs& a) {
  const auto t0 = Clock::now();
  if (!fs::is_directory(a.in)) throw DataError("convert: input directory '" + a.in + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a.in))
    if (!e.is_directory()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) std::cerr << "warning: no files under '" << a.in << "'\n";
  fs::create_directories(a.out);
  int failed = 0;
  nlohmann::ordered_json outputs = nlohmann::ordered_json::array();
  for (const auto& f : files) {
    const fs::path rel = fs::relative(f, a.in);
    fs::path dst = fs::path(a.out) / rel;
    dst += ".pgm";
    try {
      const auto bytes = read_file_bytes(f.string());
      const GrayImage img = bytes_to_image(bytes);
      fs::create_directories(dst.parent_path());
      write_pgm(img, dst.string());
      outputs.push_back(dst.string());
    } catch (const std::exception& e) {
      std::cerr << "error: " << f.string() << ": " << e.what() << "\n";
      ++failed;
    }
  }
  auto j = manifest_base("convert", t0);
  j["inputs"] = {{"in", a.in}};
  j["outputs"] = outputs;
  j["failed"] = failed;
  write_manifest((fs::path(a.out) / "manifest.json").string(), j, t0);
  std::cerr << "converted " << outputs.size() << " of " << files.size() << " files\n";
  return failed ? kExitData : kExitOk;
}

// train -------------------------------------------------------------------------

struct TrainArgs {
  SourceFlags source;
  std::string config;
  std::string out;
  bool deterministic = true;
};

int run_train(const TrainArgs& a) {
  const auto t0 = Clock::now();
  ModelConfig mc;
  TrainConfig tc;
  if (!a.config.empty()) apply_config_file(a.config, mc, tc);
  if (*a.source.seed_opt) mc.seed = tc.seed = a.source.seed;
  tc.deterministic = a.deterministic;
  mc.validate();
  tc.validate();

  DataSource src;
  src.dir = a.source.data;
  src.synthetic = a.source.synthetic;
  src.seed = tc.seed;
  if (src.dir.empty() && src.synthetic == 0) throw UsageError("train: pass --data or --synthetic");
  const LabeledDataset ds = load_source(src, mc.input_side);
  const SplitPlan plan = split_dataset(ds, src.seed);
  std::cerr << "data " << src.describe() << ": " << ds.count(Label::Benign) << " benign, "
            << ds.count(Label::Malware) << " malware; split " << plan.train.size() << "/" << plan.validation.size()
            << "/" << plan.test.size() << "\n";

  Model model = Model::build(mc);
  const LabeledDataset surrogate =
      generate_surrogate_textures(std::max(1, tc.surrogate_per_class), mc.input_side, tc.seed + 1);
  const auto surrogate_loss = pretrain_auxiliary(model, surrogate, tc.pretrain_epochs, tc);
  for (std::size_t i = 0; i < surrogate_loss.size(); ++i)
    std::fprintf(stderr, "surrogate epoch %zu loss %.4f\n", i + 1, surrogate_loss[i]);

  auto result = train(model, ds, plan, tc, [&](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f (%.1fs)\n", r.epoch, tc.epochs,
                 r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.seconds);
  });

  if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
  const std::vector<Section> sections{data_section(src)};
  const std::string final_path = sibling(a.out, ".final.dsbl");
  const std::string history_path = sibling(a.out, ".history.csv");
  save_checkpoint(result.best_model, a.out, sections);
  save_checkpoint(result.final_model, final_path, sections);
  write_text(history_path, result.history.to_csv());

  auto j = manifest_base("train", t0);
  j["seed"] = tc.seed;
  j["config"] = {{"model", mc.to_text()}, {"train", tc.to_text()}};
  j["inputs"] = {{"data", src.describe()}, {"config", a.config}};
  j["outputs"] = {{"best", a.out}, {"final", final_path}, {"history", history_path}};
  j["best_epoch"] = result.history.best_epoch;
  write_manifest(sibling(a.out, ".manifest.json"), j, t0);
  std::cerr << "best epoch " << result.history.best_epoch << ", wrote " << a.out << "\n";
  return kExitOk;
}

// features ----------------------------------------------------------------------

struct FeaturesArgs {
  std::string model;
  SourceFlags source;
  std::string split = "test";
  std::string out;
};

int run_features(const FeaturesArgs& a) {
  const auto t0 = Clock::now();
  const Checkpoint ckpt = load_checkpoint(a.model);
  const DataSource src = a.source.resolve(&ckpt);
  const LabeledDataset ds = load_source(src, ckpt.model.config().input_side);
  const auto idx = select_split(split_dataset(ds, src.seed), a.split, ds.size());
  const FeatureMatrix fm = extract_feature_matrix(ckpt.model, ds, idx);
  if (!fs::path(a.out).parent_path().empty()) fs::create_directories(fs::path(a.out).parent_path());
  write_text(a.out, feature_matrix_to_csv(fm));
  auto j = manifest_base("features", t0);
  j["seed"] = src.seed;
  j["inputs"] = {{"model", a.model}, {"data", src.describe()}, {"split", a.split}};
  j["outputs"] = {{"features", a.out}};
  j["rows"] = fm.rows;
  j["cols"] = fm.cols;
  write_manifest(sibling(a.out, ".manifest.json"), j, t0);
  std::cerr << "wrote " << fm.rows << "x" << fm.cols << " features to " << a.out << "\n";
  return kExitOk;
}

// fit-ensemble ------------------------------------------------------------------

struct FitArgs {
  std::string model;
  SourceFlags source;
  std::string features;
  std::string split = "train";
  std::string out;
};

double accuracy_of(std::span<const int> pred, std::span<const int> truth) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i] ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(pred.size());
}

int run_fit_ensemble(const FitArgs& a) {
  const auto t0 = Clock::now();
  Checkpoint ckpt = load_checkpoint(a.model);
  FeatureMatrix fm;
  std::string input;
  std::uint64_t seed = ckpt.model.config().seed;
  if (!a.features.empty()) {
    fm = feature_matrix_from_csv(read_text(a.features));
    input = a.features;
  } else {
    const DataSource src = a.source.resolve(&ckpt);
    const LabeledDataset ds = load_source(src, ckpt.model.config().input_side);
    const auto idx = select_split(split_dataset(ds, src.seed), a.split, ds.size());
    fm = extract_feature_matrix(ckpt.model, ds, idx);
    input = src.describe() + " split " + a.split;
    seed = src.seed;
  }
  if (fm.cols != ckpt.model.config().fusion_width)
    throw DataError("fit-ensemble: features have " + std::to_string(fm.cols) + " columns, model emits " +
                    std::to_string(ckpt.model.config().fusion_width));
  EnsembleOptions opt;
  opt.svm.seed = seed;
  opt.mlp.seed = seed;
  const ClassifierEnsemble ens = fit_ensemble(fm, opt);
  const auto pred = ens.predict(fm);
  std::fprintf(stderr, "training accuracy: svm %.4f mlp %.4f adaboost %.4f (%zu stumps) dsbel %.4f\n",
               accuracy_of(pred.svm.labels, fm.labels), accuracy_of(pred.mlp.labels, fm.labels),
               accuracy_of(pred.adaboost.labels, fm.labels), ens.adaboost.stumps.size(),
               accuracy_of(pred.labels, fm.labels));
  ckpt.put(ens.to_section());
  const std::string out = a.out.empty() ? a.model : a.out;
  save_checkpoint(ckpt.model, out, ckpt.sections);
  auto j = manifest_base("fit-ensemble", t0);
  j["seed"] = seed;
  j["inputs"] = {{"model", a.model}, {"features", input}};
  j["outputs"] = {{"model", out}};
  j["rows"] = fm.rows;
  write_manifest(sibling(out, ".ensemble.manifest.json"), j, t0);
  return kExitOk;
}

// eval / report -----------------------------------------------------------------

struct Scored {
  std::string name;
  std::vector<int> predictions;
  std::vector<double> scores;
};

struct ReportInputs {
  std::vector<int> labels;
  std::vector<Scored> models;
  const FeatureMatrix* features = nullptr;
};

ReportFiles render(const std::string& dir, const ReportInputs& in) {
  std::vector<ReportRow> rows;
  std::vector<NamedCurve> roc_curves, pr_curves;
  for (const auto& m : in.models) {
    ReportRow row{m.name, compute_metrics(confusion(m.predictions, in.labels))};
    const RocCurve roc = roc_auc(m.scores, in.labels);
    row.metrics.auc = roc.auc;
    rows.push_back(row);
    roc_curves.push_back({m.name, roc.points, true, roc.auc});
    pr_curves.push_back({m.name, pr_curve(m.scores, in.labels).points, false, 0.0});
  }
  std::vector<double> projection;
  int k = 0;
  if (in.features && in.features->rows >= 2) {
    k = std::min(3, in.features->cols);
    const auto x = to_double(*in.features);
    const PcaModel pca = pca_fit(x, in.features->rows, in.features->cols, k);
    projection = pca.project(x, in.features->rows);
  }
  if (k < 2) projection.clear();
  return emit_report(dir, rows, roc_curves, pr_curves, projection, in.features ? in.features->rows : 0, k,
                     in.features ? std::span<const int>(in.features->labels) : std::span<const int>{});
}

void add_ensemble_rows(const ClassifierEnsemble& ens, const FeatureMatrix& fm, ReportInputs& in) {
  if (fm.cols != ens.dims())
    throw DataError("ensemble expects " + std::to_string(ens.dims()) + " features, got " + std::to_string(fm.cols));
  auto p = ens.predict(fm);
  in.models.push_back({"SVM", p.svm.labels, p.svm.scores});
  in.models.push_back({"MLP", p.mlp.labels, p.mlp.scores});
  in.models.push_back({"AdaBoostM1", p.adaboost.labels, p.adaboost.scores});
  in.models.push_back({"DSBEL", p.labels, p.scores});
}

struct EvalArgs {
  std::string model;
  SourceFlags source;
  std::string split = "test";
  std::string report;
  std::string mode = "all";
};

int run_eval(const EvalArgs& a) {
  const auto t0 = Clock::now();
  const Checkpoint ckpt = load_checkpoint(a.model);
  const Section* ens_section = ckpt.find(kEnsembleTag);
  if (a.mode == "ensemble" && !ens_section)
    throw DataError("eval --mode ensemble: checkpoint '" + a.model + "' has no ensemble; run fit-ensemble first");
  const DataSource src = a.source.resolve(&ckpt);
  const LabeledDataset ds = load_source(src, ckpt.model.config().input_side);
  const auto idx = select_split(split_dataset(ds, src.seed), a.split, ds.size());
  if (idx.empty()) throw DataError("eval: split '" + a.split + "' is empty");

  const FeatureMatrix fm = extract_feature_matrix(ckpt.model, ds, idx);
  ReportInputs in;
  in.labels = fm.labels;
  in.features = &fm;
  if (a.mode != "ensemble") {
    const Scores s = score(ckpt.model, ds, idx);
    in.models.push_back({"CNN", s.predictions, s.malware_probability});
  }
  if (a.mode != "cnn") {
    if (ens_section) add_ensemble_rows(ClassifierEnsemble::from_section(*ens_section), fm, in);
    else std::cerr << "warning: no ensemble in '" << a.model << "'; reporting the CNN only\n";
  }
  const ReportFiles files = render(a.report, in);

  auto j = manifest_base("eval", t0);
  j["seed"] = src.seed;
  j["inputs"] = {{"model", a.model}, {"data", src.describe()}, {"split", a.split}, {"mode", a.mode}};
  j["outputs"] = {{"csv", files.csv}, {"roc", files.roc_svg}, {"pr", files.pr_svg}, {"pca", files.pca_svg}};
  write_manifest((fs::path(a.report) / "manifest.json").string(), j, t0);
  std::cout << read_text(files.csv);
  return kExitOk;
}

struct ReportArgs {
  std::string features;
  std::string model;
  std::string out;
};

// Renders a report from a saved feature CSV; with a model carrying an
// ensemble the CSV and curves are filled in too.
int run_report(const ReportArgs& a) {
  const auto t0 = Clock::now();
  const FeatureMatrix fm = feature_matrix_from_csv(read_text(a.features));
  ReportInputs in;
  in.labels = fm.labels;
  in.features = &fm;
  if (!a.model.empty()) {
    const Checkpoint ckpt = load_checkpoint(a.model);
    const Section* s = ckpt.find(kEnsembleTag);
    if (!s) throw DataError("report: checkpoint '" + a.model + "' has no ensemble");
    add_ensemble_rows(ClassifierEnsemble::from_section(*s), fm, in);
  }
  const ReportFiles files = render(a.out, in);
  auto j = manifest_base("report", t0);
  j["inputs"] = {{"features", a.features}, {"model", a.model}};
  j["outputs"] = {{"csv", files.csv}, {"roc", files.roc_svg}, {"pr", files.pr_svg}, {"pca", files.pca_svg}};
  write_manifest((fs::path(a.out) / "manifest.json").string(), j, t0);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DSBEL malware image classifier: SB-BR-STM CNN with boosted features and a voting ensemble"};
  app.set_version_flag("--version", DSBEL_VERSION);
  app.require_subcommand(1);

  const std::vector<std::string> splits{"train", "validation", "test", "all"};

  ConvertArgs convert_args;
  auto* convert = app.add_subcommand("convert", "Map binary files to grayscale PGM images");
  convert->add_option("--in", convert_args.in, "Directory of binary files")->required();
  convert->add_option("--out", convert_args.out, "Output directory for PGM files")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Pretrain the auxiliary stem, then train the CNN");
  train_args.source.add(train_cmd);
  train_cmd->add_option("--config", train_args.config, "key=value file with model and training settings")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Best-validation checkpoint path")->required();
  train_cmd->add_flag("--deterministic,!--no-deterministic", train_args.deterministic,
                      "Fixed-order reductions (default on)");

  FeaturesArgs features_args;
  auto* features = app.add_subcommand("features", "Write deep features of a split as CSV");
  features->add_option("--model", features_args.model, "Checkpoint")->required();
  features_args.source.add(features);
  features->add_option("--split", features_args.split, "train, validation, test or all")
      ->check(CLI::IsMember(splits));
  features->add_option("--out", features_args.out, "Feature CSV path")->required();

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit-ensemble", "Train SVM, MLP and AdaBoostM1 on deep features");
  fit->add_option("--model", fit_args.model, "Checkpoint")->required();
  fit_args.source.add(fit);
  fit->add_option("--features", fit_args.features, "Feature CSV instead of extracting from data")
      ->check(CLI::ExistingFile);
  fit->add_option("--split", fit_args.split, "Split to train on")->check(CLI::IsMember(splits));
  fit->add_option("--out", fit_args.out, "Output checkpoint (default: update --model in place)");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Score a split and write report.csv and SVG charts");
  eval->add_option("--model", eval_args.model, "Checkpoint")->required();
  eval_args.source.add(eval);
  eval->add_option("--split", eval_args.split, "Split to evaluate")->check(CLI::IsMember(splits));
  eval->add_option("--report", eval_args.report, "Output directory")->required();
  eval->add_option("--mode", eval_args.mode, "cnn, ensemble or all")
      ->check(CLI::IsMember({"cnn", "ensemble", "all"}));

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "Render charts from a feature CSV");
  report->add_option("--features", report_args.features, "Feature CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--model", report_args.model, "Checkpoint with an ensemble, for metrics and curves");
  report->add_option("--out", report_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*convert) return run_convert(convert_args);
    if (*train_cmd) return run_train(train_args);
    if (*features) return run_features(features_args);
    if (*fit) return run_fit_ensemble(fit_args);
    if (*eval) return run_eval(eval_args);
    if (*report) return run_report(report_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
