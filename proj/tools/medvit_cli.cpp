#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "medvit/analysis.hpp"
#include "medvit/attention.hpp"
#include "medvit/checkpoint.hpp"
#include "medvit/config.hpp"
#include "medvit/data.hpp"
#include "medvit/metrics.hpp"
#include "medvit/train.hpp"

using namespace medvit;
namespace fs = std::filesystem;

namespace {

/// Carries a short machine-readable kind for the error line.
struct CliError : std::runtime_error {
  CliError(std::string k, const std::string& msg) : std::runtime_error(msg), kind(std::move(k)) {}
  std::string kind;
};

struct Common {
  std::string config;
  std::string variant;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string images, labels;
  std::string out;
  bool rgb = false;
  std::size_t classes = 0;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CliError("io", "cannot write '" + path + "'");
  return out;
}

/// Writes to --out when given, else stdout.
template <typename F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
  } else {
    auto out = open_out(path);
    write(out);
  }
}

RunConfig run_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = load_run_config(c.config);
  if (!c.variant.empty()) {
    const auto classes = cfg.model.num_classes;
    cfg.model = ModelConfig::variant(c.variant);
    cfg.model.num_classes = classes;
    cfg.train.resolution = cfg.model.resolution;
  }
  if (c.seed_given) cfg.train.seed = c.seed;
  return cfg;
}

data::Dataset dataset(const Common& c, const ModelConfig& model) {
  if (c.images.empty() || c.labels.empty()) throw CliError("usage", "--data-images and --data-labels are required");
  data::IdxOptions opts;
  opts.to_rgb = c.rgb;
  opts.resize = model.resolution;
  opts.classes = c.classes != 0 ? c.classes : model.num_classes;
  auto ds = data::load_idx(c.images, c.labels, opts);
  if (ds.channels() != model.in_channels) {
    throw CliError("data", "images have " + std::to_string(ds.channels()) + " channels, model expects " +
                               std::to_string(model.in_channels) + " (see --rgb)");
  }
  return ds;
}

std::unique_ptr<MedViTModel> model_from_checkpoint(const std::string& path, Checkpoint* out = nullptr) {
  Checkpoint ckpt = load_checkpoint(path);
  auto model = build_model(parse_model_config(ckpt.config));
  restore_model(*model, ckpt);
  if (out != nullptr) *out = std::move(ckpt);
  return model;
}

void add_common(CLI::App* app, Common& c, bool data, bool config) {
  if (config) {
    app->add_option("--config", c.config, "JSON model/train document");
    app->add_option("--variant", c.variant, "T, S, B, L or micro; overrides the config's model");
  }
  app->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) {
        c.seed = s;
        c.seed_given = true;
      }, "random seed");
  if (data) {
    app->add_option("--data-images", c.images, "IDX image file");
    app->add_option("--data-labels", c.labels, "IDX label file");
    app->add_flag("--rgb", c.rgb, "replicate grayscale images to three channels");
    app->add_option("--classes", c.classes, "class count (default: from config or labels)");
  }
  app->add_option("--out", c.out, "output path (stdout when omitted for reports)");
}

std::string fmt(std::optional<double> v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

// eval output row, also the input format of `robustness`
constexpr const char* kEvalHeader = "corruption,severity,samples,loss,acc,auc,bacc";

struct EvalRow {
  std::string corruption;
  int severity = 0;
  double bacc = 0.0;
};

std::vector<EvalRow> read_eval_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("io", "cannot open '" + path + "'");
  std::vector<EvalRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == kEvalHeader || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw CliError("data", "malformed eval row in '" + path + "': " + line);
    try {
      rows.push_back({f[0], std::stoi(f[1]), std::stod(f[6])});
    } catch (const std::logic_error&) {
      throw CliError("data", "malformed eval row in '" + path + "': " + line);
    }
  }
  return rows;
}

int cmd_train(const Common& c, const std::string& val_images, const std::string& val_labels,
              const std::string& resume, const std::string& log_path, std::optional<std::size_t> epochs,
              bool f32) {
  RunConfig cfg = run_config(c);
  if (epochs) cfg.train.epochs = *epochs;
  cfg.train.validate();
  if (c.out.empty()) throw CliError("usage", "train needs --out for the checkpoint");
  const auto train_set = dataset(c, cfg.model);
  std::optional<data::Dataset> val;
  if (!val_images.empty()) {
    Common v = c;
    v.images = val_images;
    v.labels = val_labels;
    val = dataset(v, cfg.model);
    val->split = data::Split::Val;
  }
  auto model = build_model(cfg.model, cfg.train.seed);
  train::Trainer trainer(*model, cfg.train);
  if (!resume.empty()) load_training_state(resume, trainer);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file = open_out(log_path);
    log = &log_file;
  }
  train::write_log_header(*log);
  trainer.fit(train_set, val ? &*val : nullptr, [&](const train::EpochLog& l) {
    train::write_log(*log, l);
    log->flush();
    save_training_state(c.out, trainer, f32 ? Precision::F32 : Precision::F64);
  });
  save_training_state(c.out, trainer, f32 ? Precision::F32 : Precision::F64);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& corruption, int severity,
             bool header) {
  auto model = model_from_checkpoint(checkpoint);
  const auto ds = dataset(c, model->config());
  const auto m = train::evaluate(*model, ds);
  emit(c.out, [&](std::ostream& os) {
    if (header) os << kEvalHeader << "\n";
    os << corruption << "," << severity << "," << m.samples << "," << fmt(m.loss) << "," << fmt(m.accuracy) << ","
       << fmt(m.auc) << "," << fmt(m.bacc) << "\n";
  });
  return 0;
}

int cmd_robustness(const Common& c, const std::vector<std::string>& inputs, const std::string& baseline_path) {
  const auto baseline = metrics::BaselineErrorTable::load(baseline_path);
  std::optional<double> clean;
  std::map<std::string, std::array<std::optional<double>, metrics::kSeverities>> by_corruption;
  for (const auto& path : inputs) {
    for (const auto& row : read_eval_rows(path)) {
      if (row.severity == 0) {
        clean = 1.0 - row.bacc;
        continue;
      }
      if (row.severity < 1 || row.severity > static_cast<int>(metrics::kSeverities)) {
        throw CliError("data", "severity " + std::to_string(row.severity) + " outside 0..5");
      }
      by_corruption[row.corruption][static_cast<std::size_t>(row.severity - 1)] = 1.0 - row.bacc;
    }
  }
  if (!clean) throw CliError("data", "no clean (severity 0) evaluation among the inputs");
  std::vector<metrics::SeverityErrors> errors;
  for (const auto& [name, be] : by_corruption) {
    metrics::SeverityErrors e;
    e.corruption = name;
    e.clean = *clean;
    for (std::size_t s = 0; s < metrics::kSeverities; ++s) {
      if (!be[s]) throw CliError("data", "corruption '" + name + "' lacks severity " + std::to_string(s + 1));
      e.be[s] = *be[s];
    }
    errors.push_back(e);
  }
  const auto report = metrics::aggregate(errors, baseline);
  emit(c.out, [&](std::ostream& os) { metrics::write_report(os, report); });
  return 0;
}

int cmd_corrupt(const Common& c, std::vector<std::string> names) {
  if (c.out.empty()) throw CliError("usage", "corrupt needs --out for the output directory");
  data::IdxOptions opts;
  opts.to_rgb = c.rgb;
  opts.classes = c.classes;
  if (c.images.empty() || c.labels.empty()) throw CliError("usage", "--data-images and --data-labels are required");
  const auto ds = data::load_idx(c.images, c.labels, opts);
  fs::create_directories(c.out);
  if (names.empty()) {
    for (auto k : metrics::all_corruptions()) names.push_back(metrics::corruption_name(k));
  }
  for (const auto& name : names) {
    const auto kind = metrics::parse_corruption(name);
    for (int s = 1; s <= static_cast<int>(metrics::kSeverities); ++s) {
      data::Dataset out = ds;
      std::vector<double> values;
      values.reserve(ds.images.numel());
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const Tensor img = metrics::corrupt_image(ds.image(i), kind, s, c.seed * 1000003ULL + i);
        values.insert(values.end(), img.values().begin(), img.values().end());
      }
      out.images = Tensor(ds.images.shape(), std::move(values));
      const std::string stem = (fs::path(c.out) / (name + "_s" + std::to_string(s))).string();
      data::save_idx(out, stem + "-images.idx", stem + "-labels.idx");
      std::cout << name << "," << s << "," << stem << "-images.idx\n";
    }
  }
  return 0;
}

analysis::RfPattern parse_pattern(const std::string& p) {
  if (p == "full") return analysis::RfPattern::Full;
  if (p == "neighborhood") return analysis::RfPattern::Neighborhood;
  if (p == "dilated") return analysis::RfPattern::Dilated;
  throw CliError("usage", "pattern must be full, neighborhood or dilated");
}

int cmd_rf(const Common& c, const std::string& pattern, std::size_t k, const std::vector<std::size_t>& dilations,
           std::size_t tokens) {
  const auto r = analysis::receptive_field_report(parse_pattern(pattern), k, dilations, tokens, c.seed);
  emit(c.out, [&](std::ostream& os) {
    os << "layer,dilation,analytic_rf,empirical_rf\n";
    for (std::size_t l = 0; l < r.analytic.size(); ++l) {
      os << l + 1 << "," << r.dilations[l] << "," << r.analytic[l] << "," << r.empirical[l] << "\n";
    }
    os << "# upper_bound," << r.upper_bound << "\n";
  });
  return 0;
}

std::unique_ptr<MedViTModel> model_for_analysis(const Common& c, const std::string& checkpoint) {
  if (!checkpoint.empty()) return model_from_checkpoint(checkpoint);
  const auto cfg = run_config(c);
  return build_model(cfg.model, cfg.train.seed);
}

int cmd_cosine(const Common& c, const std::string& checkpoint, std::size_t samples) {
  auto model = model_for_analysis(c, checkpoint);
  const auto ds = dataset(c, model->config());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(samples, ds.size()); ++i) idx.push_back(i);
  const auto profile = analysis::cosine_profile(*model, ds.batch(idx).first);
  emit(c.out, [&](std::ostream& os) { analysis::write_cosine_csv(os, profile); });
  return 0;
}

int cmd_gradcam(const Common& c, const std::string& checkpoint, std::size_t index, std::optional<std::size_t> target,
                const std::string& layer) {
  if (c.out.empty()) throw CliError("usage", "gradcam needs --out for the PGM file");
  auto model = model_for_analysis(c, checkpoint);
  const auto ds = dataset(c, model->config());
  if (index >= ds.size()) throw CliError("usage", "--index beyond the dataset");
  const std::size_t cls = target ? *target : static_cast<std::size_t>(ds.labels[index]);
  const auto map = analysis::grad_cam(*model, ds.batch({index}).first, cls, layer);
  analysis::write_pgm(c.out, analysis::upsample_nearest(map, ds.side(), ds.side()));
  return 0;
}

int cmd_accounting(const Common& c, bool flops) {
  std::vector<ModelConfig> cfgs;
  if (!c.config.empty() || !c.variant.empty()) {
    cfgs.push_back(run_config(c).model);
  } else {
    for (const auto& v : ModelConfig::variant_names()) cfgs.push_back(ModelConfig::variant(v));
  }
  emit(c.out, [&](std::ostream& os) {
    os << (flops ? "model,resolution,macs\n" : "model,params\n");
    for (const auto& cfg : cfgs) {
      auto model = build_model(cfg, 0);
      if (flops) {
        os << cfg.name << "," << cfg.resolution << "," << count_flops(*model, cfg.resolution) << "\n";
      } else {
        os << cfg.name << "," << count_params(*model) << "\n";
      }
    }
  });
  return 0;
}

std::string error_kind(const std::exception& e) {
  if (auto* ce = dynamic_cast<const CliError*>(&e)) return ce->kind;
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const data::DataError*>(&e)) return "data";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const metrics::MetricsError*>(&e)) return "metrics";
  if (dynamic_cast<const FeasibilityError*>(&e)) return "feasibility";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "invalid_argument";
  return "internal";
}

std::string one_line(std::string s) {
  for (auto& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MedViT-style hybrid classifier: training, evaluation and analysis"};
  app.require_subcommand(1);
  Common c;

  auto* train = app.add_subcommand("train", "train a model on an IDX dataset");
  add_common(train, c, true, true);
  std::string val_images, val_labels, resume, log_path;
  std::optional<std::size_t> epochs;
  bool f32 = false;
  train->add_option("--val-images", val_images, "IDX validation images");
  train->add_option("--val-labels", val_labels, "IDX validation labels");
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--log", log_path, "per-epoch CSV log (stdout when omitted)");
  train->add_option("--epochs", epochs, "override the configured epoch count");
  train->add_flag("--f32", f32, "store checkpoint values as 32-bit floats");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint: ACC, AUC, bACC");
  add_common(eval, c, true, false);
  std::string checkpoint, corruption = "clean";
  int severity = 0;
  bool no_header = false;
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--corruption", corruption, "tag written in the row");
  eval->add_option("--severity", severity, "tag written in the row (0 = clean)");
  eval->add_flag("--no-header", no_header, "omit the CSV header");

  auto* robust = app.add_subcommand("robustness", "BE/rBE report from eval rows and a baseline table");
  add_common(robust, c, false, false);
  std::vector<std::string> eval_files;
  std::string baseline;
  robust->add_option("--evals", eval_files, "eval CSV files (clean and corrupted)")->required();
  robust->add_option("--baseline", baseline, "baseline error table")->required();

  auto* corrupt = app.add_subcommand("corrupt", "write corrupted copies of a dataset at 5 severities");
  add_common(corrupt, c, true, false);
  std::vector<std::string> corruption_names;
  corrupt->add_option("--corruptions", corruption_names, "subset of corruptions (default all)")->delimiter(',');

  auto* rf = app.add_subcommand("rf", "receptive-field report of a 1-D attention stack");
  add_common(rf, c, false, false);
  std::string pattern = "dilated";
  std::size_t k = 3, tokens = 200;
  std::vector<std::size_t> dilations{8, 4, 2, 1};
  rf->add_option("--pattern", pattern, "full, neighborhood or dilated");
  rf->add_option("--k", k, "neighborhood size");
  rf->add_option("--dilations", dilations, "per-layer dilation schedule")->delimiter(',');
  rf->add_option("--tokens", tokens, "line length");

  auto* cosine = app.add_subcommand("cosine", "per-block feature cosine distance profile");
  add_common(cosine, c, true, true);
  std::size_t samples = 16;
  cosine->add_option("--checkpoint", checkpoint, "model checkpoint (else a fresh model from --config)");
  cosine->add_option("--samples", samples, "images averaged over");

  auto* gradcam = app.add_subcommand("gradcam", "Grad-CAM heatmap of one image as PGM");
  add_common(gradcam, c, true, true);
  std::size_t index = 0;
  std::optional<std::size_t> target;
  std::string layer = "norm";
  gradcam->add_option("--checkpoint", checkpoint, "model checkpoint (else a fresh model from --config)");
  gradcam->add_option("--index", index, "sample index");
  gradcam->add_option("--target", target, "class to explain (default: the label)");
  gradcam->add_option("--layer", layer, "activation tap, e.g. stage4 or norm");

  auto* params = app.add_subcommand("params", "trainable parameter counts");
  add_common(params, c, false, true);
  auto* flops = app.add_subcommand("flops", "multiply-accumulate counts per image");
  add_common(flops, c, false, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error,usage," << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*train) return cmd_train(c, val_images, val_labels, resume, log_path, epochs, f32);
    if (*eval) return cmd_eval(c, checkpoint, corruption, severity, !no_header);
    if (*robust) return cmd_robustness(c, eval_files, baseline);
    if (*corrupt) return cmd_corrupt(c, corruption_names);
    if (*rf) return cmd_rf(c, pattern, k, dilations, tokens);
    if (*cosine) return cmd_cosine(c, checkpoint, samples);
    if (*gradcam) return cmd_gradcam(c, checkpoint, index, target, layer);
    if (*params) return cmd_accounting(c, false);
    if (*flops) return cmd_accounting(c, true);
  } catch (const std::exception& e) {
    std::cerr << "error," << error_kind(e) << "," << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
