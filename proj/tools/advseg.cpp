// advseg: generate | train | infer | eval | selftest
//
// Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advseg/adversarial.hpp"
#include "advseg/config.hpp"
#include "advseg/io.hpp"
#include "advseg/model.hpp"
#include "advseg/selftest.hpp"
#include "advseg/synth.hpp"

namespace fs = std::filesystem;
using namespace advseg;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr const char* kCheckpointName = "checkpoint.afcr";
constexpr const char* kLastGoodName = "last_good.afcr";

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<double> epsilon, lambda, lr;
  std::optional<int> epochs, crf_steps_train, crf_steps_test, width_divisor, batch_size, count;
  std::optional<bool> augment;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--variant", o.variant, "model variant")->check(CLI::IsMember(std::vector<std::string>{
      "fcn", "adv_fcn", "fcn_crf", "adv_fcn_crf", "multi_fcn", "adv_multi_fcn", "multi_fcn_crf", "adv_multi_fcn_crf"}));
  cmd->add_option("--epsilon", o.epsilon, "perturbation radius")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda", o.lambda, "L2 regularization factor")->check(CLI::NonNegativeNumber);
  cmd->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--crf-steps-train", o.crf_steps_train, "mean-field steps while training")->check(CLI::PositiveNumber);
  cmd->add_option("--crf-steps-test", o.crf_steps_test, "mean-field steps at inference")->check(CLI::PositiveNumber);
  cmd->add_option("--width-divisor", o.width_divisor, "divide every layer's channel count")->check(CLI::PositiveNumber);
  cmd->add_option("--batch-size", o.batch_size, "mini-batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--augment", o.augment, "4x flip augmentation of the training split");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (!o.config_path.empty()) c = parse_config(read_file(o.config_path));
  if (o.seed) c.seed = *o.seed;
  if (o.variant) c.train.variant = parse_variant(*o.variant);
  if (o.epsilon) c.train.epsilon = *o.epsilon;
  if (o.lambda) c.train.lambda = *o.lambda;
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.crf_steps_train) c.model.crf_steps_train = *o.crf_steps_train;
  if (o.crf_steps_test) c.model.crf_steps_test = *o.crf_steps_test;
  if (o.width_divisor) c.model.width_divisor = *o.width_divisor;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.augment) c.augment = *o.augment;
  if (o.count) c.data.gen.count = *o.count;
  c.data.gen.seed = c.seed;
  c.train.seed = c.seed;
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

/// Refuses to write into a non-empty directory unless forced.
void claim_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(dir);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

void log_hyperparameters(const RunConfig& c) {
  std::cerr << "variant " << to_string(c.train.variant) << " | lr " << c.train.learning_rate << " | lambda " << c.train.lambda
            << " | epsilon " << c.train.epsilon << " | crf steps " << c.model.crf_steps_train << "/" << c.model.crf_steps_test
            << " | epochs " << c.train.epochs << " | batch " << c.train.batch_size << " | seed " << c.seed
            << " | width divisor " << c.model.width_divisor << " | augment " << (c.augment ? "4x" : "off") << "\n";
}

// ---------------------------------------------------------------------------

int cmd_generate(const Overrides& o, const std::string& out, bool force) {
  RunConfig c = resolve(o);
  const fs::path dir = out.empty() ? fs::path(c.data_dir) : fs::path(out);
  claim_output_dir(dir, force);
  if (force) {
    for (const auto& e : fs::directory_iterator(dir)) {
      const std::string n = e.path().filename().string();
      if (n == kManifestName || (n.starts_with("sample_") && n.ends_with(".pgm"))) fs::remove(e.path());
    }
  }
  const std::string checksum = write_dataset(dir, c, generate(c.data.gen));
  std::cout << "wrote " << c.data.gen.count << " samples (" << c.data.train_count() << " train / " << c.data.test_count()
            << " test) to " << dir.string() << "\nchecksum " << checksum << "\n";
  return kOk;
}

std::ofstream open_metrics(const fs::path& p, bool append) {
  const bool fresh = !append || !fs::exists(p);
  std::ofstream f(p, fresh ? std::ios::trunc : std::ios::app);
  if (!f) throw DataError("cannot write " + p.string());
  if (fresh) f << "variant,split,epoch,dice,trimap_acc_w1,trimap_acc_w2,trimap_acc_w3,trimap_acc_w4,trimap_acc_w5\n";
  return f;
}

void metrics_row(std::ostream& f, Variant v, const char* split, int epoch, const SplitMetrics& m) {
  f << to_string(v) << "," << split << "," << epoch << "," << fmt(m.dice);
  for (const auto& t : m.trimap) f << "," << fmt_opt(t);
  f << "\n";
}

int cmd_train(const Overrides& o, const std::string& data_dir, const std::string& out, const std::string& resume, bool force) {
  RunConfig c = resolve(o);
  std::optional<Checkpoint> start;
  if (!resume.empty()) {
    start = load_checkpoint(resume);
    // The checkpoint fixes everything but the epoch budget.
    c = start->config;
    if (o.epochs) c.train.epochs = *o.epochs;
    if (c.train.epochs < start->state.epoch)
      throw UsageError("checkpoint is already at epoch " + std::to_string(start->state.epoch));
  }
  const fs::path dir = out.empty() ? fs::path(c.out_dir) : fs::path(out);
  if (start) fs::create_directories(dir);
  else claim_output_dir(dir, force);

  const Dataset ds = read_dataset(data_dir.empty() ? fs::path(c.data_dir) : fs::path(data_dir));
  if (ds.train.empty()) throw DataError("dataset has no training samples");
  if (start && start->dataset_checksum != ds.checksum) throw DataError("dataset checksum differs from the checkpoint's");
  log_hyperparameters(c);
  write_file(dir / "config.json", to_json(c).dump(2) + "\n");

  const PreparedData data = prepare(ds.train, ds.test, c.model.bandwidths, c.augment);
  TrainState state = start ? start->state : make_train_state(make_model(c.train.variant, c.model, c.seed));
  std::ofstream metrics = open_metrics(dir / "metrics.csv", start.has_value());
  auto checkpoint_of = [&](const TrainState& s) { return Checkpoint{s, data.norm, data.prior, c, ds.checksum}; };

  const auto t0 = std::chrono::steady_clock::now();
  try {
    train(state, data, c.train, [&](const TrainState& s, const EpochRecord& r) {
      if (r.train) metrics_row(metrics, s.model.variant, "train", r.epoch, *r.train);
      if (r.test) metrics_row(metrics, s.model.variant, "test", r.epoch, *r.test);
      metrics.flush();
      std::cerr << "epoch " << r.epoch << " objective " << r.objective;
      if (r.train) std::cerr << " train dice " << r.train->dice;
      if (r.test) std::cerr << " test dice " << r.test->dice;
      std::cerr << "\n";
    });
  } catch (const TrainingDiverged& e) {
    save_checkpoint(dir / kLastGoodName, checkpoint_of(e.last_good()));
    std::cerr << "error: " << e.what() << "\nlast good state saved to " << (dir / kLastGoodName).string() << "\n";
    return kNumerical;
  }
  save_checkpoint(dir / kCheckpointName, checkpoint_of(state));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "trained " << to_string(c.train.variant) << " to epoch " << state.epoch << " in " << std::fixed
            << std::setprecision(1) << secs << " s; checkpoint " << (dir / kCheckpointName).string() << "\n";
  return kOk;
}

Tensor read_image(const std::string& path) {
  const GrayImage g = decode_pgm(read_file(path), path);
  if (g.width != kImageSize || g.height != kImageSize)
    throw DataError(path + " is " + std::to_string(g.width) + "x" + std::to_string(g.height) + ", expected 40x40");
  return image_from_gray(g);
}

int cmd_infer(const std::string& ckpt, const std::string& image, const std::string& mask, const std::string& out, bool force) {
  const Checkpoint ck = load_checkpoint(ckpt);
  Sample s{read_image(image), Tensor({kImageSize, kImageSize}, 0.0)};
  std::optional<Tensor> truth;
  if (!mask.empty()) {
    const GrayImage g = decode_pgm(read_file(mask), mask);
    if (g.width != kImageSize || g.height != kImageSize) throw DataError(mask + " is not 40x40");
    truth = mask_from_gray(g, mask);
  }
  const fs::path dir = out;
  claim_output_dir(dir, force);
  const PreparedSample ps = prepare_sample(s, ck.norm, ck.config.model.bandwidths);
  const Tensor pred = binarize(predict(ck.state.model, ck.prior.log_bias(), ps));
  write_file(dir / "mask.pgm", encode_pgm(mask_to_gray(pred)));
  write_file(dir / "overlay.pgm", encode_pgm(overlay(s.image, pred, truth ? &*truth : nullptr)));
  std::cout << "wrote " << (dir / "mask.pgm").string() << " and " << (dir / "overlay.pgm").string() << "\n";
  if (truth) std::cout << "dice " << fmt(dice(pred, *truth)) << "\n";
  return kOk;
}

struct EvalRun {
  Checkpoint ck;
  MetricsReport report;
};

EvalRun evaluate_checkpoint(const std::string& path, const Dataset& ds, const std::string& split) {
  EvalRun r{load_checkpoint(path), {}};
  if (r.ck.dataset_checksum != ds.checksum) std::cerr << "warning: " << path << " was trained on a different dataset\n";
  const std::vector<Sample>& samples = split == "train" ? ds.train : ds.test;
  const Bandwidths bw = r.ck.config.model.bandwidths;
  const Tensor bias = r.ck.prior.log_bias();
  for (const Sample& s : samples)
    accumulate(r.report, binarize(predict(r.ck.state.model, bias, prepare_sample(s, r.ck.norm, bw))), s.mask);
  return r;
}

int cmd_eval(const std::string& ckpt, const std::string& against, const std::string& data_dir, const std::string& split,
             const std::string& out, bool force) {
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  const Dataset ds = read_dataset(data_dir);
  if ((split == "train" ? ds.train : ds.test).empty()) throw UsageError("dataset has no '" + split + "' split");
  std::vector<EvalRun> runs;
  runs.push_back(evaluate_checkpoint(ckpt, ds, split));
  if (!against.empty()) runs.push_back(evaluate_checkpoint(against, ds, split));

  const fs::path dir = out;
  claim_output_dir(dir, force);
  std::ofstream csv(dir / "metrics.csv");
  csv << "variant,split,metric,value\n";
  std::ofstream per(dir / "per_sample.csv");
  per << "variant,sample,tp,fp,fn,tn\n";
  for (const EvalRun& r : runs) {
    const std::string v(to_string(r.ck.state.model.variant));
    const SplitMetrics m = summarize(r.report);
    csv << v << "," << split << ",dice_pooled," << fmt(m.dice) << "\n";
    for (int w = 0; w < kTrimapWidths; ++w) csv << v << "," << split << ",trimap_acc_pooled_w" << (w + 1) << "," << fmt_opt(m.trimap[w]) << "\n";
    for (std::size_t i = 0; i < r.report.per_sample.size(); ++i) {
      const ConfusionCounts& cc = r.report.per_sample[i];
      per << v << "," << i << "," << cc.tp << "," << cc.fp << "," << cc.fn << "," << cc.tn << "\n";
    }
    std::cout << v << " " << split << " dice " << fmt(m.dice) << "\n";
  }
  if (runs.size() == 2) {
    const McNemarResult mc = mcnemar(runs[0].report.correct, runs[1].report.correct);
    Json j;
    j["model_a"] = {{"checkpoint", ckpt}, {"variant", std::string(to_string(runs[0].ck.state.model.variant))}};
    j["model_b"] = {{"checkpoint", against}, {"variant", std::string(to_string(runs[1].ck.state.model.variant))}};
    j["split"] = split;
    j["granularity"] = "pixel, pooled over the split";
    j["pixels"] = runs[0].report.correct.size();
    j["a_correct_b_wrong"] = mc.a_only;
    j["a_wrong_b_correct"] = mc.b_only;
    j["statistic"] = mc.statistic;
    j["p_value"] = mc.p_value;
    write_file(dir / "mcnemar.json", j.dump(2) + "\n");
    std::cout << "mcnemar p " << fmt(mc.p_value) << "\n";
  }
  write_file(dir / "config.json", to_json(runs[0].ck.config).dump(2) + "\n");
  return kOk;
}

int cmd_selftest(bool mutate) {
  const check::Tamper tamper = mutate ? check::mutate_first_entry() : check::Tamper{};
  std::vector<check::CheckResult> all = check::primitive_gradients(1, tamper);
  for (auto& r : check::composite_gradients(1, tamper)) all.push_back(r);
  all.push_back(check::crf_zero_coupling());
  all.push_back(check::crf_normalization());
  all.push_back(check::crf_exact_oracle());
  for (auto& r : check::perturbation_contract()) all.push_back(r);
  int failed = 0;
  for (const auto& r : all) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << "  measured " << std::setprecision(3) << r.measured << "  tolerance "
              << r.tolerance << "  (" << r.detail << ")\n";
    failed += r.pass ? 0 : 1;
  }
  std::cout << (all.size() - failed) << "/" << all.size() << " checks passed\n";
  return failed == 0 ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial FCN-CRF segmentation on synthetic 40x40 ROIs"};
  app.require_subcommand(1);

  Overrides o;
  std::string out, data_dir, resume, ckpt, image, mask, against, split = "test";
  bool force = false, mutate = false;

  auto* gen = app.add_subcommand("generate", "write a seeded synthetic dataset");
  add_run_flags(gen, o);
  gen->add_option("--count", o.count, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "dataset directory");
  gen->add_flag("--force", force, "overwrite an existing dataset");

  auto* tr = app.add_subcommand("train", "train one variant");
  add_run_flags(tr, o);
  tr->add_option("--data", data_dir, "dataset directory");
  tr->add_option("--out", out, "run directory");
  tr->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  tr->add_flag("--force", force, "reuse a non-empty run directory");

  auto* inf = app.add_subcommand("infer", "segment one image");
  inf->add_option("--checkpoint", ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", image, "40x40 PGM image")->required()->check(CLI::ExistingFile);
  inf->add_option("--mask", mask, "ground-truth PGM mask, drawn on the overlay")->check(CLI::ExistingFile);
  inf->add_option("--out", out, "output directory")->required();
  inf->add_flag("--force", force, "reuse a non-empty output directory");

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--against", against, "second checkpoint for McNemar's test")->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "train or test");
  ev->add_option("--out", out, "output directory")->required();
  ev->add_flag("--force", force, "reuse a non-empty output directory");

  auto* st = app.add_subcommand("selftest", "gradient and invariant checks");
  st->add_flag("--mutate", mutate, "corrupt analytic gradients; every gradient check must then fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_generate(o, out, force);
    if (*tr) return cmd_train(o, data_dir, out, resume, force);
    if (*inf) return cmd_infer(ckpt, image, mask, out, force);
    if (*ev) return cmd_eval(ckpt, against, data_dir, split, out, force);
    if (*st) return cmd_selftest(mutate);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
