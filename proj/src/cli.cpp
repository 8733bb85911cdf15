#include "eccdet/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"

#include "eccdet/data.hpp"
#include "eccdet/decode.hpp"
#include "eccdet/error.hpp"
#include "eccdet/isr.hpp"
#include "eccdet/metrics.hpp"
#include "eccdet/plot.hpp"
#include "eccdet/trainer.hpp"

namespace eccdet::cli {
namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand.
struct Common {
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  c.seed_opt = sub->add_option("--seed", c.seed, "Random seed");
  auto* out = sub->add_option("--out", c.out, "Output location");
  if (out_required) out->required();
}

template <class T>
void set_if(const CLI::Option* opt, const T& value, T& target) {
  if (opt && opt->count() > 0) target = value;
}

struct DataSplits {
  std::vector<ImageSample> train, test;
};

std::vector<ImageSample> load_split(const fs::path& data_dir, const char* name) {
  return load_coco(data_dir / (std::string(name) + ".json"), data_dir);
}

std::vector<ImageSample> load_gt(const fs::path& gt, bool with_pixels) {
  return load_coco(gt, gt.parent_path(), with_pixels);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

fs::path csv_beside(const fs::path& png) {
  fs::path p = png;
  p.replace_extension(".csv");
  return p;
}

// Latest checkpoint of a run: stage 2 when present.
fs::path run_checkpoint(const fs::path& run_dir) {
  if (fs::exists(run_dir / "stage2.ckpt")) return run_dir / "stage2.ckpt";
  if (fs::exists(run_dir / "stage1.ckpt")) return run_dir / "stage1.ckpt";
  throw Error(ErrorCode::kIo, "no checkpoint in " + run_dir.string());
}

// TOML/INI reader that files top-level keys under the invoked subcommand, so
// a config file may list `epochs = 3` as well as `[train]` sections.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(std::string subcommand) : subcommand_(std::move(subcommand)) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigTOML::from_config(input);
    if (subcommand_.empty()) return items;
    for (auto& item : items) {
      if (item.parents.empty() && item.name != "++" && item.name != "--") {
        item.parents.push_back(subcommand_);
      }
    }
    return items;
  }

 private:
  std::string subcommand_;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concealed-object detector: data generation, two-stage training, evaluation"};
  app.name("eccdet");
  app.require_subcommand(1);
  // --config is accepted after any subcommand; unmatched flags fall through
  // to this level.
  app.fallthrough();
  app.set_config("--config", "", "Key/value (TOML/INI) file supplying flag values");
  app.config_formatter(std::make_shared<SubcommandConfig>(args.empty() ? "" : args.front()));

  // gen-data
  Common gen_c;
  SynthConfig synth;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic blob dataset");
  add_common(gen, gen_c, true);
  gen->add_option("--n-train", synth.n_train)->check(CLI::NonNegativeNumber);
  gen->add_option("--n-test", synth.n_test)->check(CLI::NonNegativeNumber);
  gen->add_option("--image-size", synth.image_size)->check(CLI::PositiveNumber);
  gen->add_option("--contrast-low", synth.contrast_low);
  gen->add_option("--contrast-high", synth.contrast_high);
  gen->add_option("--negative-rate", synth.negative_rate)->check(CLI::Range(0.0, 1.0));

  // train
  Common train_c;
  std::string train_data, preset = "desk";
  TrainConfig flags;  // flag storage; only flags that were given are applied
  bool no_flow = false;
  auto* train = app.add_subcommand("train", "First learning stage");
  add_common(train, train_c, true);
  train->add_option("--data", train_data, "Dataset directory with train.json")->required();
  train->add_option("--preset", preset)->check(CLI::IsMember({"desk", "paper"}));
  std::map<std::string, CLI::Option*> t;
  t["epochs"] = train->add_option("--epochs", flags.epochs)->check(CLI::PositiveNumber);
  t["stage2_epochs"] = train->add_option("--stage2-epochs", flags.stage2_epochs)->check(CLI::NonNegativeNumber);
  t["batch_size"] = train->add_option("--batch-size", flags.batch_size)->check(CLI::Range(2, 4096));
  t["lr"] = train->add_option("--lr", flags.lr)->check(CLI::PositiveNumber);
  t["stage2_lr"] = train->add_option("--stage2-lr", flags.stage2_lr)->check(CLI::NonNegativeNumber);
  t["input_size"] = train->add_option("--input-size", flags.input_size);
  t["isr_floor"] = train->add_option("--isr-floor", flags.isr_floor)->check(CLI::Range(0.0, 1.0));
  t["lambda_cl"] = train->add_option("--lambda-cl", flags.loss.contrastive)->check(CLI::NonNegativeNumber);
  t["lambda_inter"] = train->add_option("--lambda-inter", flags.loss.inter)->check(CLI::NonNegativeNumber);
  t["lambda_offset"] = train->add_option("--lambda-offset", flags.loss.offset)->check(CLI::NonNegativeNumber);
  t["lambda_size"] = train->add_option("--lambda-size", flags.loss.size)->check(CLI::NonNegativeNumber);
  t["n_stages"] = train->add_option("--n-stages", flags.model.n_stages)->check(CLI::Range(1, 16));
  t["fpn_channels"] = train->add_option("--fpn-channels", flags.model.fpn_channels)->check(CLI::PositiveNumber);
  t["head_channels"] = train->add_option("--head-channels", flags.model.head_channels)->check(CLI::NonNegativeNumber);
  t["score_threshold"] = train->add_option("--score-threshold", flags.decode.score_threshold)->check(CLI::Range(0.0, 1.0));
  train->add_flag("--no-flow", no_flow, "Disable the semantic flow (plain FPN)");

  // mine / finetune
  Common mine_c, fine_c;
  std::string mine_data, fine_data;
  auto* mine = app.add_subcommand("mine", "Per-image inference IoU and importance weights");
  add_common(mine, mine_c, true);
  mine->add_option("--data", mine_data, "Dataset directory with train.json")->required();
  auto* finetune = app.add_subcommand("finetune", "Second, re-weighted learning stage");
  add_common(finetune, fine_c, true);
  finetune->add_option("--data", fine_data, "Dataset directory with train.json")->required();

  // eval
  Common eval_c;
  std::string eval_pred, eval_gt, eval_run, eval_data;
  double eval_iou = 0.5;
  double eval_score = 0.3;
  auto* eval = app.add_subcommand("eval", "Precision, recall, F1 and AP");
  add_common(eval, eval_c, false);
  auto* pred_opt = eval->add_option("--pred", eval_pred, "Prediction JSON array");
  auto* gt_opt = eval->add_option("--gt", eval_gt, "COCO ground truth");
  auto* run_opt = eval->add_option("--run", eval_run, "Run directory to evaluate");
  eval->add_option("--data", eval_data, "Dataset directory with test.json (with --run)");
  eval->add_option("--iou", eval_iou)->check(CLI::Range(0.0, 1.0));
  auto* eval_score_opt = eval->add_option("--score-threshold", eval_score)->check(CLI::Range(0.0, 1.0));
  pred_opt->needs(gt_opt)->excludes(run_opt);

  // infer
  Common infer_c;
  std::string infer_ckpt, infer_run, infer_gt;
  DecodeConfig infer_decode;
  auto* infer = app.add_subcommand("infer", "Write predictions for a COCO image set");
  add_common(infer, infer_c, true);
  auto* ickpt = infer->add_option("--ckpt", infer_ckpt, "Checkpoint file");
  auto* irun = infer->add_option("--run", infer_run, "Run directory (latest checkpoint)");
  ickpt->excludes(irun);
  infer->add_option("--gt", infer_gt, "COCO file listing the images")->required();
  infer->add_option("--top-k", infer_decode.top_k)->check(CLI::PositiveNumber);
  infer->add_option("--score-threshold", infer_decode.score_threshold)->check(CLI::Range(0.0, 1.0));

  // plots
  Common piou_c, ppr_c;
  std::string piou_run, ppr_pred, ppr_gt;
  double ppr_iou = 0.5;
  auto* piou = app.add_subcommand("plot-iou-loss", "Per-image IoU versus loss, both stages");
  add_common(piou, piou_c, false);
  piou->add_option("--run", piou_run, "Run directory")->required();
  auto* ppr = app.add_subcommand("plot-pr", "Precision-recall curve");
  add_common(ppr, ppr_c, true);
  ppr->add_option("--pred", ppr_pred)->required();
  ppr->add_option("--gt", ppr_gt)->required();
  ppr->add_option("--iou", ppr_iou)->check(CLI::Range(0.0, 1.0));

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "ERROR usage " << e.what() << '\n';
    return 2;
  }
  if (eval->parsed() && eval_pred.empty() && eval_run.empty()) {
    err << "ERROR usage eval needs --pred with --gt, or --run with --data\n";
    return 2;
  }
  if (eval->parsed() && !eval_run.empty() && eval_data.empty()) {
    err << "ERROR usage eval --run needs --data\n";
    return 2;
  }
  if (infer->parsed() && infer_ckpt.empty() && infer_run.empty()) {
    err << "ERROR usage infer needs --ckpt or --run\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      if (gen_c.seed_opt->count()) synth.texture_seed = gen_c.seed;
      synth.validate();
      const SyntheticSplit split = generate_synthetic(synth);
      save_synthetic_dataset(split, synth, gen_c.out);
      out << "wrote " << split.train.size() << " train and " << split.test.size()
          << " test images to " << gen_c.out << '\n';
    } else if (train->parsed()) {
      TrainConfig cfg = TrainConfig::preset_named(preset);
      set_if(t["epochs"], flags.epochs, cfg.epochs);
      set_if(t["stage2_epochs"], flags.stage2_epochs, cfg.stage2_epochs);
      set_if(t["batch_size"], flags.batch_size, cfg.batch_size);
      set_if(t["lr"], flags.lr, cfg.lr);
      set_if(t["stage2_lr"], flags.stage2_lr, cfg.stage2_lr);
      set_if(t["input_size"], flags.input_size, cfg.input_size);
      set_if(t["isr_floor"], flags.isr_floor, cfg.isr_floor);
      set_if(t["lambda_cl"], flags.loss.contrastive, cfg.loss.contrastive);
      set_if(t["lambda_inter"], flags.loss.inter, cfg.loss.inter);
      set_if(t["lambda_offset"], flags.loss.offset, cfg.loss.offset);
      set_if(t["lambda_size"], flags.loss.size, cfg.loss.size);
      set_if(t["n_stages"], flags.model.n_stages, cfg.model.n_stages);
      set_if(t["fpn_channels"], flags.model.fpn_channels, cfg.model.fpn_channels);
      set_if(t["head_channels"], flags.model.head_channels, cfg.model.head_channels);
      set_if(t["score_threshold"], flags.decode.score_threshold, cfg.decode.score_threshold);
      if (no_flow) cfg.model.use_flow = false;
      set_if(train_c.seed_opt, train_c.seed, cfg.seed);
      cfg.augment.output_size = cfg.input_size;
      cfg.validate();
      const auto samples = load_split(train_data, "train");
      pipeline_train(cfg, samples, train_c.out);
      out << "stage 1 complete: " << (fs::path(train_c.out) / "stage1.ckpt").string() << '\n';
    } else if (mine->parsed()) {
      const WeightTable table = pipeline_mine(mine_c.out, load_split(mine_data, "train"));
      char buf[96];
      std::snprintf(buf, sizeof(buf), "mined %zu images, mean alpha %.4f\n", table.entries.size(),
                    table.mean_alpha());
      out << buf;
    } else if (finetune->parsed()) {
      pipeline_finetune(fine_c.out, load_split(fine_data, "train"));
      out << "stage 2 complete: " << (fs::path(fine_c.out) / "stage2.ckpt").string() << '\n';
    } else if (eval->parsed()) {
      EvalResult result;
      if (!eval_run.empty()) {
        result = pipeline_eval(eval_run, load_split(eval_data, "test"));
        if (!eval_c.out.empty()) write_text(eval_c.out, result.to_json().dump(2) + "\n");
      } else {
        const auto preds = load_predictions(eval_pred);
        const auto gt = ground_truth_of(load_gt(eval_gt, false));
        double threshold = eval_score;
        if (!eval_score_opt->count()) threshold = DecodeConfig{}.score_threshold;
        result = evaluate(preds, gt, eval_iou, threshold);
        if (!eval_c.out.empty()) write_text(eval_c.out, result.to_json().dump(2) + "\n");
      }
      out << format_eval_table(result);
    } else if (infer->parsed()) {
      const fs::path ckpt = infer_ckpt.empty() ? run_checkpoint(infer_run) : fs::path(infer_ckpt);
      CheckpointMeta meta;
      const Detector model = load_detector(ckpt, &meta);
      const auto samples = load_gt(infer_gt, true);
      save_predictions(infer_c.out, detect_all(model, meta, samples, infer_decode));
      out << "wrote predictions for " << samples.size() << " images to " << infer_c.out << '\n';
    } else if (piou->parsed()) {
      const fs::path run_dir = piou_run;
      const fs::path png = piou_c.out.empty() ? run_dir / "iou_loss.png" : fs::path(piou_c.out);
      PlotSpec spec;
      spec.x_range = std::array<double, 2>{0.0, 1.0};
      std::string csv = "stage,id,iou,loss\n";
      const struct {
        int stage;
        const char* table;
        const char* losses;
        std::array<std::uint8_t, 3> color;
      } stages[] = {{1, "weights.table", "sample_loss_stage1.csv", {214, 39, 40}},
                    {2, "iou_stage2.table", "sample_loss_stage2.csv", {31, 119, 180}}};
      int drawn = 0;
      std::optional<IouLossScatter> first;
      for (const auto& st : stages) {
        if (!fs::exists(run_dir / st.table) || !fs::exists(run_dir / st.losses)) continue;
        const IouLossScatter sc = iou_loss_scatter(WeightTable::load(run_dir / st.table),
                                                   load_sample_losses(run_dir / st.losses));
        PlotSeries series;
        series.color = st.color;
        char row[256];
        for (const auto& p : sc.points) {
          series.x.push_back(p.iou);
          series.y.push_back(p.loss);
          std::snprintf(row, sizeof(row), "%d,%s,%.17g,%.17g\n", st.stage, p.id.c_str(), p.iou, p.loss);
          csv += row;
        }
        spec.series.push_back(series);
        std::snprintf(row, sizeof(row), "stage %d: spearman %.4f abnormal %d/%zu\n", st.stage,
                      sc.spearman, sc.abnormal, sc.points.size());
        out << row;
        if (first) {
          std::snprintf(row, sizeof(row), "stage %d: abnormal %d/%zu in stage-1 quartile regions\n", st.stage,
                        count_abnormal(sc, first->loss_q1, first->loss_q3), sc.points.size());
          out << row;
        } else {
          first = sc;
        }
        ++drawn;
      }
      if (drawn == 0) {
        throw Error(ErrorCode::kIo, "run directory has no per-image IoU/loss tables; run mine first");
      }
      save_plot(png, spec);
      write_text(csv_beside(png), csv);
    } else if (ppr->parsed()) {
      const auto preds = load_predictions(ppr_pred);
      const auto gt = ground_truth_of(load_gt(ppr_gt, false));
      int total = 0;
      const auto ranked = rank_detections(preds, gt, ppr_iou, &total);
      const double ap = average_precision(ranked, total);
      const auto curve = precision_recall_curve(ranked, total);
      PlotSpec spec;
      spec.x_range = std::array<double, 2>{0.0, 1.0};
      spec.y_range = std::array<double, 2>{0.0, 1.0};
      PlotSeries series;
      series.connect = true;
      std::string csv = "recall,precision,score\n";
      char row[128];
      for (const auto& p : curve) {
        series.x.push_back(p.recall);
        series.y.push_back(p.precision);
        std::snprintf(row, sizeof(row), "%.17g,%.17g,%.17g\n", p.recall, p.precision, p.score);
        csv += row;
      }
      spec.series.push_back(series);
      save_plot(ppr_c.out, spec);
      write_text(csv_beside(ppr_c.out), csv);
      std::snprintf(row, sizeof(row), "AP %.4f over %d ground-truth boxes\n", ap, total);
      out << row;
    }
  } catch (const Error& e) {
    err << "ERROR " << error_code_name(e.code()) << ' ' << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "ERROR internal " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace eccdet::cli
