#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "maskpoint/dataset.hpp"
#include "maskpoint/train.hpp"

namespace fs = std::filesystem;
using namespace maskpoint;

namespace {

TrainConfig load_config_or_default(const std::string& path) {
  return path.empty() ? TrainConfig{} : TrainConfig::load(path);
}

/// Model config for a checkpoint: an explicit --config wins, otherwise the
/// config.json written next to the checkpoint at training time.
TrainConfig config_for_checkpoint(const std::string& checkpoint, const std::string& config_path) {
  if (!config_path.empty()) return TrainConfig::load(config_path);
  const fs::path sibling = fs::path(checkpoint).parent_path() / "config.json";
  if (!fs::exists(sibling))
    throw FormatError("no --config given and " + sibling.string() + " not found");
  return TrainConfig::load(sibling.string());
}

std::vector<SceneRecord> load_scenes(const std::string& path, const TrainConfig& config,
                                     bool need_labels) {
  std::vector<SceneRecord> scenes = read_dataset(path);
  if (need_labels) {
    const int labelled = ensure_contour_labels(scenes, config.label_options());
    if (labelled > 0)
      std::cerr << "[labels] derived contour points for " << labelled << " instances\n";
  }
  return scenes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance segmentation with a contour-point auxiliary head"};
  app.require_subcommand(1);

  // gen-data ----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out;
  int gen_scenes = 200, gen_size = 128, gen_classes = 4;
  std::string gen_overlap = "off";
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--scenes", gen_scenes, "Number of scenes");
  gen->add_option("--size", gen_size, "Image side length");
  gen->add_option("--classes", gen_classes, "Number of classes");
  gen->add_option("--overlap", gen_overlap, "Allow instance overlap")
      ->check(CLI::IsMember({"on", "off"}));
  gen->add_option("--seed", gen_seed, "RNG seed");

  // make-labels ---------------------------------------------------------------
  auto* labels = app.add_subcommand("make-labels", "Add contour-point labels to annotations");
  std::string labels_in, labels_out, labels_sampling = "uniform", labels_center = "on";
  int labels_k = 16;
  double labels_epsilon = 2.0;
  std::uint64_t labels_seed = 1;
  labels->add_option("--annotations", labels_in, "Input annotation JSON (or dataset dir)")
      ->required();
  labels->add_option("--k", labels_k, "Contour points per instance")->required();
  labels->add_option("--sampling", labels_sampling, "Sampling strategy")
      ->check(CLI::IsMember({"uniform", "corner"}));
  labels->add_option("--epsilon", labels_epsilon, "Corner-sampling tolerance (pixels)");
  labels->add_option("--center", labels_center, "Include the centroid point")
      ->check(CLI::IsMember({"on", "off"}));
  labels->add_option("--seed", labels_seed, "RNG seed (padding)");
  labels->add_option("--out", labels_out, "Output JSON path")->required();

  // train ---------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "Training config JSON");
  train->add_option("--data", train_data, "Training dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();

  // eval ----------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_checkpoint, eval_data, eval_config, eval_out;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Evaluation dataset directory")->required();
  eval_cmd->add_option("--config", eval_config, "Config JSON (default: sibling config.json)");
  eval_cmd->add_option("--out", eval_out, "Write the report JSON here as well");

  // ablate ---------------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  std::string ablate_grid, ablate_config, ablate_data, ablate_eval_data, ablate_out;
  ablate->add_option("--grid", ablate_grid, "Grid JSON ({\"cells\": [...]})")->required();
  ablate->add_option("--config", ablate_config, "Base training config JSON");
  ablate->add_option("--data", ablate_data, "Training dataset directory")->required();
  ablate->add_option("--eval-data", ablate_eval_data,
                     "Evaluation dataset directory (default: 20% tail split of --data)");
  ablate->add_option("--out", ablate_out, "Directory for results.json and table.txt");

  // export-heatmaps -------------------------------------------------------------
  auto* heat = app.add_subcommand("export-heatmaps", "Write per-detection heatmap PNGs");
  std::string heat_checkpoint, heat_image, heat_config, heat_out = "heatmaps";
  heat->add_option("--checkpoint", heat_checkpoint, "Checkpoint file")->required();
  heat->add_option("--image", heat_image, "Input image PNG")->required();
  heat->add_option("--config", heat_config, "Config JSON (default: sibling config.json)");
  heat->add_option("--out", heat_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SceneConfig config;
      config.size = gen_size;
      config.classes = gen_classes;
      config.allow_overlap = gen_overlap == "on";
      const std::vector<SceneRecord> records = generate_dataset(config, gen_scenes, gen_seed);
      write_dataset(records, gen_out);
      std::cout << "wrote " << records.size() << " scenes to " << gen_out << '\n';
    } else if (*labels) {
      LabelOptions options;
      options.k = labels_k;
      options.sampling =
          labels_sampling == "corner" ? SamplingKind::corner : SamplingKind::uniform;
      options.epsilon = labels_epsilon;
      options.center = labels_center == "on";
      options.seed = labels_seed;
      const std::size_t warn_before = multi_component_trace_count();
      augment_annotations_file(labels_in, labels_out, options);
      const std::size_t warnings = multi_component_trace_count() - warn_before;
      if (warnings > 0)
        std::cerr << "[make-labels] " << warnings
                  << " masks had multiple components; traced the largest\n";
      std::cout << "wrote " << labels_out << '\n';
    } else if (*train) {
      const TrainConfig config = load_config_or_default(train_config);
      std::vector<SceneRecord> scenes = load_scenes(train_data, config, config.fusion.alpha > 0);
      fs::create_directories(train_out);
      std::ofstream log(fs::path(train_out) / "train_log.jsonl");
      Model model(config.model_config(), mix_seed(config.seed, "init"));
      std::cout << "training " << config.iterations << " iterations on " << scenes.size()
                << " scenes (" << model.params().parameter_count() << " parameters)\n";
      const auto entries = train_model(model, scenes, config, &log);
      model.save_checkpoint((fs::path(train_out) / "checkpoint.bin").string());
      std::ofstream cfg(fs::path(train_out) / "config.json");
      cfg << config.to_json(2) << '\n';
      std::cout << "final loss " << entries.back().loss.total << "; checkpoint written to "
                << train_out << '\n';
    } else if (*eval_cmd) {
      const TrainConfig config = config_for_checkpoint(eval_checkpoint, eval_config);
      Model model(config.model_config(), mix_seed(config.seed, "init"));
      model.load_checkpoint(eval_checkpoint);
      std::vector<SceneRecord> scenes = load_scenes(eval_data, config, true);
      const EvalReport report = evaluate(model, scenes);
      std::cout << report.to_json() << '\n';
      if (!eval_out.empty()) {
        std::ofstream out(eval_out);
        out << report.to_json() << '\n';
      }
    } else if (*ablate) {
      const TrainConfig base = load_config_or_default(ablate_config);
      std::vector<SceneRecord> train_scenes = read_dataset(ablate_data);
      std::vector<SceneRecord> eval_scenes;
      if (!ablate_eval_data.empty()) {
        eval_scenes = read_dataset(ablate_eval_data);
      } else {
        const std::size_t split = train_scenes.size() - train_scenes.size() / 5;
        eval_scenes.assign(train_scenes.begin() + static_cast<std::ptrdiff_t>(split),
                           train_scenes.end());
        train_scenes.resize(split);
      }
      std::ifstream grid_in(ablate_grid);
      if (!grid_in) throw FormatError("ablate: cannot open " + ablate_grid);
      std::stringstream grid_text;
      grid_text << grid_in.rdbuf();
      const auto rows =
          run_ablation(grid_text.str(), base, train_scenes, eval_scenes, &std::cerr);
      const std::string table = ablation_table(rows);
      std::cout << table;
      if (!ablate_out.empty()) {
        fs::create_directories(ablate_out);
        std::ofstream(fs::path(ablate_out) / "table.txt") << table;
        std::ofstream(fs::path(ablate_out) / "results.json") << ablation_json(rows) << '\n';
      }
    } else if (*heat) {
      const TrainConfig config = config_for_checkpoint(heat_checkpoint, heat_config);
      Model model(config.model_config(), mix_seed(config.seed, "init"));
      model.load_checkpoint(heat_checkpoint);
      const Tensor image = image_from_u8(read_png(heat_image));
      const auto written = export_heatmaps(model, image, heat_out);
      for (const auto& path : written) std::cout << path << '\n';
      std::cout << written.size() << " files written\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
