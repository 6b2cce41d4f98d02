#include <CLI11.hpp>
#include <Eigen/Core>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "latentseg/errors.hpp"
#include "latentseg/image_io.hpp"
#include "latentseg/run_config.hpp"

using namespace latentseg;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kTraining = 3 };

struct Globals {
  std::string config_path;
  std::optional<unsigned long long> seed;
  std::string out;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
  if (g.seed) cfg.set_seed(*g.seed);
  return cfg;
}

fs::path out_dir(const Globals& g, const std::string& fallback) {
  const fs::path dir = g.out.empty() ? fs::path(fallback) : fs::path(g.out);
  fs::create_directories(dir);
  return dir;
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  const KeyValueConfig kv = cfg.to_config();
  for (const auto& [k, v] : kv.entries()) out["run." + k] = v;
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("missing input: " + path);
}

// Config echo, seed, versions and inputs. No timestamps so reruns match.
void write_provenance(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                      const std::map<std::string, std::string>& inputs) {
  KeyValueConfig p;
  p.set("command", command);
  p.set("latentseg_version", LATENTSEG_VERSION);
  p.set("compiler", __VERSION__);
  p.set("eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                             std::to_string(EIGEN_MINOR_VERSION));
  p.set("seed", std::to_string(cfg.seed));
  for (const auto& [k, v] : inputs) p.set("input." + k, v);
  const KeyValueConfig kv = cfg.to_config();
  for (const auto& [k, v] : kv.entries()) p.set("config." + k, v);
  write_text(dir / "provenance.txt", p.to_text());
}

std::string echo_comment(const RunConfig& cfg) {
  std::string out;
  const KeyValueConfig kv = cfg.to_config();
  for (const auto& [k, v] : kv.entries()) out += "# " + k + " = " + v + "\n";
  return out;
}

void cmd_synth(const Globals& g) {
  const RunConfig cfg = resolve_config(g);
  const fs::path dir = out_dir(g, cfg.data_dir);
  const Dataset ds = generate_synthetic_corpus(cfg.corpus);
  write_dataset(dir.string(), ds);
  write_provenance(dir, "synth", cfg, {});
  std::cout << "wrote " << ds.size() << " volumes to " << dir.string() << "\n";
}

void cmd_train_codec(const Globals& g, std::string data) {
  const RunConfig cfg = resolve_config(g);
  if (data.empty()) data = cfg.data_dir;
  const Dataset ds = read_dataset(data);
  const fs::path dir = out_dir(g, fs::path(cfg.codec_path).parent_path().string());
  CodecTrainReport report;
  const LatentCodec codec = train_codec(ds, cfg.codec_arch, cfg.codec_train, &report, [](long step, double loss) {
    if ((step + 1) % 100 == 0) std::cout << "codec step " << step + 1 << " loss " << loss << "\n" << std::flush;
  });
  Container c;
  c.set("kind", "codec");
  for (const auto& [k, v] : config_echo(cfg)) c.set(k, v);
  codec.write_to(c, "");
  write_container((dir / "codec.bin").string(), c);
  write_loss_csv((dir / "codec_losses.csv").string(), report.losses);
  write_provenance(dir, "train-codec", cfg, {{"data", data}});
  std::cout << "latent scale " << codec.latent_scale() << "\nwrote " << (dir / "codec.bin").string() << "\n";
}

void cmd_train(const Globals& g, std::string data, std::string codec_path, const std::string& resume) {
  RunConfig cfg = resolve_config(g);
  if (data.empty()) data = cfg.data_dir;
  if (codec_path.empty()) codec_path = cfg.codec_path;
  require_file(codec_path);
  if (!resume.empty()) require_file(resume);
  const Dataset ds = read_dataset(data);
  LatentCodec codec = LatentCodec::load(codec_path);
  cfg.model.denoiser.latent_channels = codec.latent_channels();
  cfg.model.vision.patch = codec.downsample_factor();
  const std::set<int> train_classes = cfg.train_classes(dataset_classes(ds));
  if (train_classes.empty()) throw ConfigError("no train classes left after holding out eval.test_classes");

  const fs::path dir = out_dir(g, fs::path(cfg.model_path).parent_path().string());
  SegmentationModel model(cfg.model, std::move(codec));
  TrainOptions opt;
  opt.checkpoint_dir = dir.string();
  opt.resume_from = resume;
  opt.header = config_echo(cfg);
  double window = 0;
  opt.progress = [&](long step, const StepResult& r) {
    window += r.loss;
    if ((step + 1) % 100 == 0) {
      std::cout << "step " << step + 1 << " loss " << window / 100 << " grad_norm " << r.grad_norm << "\n" << std::flush;
      window = 0;
    }
  };
  const TrainSummary summary = run_training(model, ds, train_classes, cfg.train, opt);
  write_provenance(dir, "train", cfg,
                   {{"data", data}, {"codec", codec_path}, {"resume", resume}, {"train_classes",
                    join_ints(std::vector<int>(train_classes.begin(), train_classes.end()))}});
  std::cout << "trained " << summary.steps << " steps in " << summary.seconds << " s\nwrote "
            << summary.final_checkpoint << "\n";
}

void cmd_eval(const Globals& g, std::string data, std::string model_path) {
  const RunConfig cfg = resolve_config(g);
  if (data.empty()) data = cfg.data_dir;
  if (model_path.empty()) model_path = cfg.model_path;
  require_file(model_path);
  const Dataset ds = read_dataset(data);
  const SegmentationModel model = SegmentationModel::load(model_path);
  const fs::path dir = out_dir(g, "eval");
  const MetricReport report = evaluate(model, ds, cfg.eval_spec());
  write_text(dir / "report.txt", echo_comment(cfg) + report.to_text());
  write_text(dir / "report.csv", report.to_csv());
  write_provenance(dir, "eval", cfg, {{"data", data}, {"model", model_path}});
  std::cout << report.to_text();
}

std::pair<std::string, std::string> split_pair(const std::string& arg) {
  const auto comma = arg.find(',');
  if (comma == std::string::npos) throw ConfigError("--support expects image,mask but got '" + arg + "'");
  return {arg.substr(0, comma), arg.substr(comma + 1)};
}

void cmd_predict(const Globals& g, std::string model_path, const std::vector<std::string>& supports,
                 const std::string& query) {
  const RunConfig cfg = resolve_config(g);
  if (model_path.empty()) model_path = cfg.model_path;
  require_file(model_path);
  std::vector<SliceImage> images;
  std::vector<BinaryMask> masks;
  std::map<std::string, std::string> inputs{{"model", model_path}, {"query", query}};
  for (std::size_t k = 0; k < supports.size(); ++k) {
    const auto [img, mask] = split_pair(supports[k]);
    require_file(img);
    require_file(mask);
    images.push_back(read_png_image(img));
    masks.push_back(read_png_mask(mask));
    inputs["support" + std::to_string(k)] = supports[k];
  }
  require_file(query);
  const SliceImage query_image = read_png_image(query);
  const SegmentationModel model = SegmentationModel::load(model_path);
  const BinaryMask pred = model.predict_mask(images, masks, query_image, cfg.condition);
  const fs::path dir = out_dir(g, "predict");
  write_png((dir / "mask.png").string(), pred);
  write_provenance(dir, "predict", cfg, inputs);
  std::cout << "wrote " << (dir / "mask.png").string() << " (" << pred.count() << " foreground pixels)\n";
}

void cmd_recon_check(const Globals& g, std::string data, std::string codec_path) {
  const RunConfig cfg = resolve_config(g);
  if (data.empty()) data = cfg.data_dir;
  if (codec_path.empty()) codec_path = cfg.codec_path;
  require_file(codec_path);
  const Dataset ds = read_dataset(data);
  const LatentCodec codec = LatentCodec::load(codec_path);
  const std::string table =
      format_recon_table(fs::path(data).filename().string(), reconstruction_study(codec, ds, cfg.recon_slices));
  const fs::path dir = out_dir(g, "recon");
  write_text(dir / "recon.txt", table);
  write_provenance(dir, "recon-check", cfg, {{"data", data}, {"codec", codec_path}});
  std::cout << table;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const TrainingError*>(&e)) return kTraining;
  if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
  return kData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot segmentation by one-step latent denoising"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Flat key = value run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every stochastic stage");
  app.add_option("--out", g.out, "Output directory");
  app.fallthrough();

  std::string data, codec, model, resume, query;
  std::vector<std::string> supports;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
  auto* train_codec_cmd = app.add_subcommand("train-codec", "Train the latent codec");
  train_codec_cmd->add_option("--data", data, "Dataset directory");
  auto* train = app.add_subcommand("train", "Episodic training of the denoiser and projector");
  train->add_option("--data", data, "Dataset directory");
  train->add_option("--codec", codec, "Codec checkpoint");
  train->add_option("--resume", resume, "Training checkpoint to continue from");
  auto* eval = app.add_subcommand("eval", "Held-out class evaluation");
  eval->add_option("--data", data, "Dataset directory");
  eval->add_option("--model", model, "Model or training checkpoint");
  auto* predict = app.add_subcommand("predict", "Segment one query image");
  predict->add_option("--model", model, "Model or training checkpoint");
  predict->add_option("--support", supports, "Support pair image.png,mask.png (repeat for K shots)")->required();
  predict->add_option("--query", query, "Query image")->required();
  auto* recon = app.add_subcommand("recon-check", "Codec reconstruction study");
  recon->add_option("--data", data, "Dataset directory");
  recon->add_option("--codec", codec, "Codec checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) cmd_synth(g);
    if (train_codec_cmd->parsed()) cmd_train_codec(g, data);
    if (train->parsed()) cmd_train(g, data, codec, resume);
    if (eval->parsed()) cmd_eval(g, data, model);
    if (predict->parsed()) cmd_predict(g, model, supports, query);
    if (recon->parsed()) cmd_recon_check(g, data, codec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kOk;
}
