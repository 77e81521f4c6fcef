// Command-line front door: build/inspect models, verify table claims, probe
// feature diversity, export graphs, generate data, train and evaluate.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vig/analysis.hpp"
#include "vig/checkpoint.hpp"
#include "vig/train.hpp"

using namespace vig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write file: " + path);
  f << text;
}

struct ModelOpts {
  std::string preset;
  std::string config_path;
  int res = 0;
  uint64_t seed = 0;
  bool seed_set = false;

  void attach(CLI::App* cmd) {
    auto* p = cmd->add_option(
        "--preset", preset,
        "named preset (vig-ti|vig-s|vig-b|pvig-ti|pvig-s|pvig-m|pvig-b|micro)");
    auto* c = cmd->add_option("--config", config_path, "model config JSON file");
    p->excludes(c);
    cmd->add_option("--res", res, "input resolution override (square)");
    cmd->add_option("--seed", seed, "model init seed")->each([this](const std::string&) {
      seed_set = true;
    });
  }

  ModelConfig resolve() const {
    ModelConfig cfg;
    if (!preset.empty())
      cfg = preset_config(preset);
    else if (!config_path.empty())
      cfg = config_from_json(read_file(config_path));
    else
      throw CLI::ValidationError("model", "one of --preset/--config is required");
    if (res > 0) cfg.image_h = cfg.image_w = res;
    if (seed_set) cfg.init_seed = seed;
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------

int cmd_inspect(const ModelOpts& mo) {
  Model m = build_model(mo.resolve());
  auto st = compute_stats(m);
  std::cout << m.describe();
  std::cout << "parameters: " << st.param_count << "  (" << st.param_count / 1e6 << " M)\n";
  std::cout << "macs@" << m.cfg.image_h << "x" << m.cfg.image_w << ": " << st.mac_count << "  ("
            << st.mac_count / 1e9 << " B)\n";
  return kExitOk;
}

int cmd_count(const ModelOpts& mo, const std::string& out) {
  Model m = build_model(mo.resolve());
  auto st = compute_stats(m);
  std::cout << "model: " << (m.cfg.preset.empty() ? "custom" : m.cfg.preset) << " @ "
            << m.cfg.image_h << "x" << m.cfg.image_w << "\n";
  std::cout << "params: " << st.param_count << " (" << st.param_count / 1e6 << " M)\n";
  std::cout << "macs:   " << st.mac_count << " (" << st.mac_count / 1e9 << " B)\n";
  // reference budgets are defined at 224x224 only
  if (auto ref = preset_reference_numbers(m.cfg.preset);
      ref && m.cfg.image_h == 224 && m.cfg.image_w == 224) {
    const double pd = 100.0 * (st.param_count / 1e6 - ref->first) / ref->first;
    const double md = 100.0 * (st.mac_count / 1e9 - ref->second) / ref->second;
    std::cout << "reference: " << ref->first << " M params (deviation "
              << (pd >= 0 ? "+" : "") << pd << "%), " << ref->second
              << " B flops (deviation " << (md >= 0 ? "+" : "") << md << "%)\n";
  }
  if (!out.empty()) {
    write_file(out, st.to_csv());
    std::cout << "wrote " << out << "\n";
  }
  return kExitOk;
}

int cmd_probe_diversity(const std::string& cfg_a_path, const std::string& cfg_b_path, int depth,
                        uint64_t seed, const std::string& out) {
  StackConfig a, b;
  b.type = "bare_conv";
  if (!cfg_a_path.empty()) a = stack_config_from_json(read_file(cfg_a_path));
  if (!cfg_b_path.empty()) b = stack_config_from_json(read_file(cfg_b_path));
  auto pa = probe_stack_diversity(a, depth, seed);
  auto pb = probe_stack_diversity(b, depth, seed);

  std::ostringstream csv;
  csv << "layer,gamma_a,gamma_b\n";
  for (size_t i = 0; i < pa.entries.size(); ++i)
    csv << pa.entries[i].first << "," << pa.entries[i].second << "," << pb.entries[i].second
        << "\n";
  if (!out.empty()) {
    write_file(out, csv.str());
    std::cout << "wrote " << out << "\n";
  } else {
    std::cout << csv.str();
  }
  const double ra = pa.entries.back().second / pa.entries.front().second;
  const double rb = pb.entries.back().second / pb.entries.front().second;
  std::cout << "final/first gamma ratio: A(" << a.type << ") " << ra << "  B(" << b.type << ") "
            << rb << "\n";
  return kExitOk;
}

Tensor two_tone_image(int h, int w, DType dt, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.02);
  Tensor img = Tensor::zeros({1, h, w, 3}, dt);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool left = x < w / 2;
      const double base[3] = {left ? 0.8 : -0.6, left ? 0.5 : -0.7, left ? -0.2 : 0.6};
      for (int c = 0; c < 3; ++c)
        img.set(((int64_t(y) * w) + x) * 3 + c, base[c] + noise(rng));
    }
  return img;
}

int cmd_export_graph(const ModelOpts& mo, const std::string& ckpt, const std::string& data_path,
                     int index, bool synthetic, int layer, const std::string& out) {
  Model m = build_model(mo.resolve());
  if (!ckpt.empty()) load_checkpoint(ckpt, m);
  if (layer < 1 || layer > m.total_blocks())
    throw IndexError("layer " + std::to_string(layer) + " out of range; valid range is 1.." +
                     std::to_string(m.total_blocks()));

  Tensor img;
  if (synthetic) {
    img = two_tone_image(m.cfg.image_h, m.cfg.image_w, m.cfg.dtype, 1);
  } else {
    if (data_path.empty())
      throw CLI::ValidationError("export-graph", "need --dataset/--index or --synthetic");
    Dataset ds = load_vigd(data_path);
    if (index < 0 || index >= ds.size()) throw IndexError("dataset index out of range");
    std::vector<int64_t> idx{index};
    img = batch_tensor(ds, idx, m.cfg.dtype);
  }

  GraphCapture cap;
  cap.want_block = layer - 1;
  Ctx ctx;
  ctx.capture = &cap;
  (void)m.forward(img, ctx);
  if (cap.graphs.empty()) throw Error("no graph captured");
  const Graph& g = cap.graphs[0];

  write_file(out + ".edges", graph_to_edge_list(g));
  write_file(out + ".dot", graph_to_dot(g));
  const int center = g.num_nodes / 2;
  std::cout << "block " << layer << ": " << g.num_nodes << " nodes, k=" << g.k
            << ", dilation=" << g.dilation
            << (g.self_excluded ? "" : " (neighbors index a pooled key grid)") << "\n";
  std::cout << "center node " << center << " neighbors:";
  for (int s = 0; s < g.k; ++s) std::cout << " " << g.neighbor(center, s);
  std::cout << "\nwrote " << out << ".edges and " << out << ".dot\n";
  return kExitOk;
}

int cmd_make_dataset(int n, int classes, int res, uint64_t seed, const std::string& out,
                     const std::string& val_out, int val_n) {
  Dataset ds = synth_shapes(n, res, classes, seed);
  ds.split = "train";
  save_vigd(out, ds);
  std::cout << "wrote " << out << " (" << n << " records, " << classes << " classes, " << res
            << "x" << res << ")\n";
  if (!val_out.empty()) {
    Dataset val = synth_shapes(val_n > 0 ? val_n : n / 5, res, classes, seed + 1);
    val.split = "val";
    save_vigd(val_out, val);
    std::cout << "wrote " << val_out << " (" << val.size() << " records)\n";
  }
  return kExitOk;
}

int cmd_train(const ModelOpts& mo, const std::string& data, const std::string& val,
              TrainConfig tc) {
  Dataset tr = load_vigd(data);
  Dataset va = val.empty() ? tr : load_vigd(val);
  ModelConfig cfg = mo.resolve();
  cfg.num_classes = tr.num_classes;
  cfg.image_h = tr.h;
  cfg.image_w = tr.w;
  cfg.validate();
  Model m = build_model(cfg);
  std::cout << m.describe();
  std::cout << "params: " << count_params(m) << "\n";
  auto res = train(m, tr, va, tc);
  for (const auto& e : res.history)
    std::cout << "epoch " << e.epoch << ": loss " << e.train_loss << " val top1 " << e.val_top1
              << " top5 " << e.val_top5 << " lr " << e.lr << "\n";
  std::cout << "best val top1: " << res.best_top1 << "\n";
  if (!res.checkpoint_path.empty())
    std::cout << "checkpoint: " << res.checkpoint_path << "\n";
  return kExitOk;
}

int cmd_eval(const ModelOpts& mo, const std::string& ckpt, const std::string& data) {
  Dataset ds = load_vigd(data);
  ModelConfig cfg = mo.resolve();
  cfg.num_classes = ds.num_classes;
  cfg.image_h = ds.h;
  cfg.image_w = ds.w;
  cfg.validate();
  Model m = build_model(cfg);
  if (!ckpt.empty()) load_checkpoint(ckpt, m);
  auto [top1, top5] = evaluate(m, ds);
  std::cout << "top1 " << top1 << " top5 " << top5 << " over " << ds.size() << " records\n";
  return kExitOk;
}

int cmd_grad_check(const ModelOpts& mo, double tol) {
  ModelConfig cfg = mo.preset.empty() && mo.config_path.empty() ? preset_config("micro")
                                                                : mo.resolve();
  cfg.dtype = DType::Float64;
  cfg.drop_path_rate = 0.0;

  // the micro-geometry block stack first
  Rng rng(42);
  std::vector<VigBlock> blocks;
  for (int l = 0; l < 2; ++l) {
    GrapherConfig gc;
    gc.dim = 8;
    gc.k = 3;
    gc.dilation = 1;
    gc.heads = 2;
    gc.grid_h = gc.grid_w = 3;
    gc.variant = cfg.variant;
    blocks.push_back(VigBlock::make("chk.block" + std::to_string(l), gc, 4, rng,
                                    DType::Float64));
  }
  Tensor x0 = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  auto rep = block_stack_grad_check(blocks, 1, x0);
  std::cout << "block stack (N=9, D=8, K=3, 2 blocks): max rel err " << rep.max_rel_err
            << " over " << rep.checked << " elements\n";

  Model m = build_model(cfg);
  Rng drng(7);
  Tensor imgs = Tensor::rand_uniform({2, cfg.image_h, cfg.image_w, 3}, drng, -1.0, 1.0,
                                     DType::Float64);
  std::vector<int> labels{1 % cfg.num_classes, 3 % cfg.num_classes};
  auto rep2 = model_grad_check(m, imgs, labels);
  std::cout << "model cross-entropy: max rel err " << rep2.max_rel_err << " over "
            << rep2.checked << " elements (worst " << rep2.worst_param << ")\n";

  const double worst = std::max(rep.max_rel_err, rep2.max_rel_err);
  std::cout << "max rel. error " << worst << (worst <= tol ? " <= " : " > ") << tol << "\n";
  if (worst > tol) throw NumericError("gradient check exceeded tolerance");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision GNN (ViG): patch-graph image backbones with verification instruments"};
  app.require_subcommand(1);
  bool serial = false;
  app.add_flag("--serial", serial, "single-threaded deterministic mode");

  ModelOpts mo_inspect, mo_count, mo_export, mo_train, mo_eval, mo_grad;
  std::string out, ckpt, data, val;

  auto* c_inspect = app.add_subcommand("inspect", "print model structure");
  mo_inspect.attach(c_inspect);

  auto* c_count = app.add_subcommand("count", "parameter and MAC counts vs preset reference budgets");
  mo_count.attach(c_count);
  std::string count_out;
  c_count->add_option("--out", count_out, "CSV output path");

  auto* c_probe =
      app.add_subcommand("probe-diversity", "per-layer feature diversity of two stacks");
  std::string cfg_a, cfg_b, probe_out;
  int probe_depth = 12;
  uint64_t probe_seed = 7;
  c_probe->add_option("--config-a", cfg_a, "stack A config JSON (default: vig stack)");
  c_probe->add_option("--config-b", cfg_b, "stack B config JSON (default: bare conv stack)");
  c_probe->add_option("--depth", probe_depth, "stack depth");
  c_probe->add_option("--seed", probe_seed, "probe seed");
  c_probe->add_option("--out", probe_out, "CSV output path");

  auto* c_export = app.add_subcommand("export-graph", "dump the constructed graph at a block");
  mo_export.attach(c_export);
  int layer = 1, ds_index = 0;
  bool synthetic = false;
  c_export->add_option("--layer", layer, "1-based block index");
  c_export->add_option("--checkpoint", ckpt, "checkpoint to load");
  c_export->add_option("--dataset", data, "VIGD file for the input image");
  c_export->add_option("--index", ds_index, "record index in --dataset");
  c_export->add_flag("--synthetic", synthetic, "use a built-in two-tone test image");
  c_export->add_option("--out", out, "output path prefix")->required();

  auto* c_make = app.add_subcommand("make-dataset", "generate a synthetic shapes dataset");
  int mk_n = 6000, mk_classes = 10, mk_res = 32, mk_val_n = 0;
  uint64_t mk_seed = 7;
  std::string mk_out = "shapes.vigd", mk_val_out;
  c_make->add_option("--n", mk_n, "record count");
  c_make->add_option("--classes", mk_classes, "class count (<= 10)");
  c_make->add_option("--res", mk_res, "image resolution");
  c_make->add_option("--seed", mk_seed, "generator seed");
  c_make->add_option("--out", mk_out, "output path");
  c_make->add_option("--val-out", mk_val_out, "optional validation split path");
  c_make->add_option("--val-n", mk_val_n, "validation record count (default n/5)");

  auto* c_train = app.add_subcommand("train", "train a model on a VIGD dataset");
  mo_train.attach(c_train);
  TrainConfig tc;
  c_train->add_option("--data", data, "training VIGD file")->required();
  c_train->add_option("--val", val, "validation VIGD file (defaults to --data)");
  c_train->add_option("--epochs", tc.epochs, "epochs");
  c_train->add_option("--lr", tc.lr, "base learning rate");
  c_train->add_option("--batch", tc.batch, "batch size");
  c_train->add_option("--warmup", tc.warmup_epochs, "warmup epochs");
  c_train->add_option("--weight-decay", tc.weight_decay, "AdamW weight decay");
  c_train->add_option("--label-smoothing", tc.label_smoothing, "label smoothing epsilon");
  c_train->add_option("--train-seed", tc.seed, "training seed");
  c_train->add_option("--out", tc.out_dir, "output directory (metrics.csv, best.ckpt)");

  auto* c_eval = app.add_subcommand("eval", "evaluate a model on a VIGD dataset");
  mo_eval.attach(c_eval);
  std::string eval_ckpt, eval_data;
  c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint to load");
  c_eval->add_option("--data", eval_data, "VIGD file")->required();

  auto* c_grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
  mo_grad.attach(c_grad);
  double tol = 1e-4;
  c_grad->add_option("--tol", tol, "max allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  if (serial) set_max_threads(1);

  try {
    if (*c_inspect) return cmd_inspect(mo_inspect);
    if (*c_count) return cmd_count(mo_count, count_out);
    if (*c_probe) return cmd_probe_diversity(cfg_a, cfg_b, probe_depth, probe_seed, probe_out);
    if (*c_export)
      return cmd_export_graph(mo_export, ckpt, data, ds_index, synthetic, layer, out);
    if (*c_make)
      return cmd_make_dataset(mk_n, mk_classes, mk_res, mk_seed, mk_out, mk_val_out, mk_val_n);
    if (*c_train) {
      tc.serial = serial;
      return cmd_train(mo_train, data, val, tc);
    }
    if (*c_eval) return cmd_eval(mo_eval, eval_ckpt, eval_data);
    if (*c_grad) return cmd_grad_check(mo_grad, tol);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
