// SPDX-License-Identifier: Apache-2.0
//
// bevcon: data generation, training, evaluation, the ablation lattice, and
// BEV plot rendering behind one binary. Exit codes: 0 success, 1 usage error,
// 2 runtime failure.
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bevcon/bevplot.hpp"
#include "bevcon/checkpoint.hpp"
#include "bevcon/config.hpp"
#include "bevcon/scenegen.hpp"
#include "bevcon/serialize.hpp"
#include "bevcon/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bevcon;

namespace {

void require_fresh_out(const std::string& out, bool force) {
  if (force) return;
  if (fs::exists(out) && !fs::is_empty(out))
    throw std::runtime_error("output path " + out + " already has content; pass --force to reuse");
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += "'";
  return out;
}

// Last eval record of a metrics.jsonl, or null.
json last_eval_record(const std::string& log_path) {
  std::istringstream in(read_file(log_path));
  std::string line;
  json last;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.value("kind", "") == "eval") last = j;
  }
  return last;
}

int cmd_gen_data(const std::string& config_path, const std::string& out, int n_scenes,
                 std::uint64_t seed, bool seed_given, bool force) {
  SceneGenConfig cfg;
  if (!config_path.empty()) cfg = SceneGenConfig::from_json(json::parse(read_file(config_path)));
  if (seed_given) cfg.seed = seed;
  require_fresh_out(out, force);
  DatasetManifest man = generate_dataset(cfg, n_scenes, out);
  std::printf("gen-data: wrote %zu scenes to %s (config hash %s)\n", man.scenes.size(),
              out.c_str(), man.config_hash.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out,
              const std::vector<std::string>& overrides, bool force) {
  RunConfig cfg = config_path.empty() ? RunConfig::from_text("", overrides)
                                      : RunConfig::from_file(config_path, overrides);
  require_fresh_out(out, force);
  Trainer t(cfg, out);
  t.train();
  std::printf("train: %ld steps, checkpoint at %s/checkpoint.bin\n", t.step(), out.c_str());
  const json ev = last_eval_record(out + "/metrics.jsonl");
  if (!ev.is_null())
    std::printf("train: final %s mAP %.6f mATE %.6f mAOE %.6f\n",
                ev.value("split", "?").c_str(), ev["mAP"].get<double>(),
                ev["mATE"].get<double>(), ev["mAOE"].get<double>());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& dataset, const std::string& split) {
  MetricsReport rep = evaluate_checkpoint(ckpt, dataset, split);
  std::fputs(rep.to_text().c_str(), stdout);
  return 0;
}

int cmd_plot_bev(const std::string& ckpt_path, const std::string& dataset, int scene_id,
                 const std::string& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  RunConfig cfg = RunConfig::from_text(ck.config_text);
  cfg.dataset = dataset;
  Trainer t(cfg, "");
  restore_model(ck, t.model());

  int index = -1;
  for (size_t i = 0; i < t.manifest().scenes.size(); ++i)
    if (t.manifest().scenes[i].scene_id == scene_id) index = static_cast<int>(i);
  if (index < 0)
    throw std::runtime_error("scene id " + std::to_string(scene_id) + " not in " + dataset);

  Scene scene = load_scene(dataset, t.manifest(), index);
  std::vector<Prediction> preds =
      infer_scene(t.model(), scene, t.eval_geometry(), t.config().eval_score_threshold,
                  t.config().eval_max_dets);
  Image img = render_bev_plot(t.manifest().config.bev, scene.boxes, preds, {});
  save_ppm(img, out);
  std::printf("plot-bev: scene %d, %zu gt boxes, %zu predictions -> %s\n", scene_id,
              scene.boxes.size(), preds.size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// ablation lattice

struct AblationRow {
  std::string name;
  std::vector<std::string> overrides;
};

std::vector<AblationRow> ablation_lattice() {
  const std::string off_all[] = {"ablate.enable_instance=false", "ablate.enable_perspective=false",
                                 "ablate.enable_image_level=false"};
  std::vector<AblationRow> rows;
  rows.push_back({"baseline", {off_all[0], off_all[1], off_all[2]}});
  rows.push_back({"ins",
                  {"ablate.enable_instance=true", off_all[1], off_all[2], "pool.mode=gather",
                   "ablate.multilayer=false"}});
  rows.push_back({"ins_align",
                  {"ablate.enable_instance=true", off_all[1], off_all[2], "pool.mode=align",
                   "ablate.multilayer=false"}});
  rows.push_back({"ins_align_mlc",
                  {"ablate.enable_instance=true", off_all[1], off_all[2], "pool.mode=align",
                   "ablate.multilayer=true"}});
  rows.push_back({"pers_scale",
                  {off_all[0], "ablate.enable_perspective=true", off_all[2],
                   "ablate.scale_aware=true"}});
  rows.push_back({"all_no_scale",
                  {"ablate.enable_instance=true", "ablate.enable_perspective=true", off_all[2],
                   "pool.mode=align", "ablate.multilayer=true", "ablate.scale_aware=false"}});
  rows.push_back({"all",
                  {"ablate.enable_instance=true", "ablate.enable_perspective=true", off_all[2],
                   "pool.mode=align", "ablate.multilayer=true", "ablate.scale_aware=true"}});
  rows.push_back({"image_level", {off_all[0], off_all[1], "ablate.enable_image_level=true"}});
  return rows;
}

std::string flags_of(const RunConfig& c) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "in=%d pers=%d img=%d pool=%s mlc=%d scale=%d",
                c.enable_instance ? 1 : 0, c.enable_perspective ? 1 : 0,
                c.enable_image_level ? 1 : 0, c.pool.mode == PoolConfig::Mode::align ? "align" : "gather",
                c.multilayer ? 1 : 0, c.scale_aware ? 1 : 0);
  return buf;
}

int cmd_ablate(const std::string& argv0, const std::string& config_path, const std::string& out,
               const std::vector<std::string>& overrides, bool force) {
  require_fresh_out(out, force);
  fs::create_directories(out);

  const std::vector<AblationRow> rows = ablation_lattice();
  std::vector<std::string> cmds;
  std::vector<RunConfig> cfgs;
  for (const AblationRow& row : rows) {
    std::vector<std::string> ov = overrides;
    ov.insert(ov.end(), row.overrides.begin(), row.overrides.end());
    RunConfig cfg = config_path.empty() ? RunConfig::from_text("", ov)
                                        : RunConfig::from_file(config_path, ov);
    const std::string cfg_path = out + "/" + row.name + ".cfg";
    write_file_atomic(cfg_path, cfg.canonical_text());
    cfgs.push_back(cfg);
    cmds.push_back(shell_quote(argv0) + " train --config " + shell_quote(cfg_path) + " --out " +
                   shell_quote(out + "/" + row.name) + " --force > " +
                   shell_quote(out + "/" + row.name + ".log") + " 2>&1");
  }

  unsigned n_workers = std::thread::hardware_concurrency();
  if (const char* env = std::getenv("BEVCON_LAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n_workers = static_cast<unsigned>(v);
  }
  n_workers = std::min<unsigned>(std::max(1u, n_workers), static_cast<unsigned>(cmds.size()));

  std::atomic<size_t> cursor{0};
  std::vector<int> rc(cmds.size(), 0);
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < n_workers; ++w)
    workers.emplace_back([&] {
      for (size_t i = cursor.fetch_add(1); i < cmds.size(); i = cursor.fetch_add(1))
        rc[i] = std::system(cmds[i].c_str());
    });
  for (auto& w : workers) w.join();
  for (size_t i = 0; i < rc.size(); ++i)
    if (rc[i] != 0)
      throw std::runtime_error("ablate: row " + rows[i].name + " failed; see " + out + "/" +
                               rows[i].name + ".log");

  json table = json::array();
  std::string text = "row            flags                                        mAP        mATE       mAOE\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const json ev = last_eval_record(out + "/" + rows[i].name + "/metrics.jsonl");
    if (ev.is_null()) throw std::runtime_error("ablate: no eval record for row " + rows[i].name);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-14s %-44s %-10.6f %-10.6f %-10.6f\n", rows[i].name.c_str(),
                  flags_of(cfgs[i]).c_str(), ev["mAP"].get<double>(), ev["mATE"].get<double>(),
                  ev["mAOE"].get<double>());
    text += buf;
    json r;
    r["row"] = rows[i].name;
    r["flags"] = flags_of(cfgs[i]);
    r["mAP"] = ev["mAP"];
    r["mATE"] = ev["mATE"];
    r["mAOE"] = ev["mAOE"];
    table.push_back(r);
  }
  write_file_atomic(out + "/ablation.txt", text);
  write_file_atomic(out + "/ablation.json", dump_json_17g(table));
  std::fputs(text.c_str(), stdout);
  std::printf("ablate: table written to %s/ablation.txt\n", out.c_str());
  return 0;
}

int cmd_init_config(const std::string& kind, const std::string& out) {
  std::string text;
  if (kind == "run")
    text = RunConfig::documented_template();
  else if (kind == "data")
    text = dump_json_17g(SceneGenConfig().to_json());
  else
    throw std::runtime_error("unknown config kind '" + kind + "' (want run or data)");
  if (out.empty())
    std::fputs(text.c_str(), stdout);
  else {
    write_file_atomic(out, text);
    std::printf("init-config: wrote %s\n", out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevcon lab: synthetic BEV detection with dense contrastive training"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  std::string gen_config, gen_out;
  int gen_n = 0;
  std::uint64_t gen_seed = 0;
  bool gen_force = false;
  gen->add_option("--config", gen_config, "Scene generator config (json)");
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--n-scenes", gen_n, "Number of scenes")->required();
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Override the config seed");
  gen->add_flag("--force", gen_force, "Write into a non-empty directory");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  std::string tr_config, tr_out;
  std::vector<std::string> tr_set;
  bool tr_force = false;
  tr->add_option("--config", tr_config, "Run config (key = value text)");
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--set", tr_set, "Override a config key, e.g. --set run.epochs=2");
  tr->add_flag("--force", tr_force, "Write into a non-empty directory");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_dataset, ev_split = "val";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "train, val, or all");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run the ablation lattice");
  std::string ab_config, ab_out;
  std::vector<std::string> ab_set;
  bool ab_force = false;
  ab->add_option("--config", ab_config, "Base run config");
  ab->add_option("--out", ab_out, "Output directory")->required();
  ab->add_option("--set", ab_set, "Override applied to every row");
  ab->add_flag("--force", ab_force, "Write into a non-empty directory");

  // plot-bev
  auto* pl = app.add_subcommand("plot-bev", "Render GT and predictions over the BEV grid");
  std::string pl_ckpt, pl_dataset, pl_out;
  int pl_scene = 0;
  pl->add_option("--checkpoint", pl_ckpt, "Checkpoint file")->required();
  pl->add_option("--dataset", pl_dataset, "Dataset directory")->required();
  pl->add_option("--scene-id", pl_scene, "Scene id to render")->required();
  pl->add_option("--out", pl_out, "Output image (ppm)")->required();

  // init-config
  auto* ic = app.add_subcommand("init-config", "Print a documented default config");
  std::string ic_kind = "run", ic_out;
  ic->add_option("--kind", ic_kind, "run (training) or data (scene generator)");
  ic->add_option("--out", ic_out, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_config, gen_out, gen_n, gen_seed, gen_seed_opt->count() > 0,
                          gen_force);
    if (tr->parsed()) return cmd_train(tr_config, tr_out, tr_set, tr_force);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_dataset, ev_split);
    if (ab->parsed()) return cmd_ablate(argv[0], ab_config, ab_out, ab_set, ab_force);
    if (pl->parsed()) return cmd_plot_bev(pl_ckpt, pl_dataset, pl_scene, pl_out);
    if (ic->parsed()) return cmd_init_config(ic_kind, ic_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  std::fprintf(stderr, "error: no subcommand\n");
  return 1;
}
