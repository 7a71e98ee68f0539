#include "rtdforge/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/harness.hpp"
#include "rtdforge/tokenizer.hpp"

namespace rtdforge {

namespace fs = std::filesystem;
using nlohmann::json;

void SweepSpec::validate() const {
  if (multipliers.empty()) {
    throw ConfigError("multipliers must not be empty", "multipliers");
  }
  std::set<double> seen;
  for (double m : multipliers) {
    if (!(m > 0.0 && m <= 1.0)) {
      throw ConfigError("multiplier " + std::to_string(m) + " outside (0, 1]", "multipliers");
    }
    if (!seen.insert(m).second) {
      throw ConfigError("multiplier " + std::to_string(m) + " listed twice", "multipliers");
    }
  }
  model.validate();
  PretrainConfig p = pretrain;
  if (steps > 0) {
    p.total_steps = steps;
  }
  p.validate();
}

SweepSpec parse_sweep_spec(const KvConfig& kv, const fs::path& base_dir) {
  static const std::vector<std::string_view> keys = {"multipliers", "steps",  "halt_on_collapse",
                                                     "base_config", "corpus", "vocab"};
  kv.reject_unknown(keys);
  SweepSpec spec;
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };

  if (kv.has("multipliers")) {
    spec.multipliers.clear();
    const KvEntry* e = kv.find("multipliers");
    for (const std::string& item : kv.get_list("multipliers")) {
      try {
        std::size_t used = 0;
        spec.multipliers.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError(kv.source() + " line " + std::to_string(e->line) + ": multipliers: '" + item +
                              "' is not a number",
                          "multipliers", e->line);
      }
    }
  }
  spec.steps = kv.get_u64("steps", 0);
  spec.halt_on_collapse = kv.get_bool("halt_on_collapse", true);
  if (kv.has("base_config")) {
    const PretrainSettings base = parse_pretrain_settings(KvConfig::load(resolve(kv.get_string("base_config", ""))));
    spec.model = base.model;
    spec.pretrain = base.pretrain;
    spec.vocab_size_set = base.vocab_size_set;
  }
  if (kv.has("corpus")) spec.corpus = resolve(kv.get_string("corpus", ""));
  if (kv.has("vocab")) spec.vocab = resolve(kv.get_string("vocab", ""));
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    const KvEntry* entry = kv.find(e.key());
    throw ConfigError(kv.source() + (entry ? " line " + std::to_string(entry->line) : "") + ": " + e.what(),
                      e.key(), entry ? entry->line : 0);
  }
  return spec;
}

namespace {

std::string multiplier_label(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", m);
  return buf;
}

std::string percent_label(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g%%", m * 100.0);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

}  // namespace

std::vector<SweepRunPlan> plan_sweep(const SweepSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::vector<SweepRunPlan> plans;
  for (std::size_t i = 0; i < spec.multipliers.size(); ++i) {
    SweepRunPlan plan;
    plan.index = i;
    plan.multiplier = spec.multipliers[i];
    plan.model = spec.model;
    plan.model.generator_multiplier = spec.multipliers[i];
    plan.pretrain = spec.pretrain;
    if (spec.steps > 0) {
      plan.pretrain.total_steps = spec.steps;
    }
    plan.pretrain.halt_on_collapse = spec.halt_on_collapse;
    if (!out_dir.empty()) {
      plan.out_dir = out_dir / ("gen-" + multiplier_label(plan.multiplier));
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

SweepRunner pretraining_runner(std::vector<std::vector<TokenId>> documents, Vocab vocab) {
  auto docs = std::make_shared<const std::vector<std::vector<TokenId>>>(std::move(documents));
  auto shared_vocab = std::make_shared<const Vocab>(std::move(vocab));
  return [docs, shared_vocab](const SweepRunPlan& plan) {
    PretrainRunOptions options;
    options.out_dir = plan.out_dir;
    return run_pretraining(*docs, *shared_vocab, plan.model, plan.pretrain, options);
  };
}

SweepRunner scripted_runner(std::function<double(double, std::uint64_t)> auc) {
  return [auc = std::move(auc)](const SweepRunPlan& plan) {
    CollapseMonitor monitor(plan.pretrain.collapse_window, plan.pretrain.collapse_threshold);
    PretrainResult result;
    for (std::uint64_t step = 1; step <= plan.pretrain.total_steps; ++step) {
      const double a = auc(plan.multiplier, step);
      monitor.observe(step, a);
      result.last.disc_auc = a;
      result.steps_completed = step;
      if (monitor.tripped_at() == step && plan.pretrain.halt_on_collapse) {
        break;
      }
    }
    result.collapsed_at = monitor.tripped_at();
    result.status = result.collapsed_at ? RunStatus::kCollapsed : RunStatus::kCompleted;
    result.final_window_auc = monitor.window_mean();
    return result;
  };
}

std::vector<SweepRunRecord> run_sweep(const std::vector<SweepRunPlan>& plans, const SweepRunner& runner,
                                      const SweepOptions& options) {
  std::vector<SweepRunRecord> records(plans.size());
  std::mutex progress_mutex;

  auto run_one = [&](std::size_t i) {
    const SweepRunPlan& plan = plans[i];
    SweepRunRecord& rec = records[i];
    rec.multiplier = plan.multiplier;
    rec.out_dir = plan.out_dir;

    RunManifest manifest;
    manifest.command = "sweep-run";
    manifest.config_digest = config_digest(model_config_to_text(plan.model) + pretrain_config_to_text(plan.pretrain));
    manifest.seeds = {plan.pretrain.seed};
    manifest.started_at = utc_timestamp();
    try {
      const PretrainResult result = runner(plan);
      rec.status = result.status;
      rec.steps_completed = result.steps_completed;
      rec.collapsed_at = result.collapsed_at;
      rec.final_disc_auc = result.last.disc_auc;
      rec.final_window_auc = result.final_window_auc;
      rec.gen_masked_accuracy = result.last.gen_masked_accuracy;
      if (!plan.out_dir.empty()) {
        manifest.artifacts["metrics_log"] = (plan.out_dir / "metrics.log").string();
        if (!result.final_checkpoint.empty()) {
          manifest.artifacts["final_checkpoint"] = result.final_checkpoint.string();
        }
      }
      if (rec.status == RunStatus::kCompleted && options.downstream) {
        try {
          rec.downstream = options.downstream(plan, result);
        } catch (const std::exception& e) {
          rec.error = std::string("downstream evaluation failed: ") + e.what();
        }
      }
    } catch (const std::exception& e) {
      rec.status = RunStatus::kFailed;
      rec.error = e.what();
    }
    manifest.status = rec.status;
    manifest.error = rec.error;
    manifest.finished_at = utc_timestamp();
    if (!plan.out_dir.empty()) {
      try {
        write_manifest(manifest, plan.out_dir);
      } catch (const std::exception& e) {
        if (rec.error.empty()) rec.error = e.what();
      }
    }
    if (options.progress != nullptr) {
      std::lock_guard lock(progress_mutex);
      *options.progress << "gen " << percent_label(rec.multiplier) << ": " << to_string(rec.status)
                        << " after " << rec.steps_completed << " steps"
                        << (rec.error.empty() ? "" : " (" + rec.error + ")") << '\n';
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.parallelism, plans.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < plans.size(); ++i) run_one(i);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < plans.size(); i = next++) run_one(i);
    });
  }
  for (std::thread& t : threads) t.join();
  return records;
}

std::string render_sweep_text(const std::vector<SweepRunRecord>& records) {
  std::set<std::string> metric_names;
  for (const SweepRunRecord& r : records) {
    for (const auto& [name, value] : r.downstream) metric_names.insert(name);
  }
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %-10s %8s %12s %9s %11s %8s", "Gen.Size", "Status", "Steps",
                "Collapsed at", "Disc AUC", "Window AUC", "Gen acc");
  out += buf;
  for (const std::string& m : metric_names) {
    std::snprintf(buf, sizeof buf, " %10s", m.c_str());
    out += buf;
  }
  out += "\n";
  for (const SweepRunRecord& r : records) {
    const std::string collapsed = r.collapsed_at ? std::to_string(*r.collapsed_at) : "-";
    std::snprintf(buf, sizeof buf, "%-10s %-10s %8llu %12s %9.4f %11.4f %8.4f", percent_label(r.multiplier).c_str(),
                  to_string(r.status).c_str(), static_cast<unsigned long long>(r.steps_completed),
                  collapsed.c_str(), r.final_disc_auc, r.final_window_auc, r.gen_masked_accuracy);
    out += buf;
    for (const std::string& m : metric_names) {
      const auto it = r.downstream.find(m);
      if (it == r.downstream.end()) {
        std::snprintf(buf, sizeof buf, " %10s", "-");
      } else {
        std::snprintf(buf, sizeof buf, " %10.2f", it->second);
      }
      out += buf;
    }
    if (!r.error.empty()) {
      out += "  # " + r.error;
    }
    out += "\n";
  }
  return out;
}

std::string render_sweep_json(const std::vector<SweepRunRecord>& records) {
  json runs = json::array();
  for (const SweepRunRecord& r : records) {
    json j;
    j["generator_multiplier"] = r.multiplier;
    j["out_dir"] = r.out_dir.string();
    j["status"] = to_string(r.status);
    j["steps_completed"] = r.steps_completed;
    j["collapsed_at"] = r.collapsed_at ? json(*r.collapsed_at) : json(nullptr);
    j["final_disc_auc"] = r.final_disc_auc;
    j["final_window_auc"] = r.final_window_auc;
    j["gen_masked_accuracy"] = r.gen_masked_accuracy;
    j["downstream"] = r.downstream;
    if (!r.error.empty()) j["error"] = r.error;
    runs.push_back(std::move(j));
  }
  return json{{"runs", runs}}.dump(2) + "\n";
}

int cmd_sweep_generator(const SweepArgs& args, std::ostream& out) {
  RunManifest manifest;
  manifest.command = "sweep-generator";
  manifest.started_at = utc_timestamp();
  try {
    SweepSpec spec = parse_sweep_spec(KvConfig::load(args.spec), args.spec.parent_path());
    if (spec.corpus.empty() || spec.vocab.empty()) {
      throw ConfigError("sweep spec needs corpus and vocab", spec.corpus.empty() ? "corpus" : "vocab");
    }
    const Vocab vocab = load_vocab(spec.vocab);
    if (!spec.vocab_size_set) {
      spec.model.vocab_size = vocab.size();
    }
    spec.validate();

    std::optional<TaskDescriptor> task;
    FinetuneConfig ft_config;
    if (args.finetune_task) {
      if (!args.descriptor) {
        throw ConfigError("--finetune-task needs --descriptor", "descriptor");
      }
      task = parse_task_descriptor(KvConfig::load(*args.descriptor));
      if (args.finetune_config) {
        ft_config = parse_finetune_settings(KvConfig::load(*args.finetune_config));
      }
    }

    std::string canonical = model_config_to_text(spec.model) + pretrain_config_to_text(spec.pretrain) +
                            "steps=" + std::to_string(spec.steps) +
                            "\nhalt_on_collapse=" + (spec.halt_on_collapse ? "true" : "false") + "\nmultipliers=";
    for (double m : spec.multipliers) canonical += multiplier_label(m) + ",";
    manifest.config_digest = config_digest(canonical + "\n");
    manifest.seeds = {spec.pretrain.seed};

    const std::vector<std::string> docs = read_corpus(spec.corpus);
    const auto plans = plan_sweep(spec, args.out);

    SweepOptions options;
    options.parallelism = args.parallelism;
    options.progress = &out;
    if (task) {
      options.downstream = [&](const SweepRunPlan&, const PretrainResult& result) {
        const TaskResult tr = finetune_from_checkpoint(load_checkpoint(result.final_checkpoint), *args.finetune_task,
                                                       *task, ft_config, args.finetune_seeds, false);
        std::map<std::string, double> metrics;
        for (const std::string& m : task->metrics) {
          metrics[task->name + "/" + m] = tr.summary.at(m).mean * 100.0;
        }
        return metrics;
      };
    }
    const auto records = run_sweep(plans, pretraining_runner(tokenize_documents(vocab, docs), vocab), options);

    const std::string text = render_sweep_text(records);
    write_text(args.out / "summary.txt", text);
    write_text(args.out / "summary.json", render_sweep_json(records));
    out << text;
    manifest.status = RunStatus::kCompleted;
    manifest.artifacts["summary_text"] = (args.out / "summary.txt").string();
    manifest.artifacts["summary_json"] = (args.out / "summary.json").string();
    for (const SweepRunPlan& p : plans) {
      manifest.artifacts["run/" + multiplier_label(p.multiplier)] = p.out_dir.string();
    }
    manifest.finished_at = utc_timestamp();
    write_manifest(manifest, args.out);
    return kExitSuccess;
  } catch (const std::exception& e) {
    manifest.status = RunStatus::kFailed;
    manifest.error = e.what();
    manifest.finished_at = utc_timestamp();
    try {
      write_manifest(manifest, args.out);
    } catch (const std::exception&) {
    }
    throw;
  }
}

}  // namespace rtdforge
