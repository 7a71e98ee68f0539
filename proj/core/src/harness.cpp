#include "rtdforge/harness.hpp"

#include <cblas.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <memory>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rtdforge/checkpoint.hpp"
#include "rtdforge/config.hpp"
#include "rtdforge/error.hpp"
#include "rtdforge/finetune.hpp"
#include "rtdforge/metrics.hpp"
#include "rtdforge/tokenizer.hpp"

namespace rtdforge {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const ConfigError*>(&error) != nullptr) return kExitConfigError;
  if (dynamic_cast<const DataError*>(&error) != nullptr) return kExitDataError;
  return kExitFailure;
}

std::optional<int> apply_thread_cap() {
  const char* value = std::getenv("RTDFORGE_THREADS");
  if (value == nullptr || *value == '\0') {
    return std::nullopt;
  }
  const std::string_view text(value);
  int n = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), n);
  if (ec != std::errc() || ptr != text.data() + text.size() || n < 1) {
    throw ConfigError("RTDFORGE_THREADS must be a positive integer, got '" + std::string(text) + "'",
                      "RTDFORGE_THREADS");
  }
  openblas_set_num_threads(n);
  return n;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["config_digest"] = config_digest;
  j["seeds"] = seeds;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["status"] = to_string(status);
  j["artifacts"] = artifacts;
  if (!error.empty()) {
    j["error"] = error;
  }
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(std::string_view text) {
  RunManifest m;
  try {
    const json j = json::parse(text);
    m.command = j.at("command").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    const std::string status = j.at("status").get<std::string>();
    if (status == "completed") {
      m.status = RunStatus::kCompleted;
    } else if (status == "collapsed") {
      m.status = RunStatus::kCollapsed;
    } else if (status == "failed") {
      m.status = RunStatus::kFailed;
    } else {
      throw DataError("unknown manifest status " + status);
    }
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.error = j.value("error", "");
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void write_manifest(const RunManifest& manifest, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw DataError("cannot write " + tmp.string());
    }
    out << manifest.to_json();
  }
  fs::rename(tmp, dir / "manifest.json");
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << text;
}

std::string descriptor_text(const TaskDescriptor& t) {
  std::string labels, metrics;
  for (const auto& l : t.labels) labels += (labels.empty() ? "" : ",") + l;
  for (const auto& m : t.metrics) metrics += (metrics.empty() ? "" : ",") + m;
  return "name=" + t.name + "\ninput=" + (t.pair ? "pair" : "single") + "\noutput=" +
         (t.kind == TaskKind::kRegression ? std::string("regression")
                                          : "classification-" + std::to_string(t.labels.size())) +
         "\nlabels=" + labels + "\nmetrics=" + metrics + "\nepochs=" + std::to_string(t.epochs) +
         "\nmax_seq_len=" + std::to_string(t.max_seq_len) + "\n";
}

// Runs `body` and finalises the manifest whatever happens.
template <typename F>
int with_manifest(RunManifest& manifest, const fs::path& dir, F&& body) {
  manifest.started_at = utc_timestamp();
  try {
    const int code = body();
    manifest.finished_at = utc_timestamp();
    write_manifest(manifest, dir);
    return code;
  } catch (const std::exception& e) {
    manifest.status = RunStatus::kFailed;
    manifest.error = e.what();
    manifest.finished_at = utc_timestamp();
    try {
      write_manifest(manifest, dir);
    } catch (const std::exception&) {
      // The original error matters more than a missing manifest.
    }
    throw;
  }
}

}  // namespace

RunManifest read_manifest(const fs::path& dir) { return RunManifest::from_json(read_file(dir / "manifest.json")); }

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("seed list must be comma-separated non-negative integers, got '" +
                            std::string(text) + "'",
                        "seeds");
    }
    seeds.push_back(v);
    pos = end + 1;
  }
  return seeds;
}

int cmd_train_tokenizer(const TrainTokenizerArgs& args, std::ostream& out) {
  if (args.vocab_size < Vocab::kBaseSize) {
    throw ConfigError("--vocab-size must be at least " + std::to_string(Vocab::kBaseSize), "vocab-size");
  }
  const std::vector<std::string> docs = read_corpus(args.corpus);
  const Vocab vocab = train_vocab(docs, args.vocab_size);
  save_vocab(vocab, args.out);
  out << "vocab_size=" << vocab.size() << " merges=" << vocab.merges().size() << '\n';
  return kExitSuccess;
}

int cmd_pretrain(const PretrainArgs& args, std::ostream& out) {
  RunManifest manifest;
  manifest.command = "pretrain";
  return with_manifest(manifest, args.out, [&] {
    PretrainSettings settings = parse_pretrain_settings(KvConfig::load(args.config));
    const Vocab vocab = load_vocab(args.vocab);
    if (!settings.vocab_size_set) {
      settings.model.vocab_size = vocab.size();
    } else if (settings.model.vocab_size < vocab.size()) {
      throw ConfigError("vocab_size " + std::to_string(settings.model.vocab_size) +
                            " is smaller than the vocabulary (" + std::to_string(vocab.size()) + ")",
                        "vocab_size");
    }
    settings.model.validate();
    if (settings.model.max_positions < settings.pretrain.max_seq_len) {
      throw ConfigError("max_seq_len exceeds max_positions", "max_seq_len");
    }

    const std::string canonical =
        model_config_to_text(settings.model) + pretrain_config_to_text(settings.pretrain);
    manifest.config_digest = config_digest(canonical);
    manifest.seeds = {settings.pretrain.seed};
    write_file(args.out / "config.txt", canonical);
    manifest.artifacts["config"] = (args.out / "config.txt").string();

    const std::vector<std::string> docs = read_corpus(args.corpus);
    auto tokens = tokenize_documents(vocab, docs);

    PretrainRunOptions options;
    options.out_dir = args.out;
    options.resume_from = args.resume;
    if (!args.quiet) {
      options.log = &out;
    }
    const PretrainResult result =
        run_pretraining(std::move(tokens), vocab, settings.model, settings.pretrain, options);

    manifest.status = result.status;
    manifest.artifacts["metrics_log"] = (args.out / "metrics.log").string();
    manifest.artifacts["final_checkpoint"] = result.final_checkpoint.string();
    for (const fs::path& p : result.checkpoints) {
      if (p != result.final_checkpoint) {
        manifest.artifacts["checkpoint/" + p.stem().string()] = p.string();
      }
    }
    out << "status=" << to_string(result.status) << " steps=" << result.steps_completed;
    if (result.collapsed_at) {
      out << " collapsed_at=" << *result.collapsed_at;
    }
    out << " final_checkpoint=" << result.final_checkpoint.string() << '\n';
    const bool halted = result.status == RunStatus::kCollapsed && settings.pretrain.halt_on_collapse;
    return halted ? kExitCollapseHalt : kExitSuccess;
  });
}

TaskResult finetune_from_checkpoint(const Checkpoint& checkpoint, const fs::path& task_dir,
                                    const TaskDescriptor& task, const FinetuneConfig& config,
                                    const std::vector<std::uint64_t>& seeds, bool random_init) {
  const CheckpointSection* vocab_section = checkpoint.section("vocab");
  if (vocab_section == nullptr) {
    throw DataError("checkpoint has no vocabulary section");
  }
  const Vocab vocab = parse_vocab(vocab_section->text);
  const ModelConfig model_config = model_config_from_text(checkpoint.config_text);

  const std::size_t max_len = task.max_seq_len > 0 ? task.max_seq_len : config.max_seq_len;
  if (max_len > model_config.max_positions) {
    throw ConfigError("max_seq_len exceeds the checkpoint's max_positions", "max_seq_len");
  }
  const TaskData train = prepare_task_data(read_task_tsv(task_dir / "train.tsv"), task, vocab, max_len);
  const TaskData dev = prepare_task_data(read_task_tsv(task_dir / "dev.tsv"), task, vocab, max_len);

  EncoderFactory factory;
  if (random_init) {
    factory = [model_config](std::uint64_t seed) { return random_encoder<float>(model_config, seed); };
  } else {
    auto pretrained = std::make_shared<EncoderWeights<float>>(load_pretrained_encoder<float>(checkpoint));
    factory = [pretrained](std::uint64_t) { return clone_encoder(*pretrained); };
  }
  return multi_seed_eval(factory, train, dev, task, config, seeds);
}

int cmd_finetune(const FinetuneArgs& args, std::ostream& out) {
  RunManifest manifest;
  manifest.command = "finetune";
  return with_manifest(manifest, args.out, [&] {
    if (args.seeds.empty()) {
      throw ConfigError("at least one seed is required", "seeds");
    }
    FinetuneConfig config;
    if (args.config) {
      config = parse_finetune_settings(KvConfig::load(*args.config));
    }
    const TaskDescriptor task = parse_task_descriptor(KvConfig::load(args.descriptor));
    const std::string ckpt_bytes = read_file(args.checkpoint);
    const Checkpoint checkpoint = parse_checkpoint(ckpt_bytes);
    manifest.config_digest = config_digest(finetune_config_to_text(config) + descriptor_text(task));
    manifest.seeds = args.seeds;
    const TaskResult result =
        finetune_from_checkpoint(checkpoint, args.task, task, config, args.seeds, args.random_init);

    const std::string model_name =
        !args.model_name.empty() ? args.model_name
                                 : (args.random_init ? std::string("random-init") : args.checkpoint.stem().string());
    const std::string ckpt_digest = args.random_init ? "random-init" : fnv1a_hex(ckpt_bytes);

    std::string lines;
    std::map<std::string, std::vector<double>> percent;
    for (const SeedRun& run : result.runs) {
      ResultRecord record;
      record.model = model_name;
      record.task = task.name;
      record.seed = run.seed;
      for (const std::string& m : task.metrics) {
        const double v = run.result.metrics.at(m) * 100.0;
        record.metrics[m] = v;
        percent[m].push_back(v);
      }
      record.config_digest = manifest.config_digest;
      record.checkpoint_digest = ckpt_digest;
      lines += to_json_line(record) + "\n";
    }
    write_file(args.out / "results.jsonl", lines);

    json summary;
    summary["model"] = model_name;
    summary["task"] = task.name;
    summary["seeds"] = args.seeds;
    summary["unit"] = "percent";
    for (const auto& [metric, values] : percent) {
      const MeanStd ms = mean_std(values);
      summary["metrics"][metric] = {{"mean", ms.mean}, {"stddev", ms.stddev}, {"runs", values.size()}};
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s %s: %.2f +- %.2f (%zu seeds)\n", task.name.c_str(), metric.c_str(),
                    ms.mean, ms.stddev, values.size());
      out << buf;
    }
    write_file(args.out / "summary.json", summary.dump(2) + "\n");

    manifest.status = RunStatus::kCompleted;
    manifest.artifacts["results"] = (args.out / "results.jsonl").string();
    manifest.artifacts["summary"] = (args.out / "summary.json").string();
    manifest.artifacts["checkpoint"] = args.checkpoint.string();
    return kExitSuccess;
  });
}

int cmd_glue_report(const GlueReportArgs& args, std::ostream& out) {
  if (args.results.empty()) {
    throw ConfigError("at least one results path is required", "results");
  }
  std::vector<ResultRecord> records;
  for (const fs::path& p : args.results) {
    std::vector<ResultRecord> r = read_result_records(p);
    records.insert(records.end(), r.begin(), r.end());
  }
  const std::vector<AggregationMode> modes =
      args.modes.empty() ? std::vector<AggregationMode>{AggregationMode::kAvg} : args.modes;
  Report report;
  try {
    report = build_report(records, modes);
  } catch (const ValueError& e) {
    throw DataError(e.what());
  }
  const std::string text = render_report_text(report);
  out << text;
  if (args.out) {
    write_file(*args.out, args.out->extension() == ".json" ? render_report_json(report) : text);
  }
  return kExitSuccess;
}

int cmd_estimate_compute(const EstimateComputeArgs& args, std::ostream& out) {
  double pfs = 0.0;
  try {
    pfs = estimate_pfs_days({args.tflops, args.devices, args.utilization, args.days});
  } catch (const ValueError& e) {
    throw ConfigError(std::string("usage: ") + e.what());
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "pfs_days=%.6g\npfs_days_rounded=%.2f\n", pfs, pfs);
  out << buf;
  if (args.score) {
    double per_point = 0.0;
    try {
      per_point = pfs_days_per_point(pfs, *args.score);
    } catch (const ValueError& e) {
      throw ConfigError(std::string("usage: ") + e.what());
    }
    std::snprintf(buf, sizeof buf, "pfs_days_per_point=%.6g\n", per_point);
    out << buf;
  }
  return kExitSuccess;
}

}  // namespace rtdforge
