#include "rtdforge/glue.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rtdforge/error.hpp"
#include "rtdforge/metrics.hpp"

namespace rtdforge {

using nlohmann::json;

const std::vector<TaskMetricSpec>& glue_task_specs() {
  static const std::vector<TaskMetricSpec> specs = {
      {"CoLA", {"mcc"}, "mcc"},
      {"SST-2", {"acc"}, "acc"},
      {"MRPC", {"f1", "acc"}, "acc"},
      {"STS-B", {"pearson", "spearman"}, "spearman"},
      {"QQP", {"f1", "acc"}, "acc"},
      {"MNLI", {"acc"}, "acc"},
      {"QNLI", {"acc"}, "acc"},
      {"RTE", {"acc"}, "acc"},
  };
  return specs;
}

const TaskMetricSpec* find_task_spec(std::string_view task) {
  for (const TaskMetricSpec& s : glue_task_specs()) {
    if (s.task == task) {
      return &s;
    }
  }
  return nullptr;
}

AggregationMode parse_aggregation_mode(std::string_view text) {
  if (text == "avg") return AggregationMode::kAvg;
  if (text == "avg-tasks") return AggregationMode::kAvgTasks;
  if (text == "glue") return AggregationMode::kGlue;
  throw ValueError("unknown aggregation mode '" + std::string(text) + "' (avg, avg-tasks, glue)");
}

std::string to_string(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::kAvg:
      return "avg";
    case AggregationMode::kAvgTasks:
      return "avg-tasks";
    case AggregationMode::kGlue:
      return "glue";
  }
  return "?";
}

namespace {

double metric_of(const std::string& task, const TaskMetrics& metrics, const std::string& name) {
  const auto it = metrics.find(name);
  if (it == metrics.end()) {
    throw ValueError("task " + task + " is missing metric " + name);
  }
  return it->second;
}

}  // namespace

double task_score(const std::string& task, const TaskMetrics& metrics) {
  if (const TaskMetricSpec* spec = find_task_spec(task)) {
    double total = 0.0;
    for (const std::string& m : spec->metrics) {
      total += metric_of(task, metrics, m);
    }
    return total / static_cast<double>(spec->metrics.size());
  }
  if (metrics.empty()) {
    throw ValueError("task " + task + " has no metrics");
  }
  double total = 0.0;
  for (const auto& [name, value] : metrics) {
    total += value;
  }
  return total / static_cast<double>(metrics.size());
}

double headline_score(const std::string& task, const TaskMetrics& metrics) {
  if (const TaskMetricSpec* spec = find_task_spec(task)) {
    return metric_of(task, metrics, spec->headline);
  }
  if (metrics.size() != 1) {
    throw ValueError("task " + task + " has no single headline metric");
  }
  return metrics.begin()->second;
}

double aggregate(const ModelResults& results, AggregationMode mode) {
  if (mode == AggregationMode::kGlue) {
    double total = kWnliScore;
    for (const TaskMetricSpec& spec : glue_task_specs()) {
      const auto it = results.find(spec.task);
      if (it == results.end()) {
        throw ValueError("GLUE score needs task " + spec.task + " (metrics: " + spec.metrics.front() +
                         (spec.metrics.size() > 1 ? ", " + spec.metrics.back() : "") + ")");
      }
      total += task_score(spec.task, it->second);
    }
    return total / static_cast<double>(glue_task_specs().size() + 1);
  }
  if (results.empty()) {
    throw ValueError("nothing to aggregate");
  }
  double total = 0.0;
  for (const auto& [task, metrics] : results) {
    total += mode == AggregationMode::kAvg ? headline_score(task, metrics) : task_score(task, metrics);
  }
  return total / static_cast<double>(results.size());
}

ResultRecord parse_result_record(std::string_view json_line) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed result record: ") + e.what());
  }
  if (!j.is_object()) {
    throw DataError("result record must be a JSON object");
  }
  try {
    ResultRecord r;
    r.model = j.at("model").get<std::string>();
    r.task = j.at("task").get<std::string>();
    if (j.contains("seed") && !j["seed"].is_null()) {
      r.seed = j["seed"].get<std::uint64_t>();
    }
    const std::string unit = j.value("unit", "fraction");
    double factor = 1.0;
    if (unit == "fraction") {
      factor = 100.0;
    } else if (unit != "percent") {
      throw DataError("result record unit must be fraction or percent, got " + unit);
    }
    for (const auto& [name, value] : j.at("metrics").items()) {
      r.metrics[name] = value.get<double>() * factor;
    }
    r.config_digest = j.value("config_digest", "");
    r.checkpoint_digest = j.value("checkpoint_digest", "");
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid result record: ") + e.what());
  }
}

std::string to_json_line(const ResultRecord& r) {
  json j;
  j["model"] = r.model;
  j["task"] = r.task;
  j["seed"] = r.seed ? json(*r.seed) : json(nullptr);
  j["unit"] = "percent";
  j["metrics"] = json::object();
  for (const auto& [name, value] : r.metrics) {
    j["metrics"][name] = value;
  }
  j["config_digest"] = r.config_digest;
  j["checkpoint_digest"] = r.checkpoint_digest;
  return j.dump();
}

namespace {

void read_record_file(const std::filesystem::path& path, std::vector<ResultRecord>& out) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open results file " + path.string());
  }
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      out.push_back(parse_result_record(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
}

}  // namespace

std::vector<ResultRecord> read_result_records(const std::filesystem::path& path) {
  std::vector<ResultRecord> records;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      read_record_file(f, records);
    }
  } else {
    read_record_file(path, records);
  }
  return records;
}

Report build_report(const std::vector<ResultRecord>& records,
                    const std::vector<AggregationMode>& modes) {
  // model -> task -> metric -> values
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> grouped;
  for (const ResultRecord& r : records) {
    for (const auto& [metric, value] : r.metrics) {
      grouped[r.model][r.task][metric].push_back(value);
    }
  }

  Report report;
  report.modes = modes;
  std::set<std::string> tasks;
  for (auto& [model, by_task] : grouped) {
    ReportRow row;
    row.model = model;
    ModelResults means;
    for (auto& [task, by_metric] : by_task) {
      tasks.insert(task);
      for (auto& [metric, values] : by_metric) {
        std::sort(values.begin(), values.end());
        const MeanStd ms = mean_std(values);
        row.tasks[task][metric] = MetricSummary{ms.mean, ms.stddev, values.size()};
        means[task][metric] = ms.mean;
      }
    }
    for (AggregationMode mode : modes) {
      try {
        row.scores[mode] = aggregate(means, mode);
      } catch (const ValueError& e) {
        throw ValueError("model " + model + ": " + e.what());
      }
    }
    report.rows.push_back(std::move(row));
  }
  for (const TaskMetricSpec& spec : glue_task_specs()) {
    if (tasks.erase(spec.task) > 0) {
      report.task_columns.push_back(spec.task);
    }
  }
  report.task_columns.insert(report.task_columns.end(), tasks.begin(), tasks.end());
  return report;
}

namespace {

std::string fixed(double v, int decimals) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(decimals);
  os << v;
  return os.str();
}

// Headline cell: the headline metric when defined, else the task score.
std::optional<MetricSummary> headline_cell(const std::string& task,
                                           const std::map<std::string, MetricSummary>& metrics) {
  std::string name;
  if (const TaskMetricSpec* spec = find_task_spec(task)) {
    name = spec->headline;
  } else if (metrics.size() == 1) {
    name = metrics.begin()->first;
  }
  const auto it = metrics.find(name);
  if (it == metrics.end()) {
    return std::nullopt;
  }
  return it->second;
}

std::string mode_label(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::kAvg:
      return "AVG";
    case AggregationMode::kAvgTasks:
      return "AVG-TASKS";
    case AggregationMode::kGlue:
      return "GLUE";
  }
  return "?";
}

}  // namespace

std::string render_report_text(const Report& report) {
  std::vector<std::string> header{"Model"};
  for (const std::string& task : report.task_columns) {
    std::string metric;
    if (const TaskMetricSpec* spec = find_task_spec(task)) {
      metric = " (" + spec->headline + ")";
    }
    header.push_back(task + metric);
  }
  for (AggregationMode mode : report.modes) {
    header.push_back(mode_label(mode));
  }

  std::vector<std::vector<std::string>> table{header};
  for (const ReportRow& row : report.rows) {
    std::vector<std::string> cells{row.model};
    for (const std::string& task : report.task_columns) {
      const auto it = row.tasks.find(task);
      std::optional<MetricSummary> s;
      if (it != row.tasks.end()) {
        s = headline_cell(task, it->second);
      }
      if (!s) {
        cells.emplace_back("-");
      } else if (s->runs > 1) {
        cells.push_back(fixed(s->mean, 1) + " ± " + fixed(s->stddev, 2));
      } else {
        cells.push_back(fixed(s->mean, 1));
      }
    }
    for (AggregationMode mode : report.modes) {
      cells.push_back(fixed(row.scores.at(mode), 1));
    }
    table.push_back(std::move(cells));
  }

  auto width = [](const std::string& s) {
    // Display width: count UTF-8 lead bytes only.
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) {
      return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
    }));
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& r : table) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      widths[c] = std::max(widths[c], width(r[c]));
    }
  }
  std::ostringstream os;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t c = 0; c < table[r].size(); ++c) {
      const std::string& cell = table[r][c];
      os << (c == 0 ? "" : "  ") << cell << std::string(widths[c] - width(cell), ' ');
    }
    os << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t w : widths) {
        total += w;
      }
      os << std::string(total + 2 * (widths.size() - 1), '-') << '\n';
    }
  }
  return os.str();
}

std::string render_report_json(const Report& report) {
  json j;
  j["tasks"] = report.task_columns;
  j["modes"] = json::array();
  for (AggregationMode m : report.modes) {
    j["modes"].push_back(to_string(m));
  }
  j["rows"] = json::array();
  for (const ReportRow& row : report.rows) {
    json r;
    r["model"] = row.model;
    r["tasks"] = json::object();
    for (const auto& [task, metrics] : row.tasks) {
      for (const auto& [metric, s] : metrics) {
        r["tasks"][task][metric] = {{"mean", s.mean}, {"stddev", s.stddev}, {"runs", s.runs}};
      }
    }
    r["scores"] = json::object();
    for (const auto& [mode, score] : row.scores) {
      r["scores"][to_string(mode)] = score;
    }
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

double estimate_pfs_days(const ComputeEstimate& e) {
  if (!(e.tflops_per_device > 0.0)) throw ValueError("tflops per device must be positive");
  if (!(e.device_count > 0.0)) throw ValueError("device count must be positive");
  if (!(e.utilization > 0.0 && e.utilization <= 1.0)) throw ValueError("utilization must lie in (0, 1]");
  if (!(e.days > 0.0)) throw ValueError("days must be positive");
  return e.tflops_per_device * e.device_count * e.utilization * e.days / 1000.0;
}

double pfs_days_per_point(double pfs_days, double score) {
  if (!(score > 0.0)) {
    throw ValueError("score must be positive");
  }
  return pfs_days / score * 100.0;
}

}  // namespace rtdforge
