#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rtdforge {

/// Majority-class WNLI accuracy substituted in GLUE mode.
inline constexpr double kWnliScore = 56.34;

struct TaskMetricSpec {
  std::string task;
  std::vector<std::string> metrics;  // the task's official metrics
  std::string headline;              // the single metric shown in AVG tables
};

/// The eight non-WNLI GLUE tasks in table order.
const std::vector<TaskMetricSpec>& glue_task_specs();
const TaskMetricSpec* find_task_spec(std::string_view task);

enum class AggregationMode {
  kAvg,       // mean of per-task headline metrics
  kAvgTasks,  // mean of per-task multi-metric means, over the tasks supplied
  kGlue,      // mean over the nine GLUE task scores, WNLI fixed
};

AggregationMode parse_aggregation_mode(std::string_view text);
std::string to_string(AggregationMode mode);

using TaskMetrics = std::map<std::string, double>;    // metric -> percentage points
using ModelResults = std::map<std::string, TaskMetrics>;  // task -> metrics

/// Unweighted mean of the task's official metrics (all supplied metrics for a
/// task outside GLUE). Throws ValueError naming the task and metric when one
/// is missing.
double task_score(const std::string& task, const TaskMetrics& metrics);

/// Headline metric of a task; single-metric tasks outside GLUE use their
/// only metric.
double headline_score(const std::string& task, const TaskMetrics& metrics);

double aggregate(const ModelResults& results, AggregationMode mode);

/// One fine-tuning outcome or one published number set.
struct ResultRecord {
  std::string model;
  std::string task;
  std::optional<std::uint64_t> seed;
  TaskMetrics metrics;  // stored in percentage points
  std::string config_digest;
  std::string checkpoint_digest;
};

/// JSON object per line. `unit` is "fraction" (scaled by 100 on read) or
/// "percent".
ResultRecord parse_result_record(std::string_view json_line);
std::string to_json_line(const ResultRecord& record);

/// Reads every record from a .jsonl file, or from all .jsonl files below a
/// directory (sorted by path).
std::vector<ResultRecord> read_result_records(const std::filesystem::path& path);

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t runs = 0;
};

struct ReportRow {
  std::string model;
  std::map<std::string, std::map<std::string, MetricSummary>> tasks;  // task -> metric -> summary
  std::map<AggregationMode, double> scores;
};

struct Report {
  std::vector<std::string> task_columns;
  std::vector<AggregationMode> modes;
  std::vector<ReportRow> rows;  // sorted by model name
};

/// Groups records by model, summarises seeds by mean and sample stddev, and
/// aggregates the means. Record order does not affect the result.
Report build_report(const std::vector<ResultRecord>& records,
                    const std::vector<AggregationMode>& modes);
std::string render_report_text(const Report& report);
std::string render_report_json(const Report& report);

struct ComputeEstimate {
  double tflops_per_device = 0.0;
  double device_count = 0.0;
  double utilization = 0.33;
  double days = 0.0;
};

/// tflops x devices x utilization x days / 1000.
double estimate_pfs_days(const ComputeEstimate& estimate);

/// Pfs-days per percentage point of score, times 100 as in efficiency tables.
double pfs_days_per_point(double pfs_days, double score);

}  // namespace rtdforge
