// Copyright 2026 The Pipeflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// pipeflow: servers, simulator and planner front end.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
// 3 protocol or transport error, 4 invariant violation in a simulation.
// PIPEFLOW_LOG_LEVEL (trace|debug|info|warn|error|off) overrides the
// configured log level.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "pipeflow/planner.hpp"
#include "pipeflow/services.hpp"
#include "pipeflow/simulator.hpp"

namespace {

using namespace pipeflow;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitViolation = 4;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kConfig, "cannot read " + path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kConfig, "cannot write " + path);
  out << text << "\n";
}

void set_log_level(const std::string& configured) {
  const char* env = std::getenv("PIPEFLOW_LOG_LEVEL");
  const std::string name = env && *env ? env : configured;
  const auto level = spdlog::level::from_str(name);
  if (level == spdlog::level::off && name != "off") {
    throw Error(ErrorCode::kConfig, "unknown log level " + name);
  }
  spdlog::set_level(level);
}

/// Accepts a scenario file or a run config with a "scenario" object, then
/// applies dotted key=value overrides (values parsed as JSON, else strings).
sim::Scenario load_scenario(const std::string& path, const std::vector<std::string>& overrides) {
  json j;
  if (!path.empty()) {
    try {
      j = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfig, path + ": " + e.what());
    }
    if (j.contains("scenario") && j.contains("storage_units")) j = j.at("scenario");
  } else {
    j = json::parse(sim::scenario_to_json(sim::default_scenario()));
  }
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw Error(ErrorCode::kConfig, "override '" + item + "' is not key=value");
    const auto key = item.substr(0, eq);
    const auto text = item.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::size_t start = 0;
    for (std::size_t dot; (dot = key.find('.', start)) != std::string::npos; start = dot + 1) {
      node = &(*node)[key.substr(start, dot - start)];
    }
    (*node)[key.substr(start)] = value;
  }
  return sim::scenario_from_json(j.dump());
}

void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {}, shutting down", sig);
}

void block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

void announce(const std::string& what, const net::Endpoint& ep) {
  spdlog::info("{} listening on {}", what, ep.to_string());
  std::cout << "ready " << ep.to_string() << std::endl;
}

struct StorageArgs {
  std::string config;
  std::uint32_t unit_id = 0;
  std::uint32_t global_batch = 0;
  std::uint32_t num_units = 1;
  std::uint64_t epoch = 0;
  std::string bind = "127.0.0.1:0";
};

int serve_storage(const StorageArgs& a) {
  net::Endpoint bind = net::Endpoint::parse(a.bind);
  std::uint32_t global_batch = a.global_batch;
  std::uint32_t num_units = a.num_units;
  Epoch epoch = a.epoch;
  if (!a.config.empty()) {
    auto cfg = svc::RunConfig::parse(read_file(a.config));
    set_log_level(cfg.log_level);
    if (a.unit_id >= cfg.storage_units.size()) {
      throw Error(ErrorCode::kConfig, "unit id " + std::to_string(a.unit_id) + " not in config");
    }
    bind = cfg.storage_units[a.unit_id];
    global_batch = cfg.global_batch;
    num_units = static_cast<std::uint32_t>(cfg.storage_units.size());
    epoch = cfg.epoch;
  } else {
    set_log_level("info");
  }
  if (global_batch == 0 || num_units == 0 || a.unit_id >= num_units || num_units > global_batch) {
    throw Error(ErrorCode::kConfig, "need 0 < num-units <= global-batch and unit-id < num-units");
  }
  const PartitionMap partition(num_units, global_batch);
  svc::StorageServer server(std::make_shared<StorageUnit>(a.unit_id, epoch, partition.rows_of(a.unit_id)), bind);
  server.start();
  announce("storage unit " + std::to_string(a.unit_id), server.endpoint());
  wait_for_signal();
  server.stop();
  return kExitOk;
}

int serve_controller(const std::string& config, const std::string& task_name, int register_timeout_s) {
  auto cfg = svc::RunConfig::parse(read_file(config));
  set_log_level(cfg.log_level);
  const auto& task = cfg.task(task_name);
  svc::ControllerServer server(std::make_shared<Controller>(task.spec, cfg.global_batch, cfg.epoch),
                               task.controller);
  server.start();
  // Storage units may still be starting.
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(register_timeout_s);
  for (std::size_t unit = 0; unit < cfg.storage_units.size();) {
    try {
      server.register_with({cfg.storage_units[unit]});
      ++unit;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kTransport || std::chrono::steady_clock::now() > deadline) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
  announce("controller " + task_name, server.endpoint());
  wait_for_signal();
  server.stop();
  return kExitOk;
}

int serve_coordinator(const std::string& config) {
  auto cfg = svc::RunConfig::parse(read_file(config));
  set_log_level(cfg.log_level);
  const auto bind = cfg.coordinator;
  svc::CoordinatorServer server(std::move(cfg), bind);
  server.start();
  announce("coordinator", server.endpoint());
  wait_for_signal();
  server.stop();
  return kExitOk;
}

struct SimArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> iterations;
  std::string report = "-";
  bool gantt = false;
  std::string trace;
  std::string trace_format = "json_lines";
};

int run_sim(const SimArgs& a) {
  set_log_level("warn");
  auto overrides = a.overrides;
  if (!a.mode.empty()) overrides.push_back("mode=\"" + a.mode + "\"");
  if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
  if (a.iterations) overrides.push_back("iterations=" + std::to_string(*a.iterations));
  const auto scenario = load_scenario(a.config, overrides);
  const auto format = sim::parse_trace_format(a.trace_format);
  const auto report = sim::run(scenario);
  write_output(a.report, sim::report_to_json(report, a.gantt));
  if (!a.trace.empty()) sim::export_trace(report, a.trace, format);
  for (const auto& v : report.violations) spdlog::error("invariant violation: {}", v);
  return report.violations.empty() ? kExitOk : kExitViolation;
}

int trace_export(const std::string& config, const std::vector<std::string>& overrides, const std::string& format,
                 const std::string& output) {
  set_log_level("warn");
  const auto fmt = sim::parse_trace_format(format);
  const auto report = sim::run(load_scenario(config, overrides));
  if (output.empty() || output == "-") {
    std::cout << sim::render_trace(report.gantt, fmt);
  } else {
    sim::export_trace(report, output, fmt);
  }
  return report.violations.empty() ? kExitOk : kExitViolation;
}

int plan_cmd(const std::string& tasks_file, std::uint32_t budget, std::size_t keep_k, const std::string& output) {
  set_log_level("warn");
  const auto req = plan::request_from_json(read_file(tasks_file), budget, keep_k);
  const auto result = plan::plan(req);
  write_output(output, plan::result_to_json(result));
  return result.report.violations.empty() ? kExitOk : kExitViolation;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kScenarioInvalid:
    case ErrorCode::kInfeasibleBudget:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kWrongTask:
      return kExitConfig;
    case ErrorCode::kProtocol:
    case ErrorCode::kTransport:
    case ErrorCode::kControllerUnreachable:
      return kExitProtocol;
    default:
      return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("pipeflow"));
  CLI::App app{"pipeflow: streaming RL post-training data plane, simulator and planner"};
  app.require_subcommand(1);

  StorageArgs storage;
  auto* s = app.add_subcommand("serve-storage", "Run one storage unit");
  s->add_option("--config", storage.config, "Run config; supplies bind address, batch size and unit count");
  s->add_option("--unit-id", storage.unit_id, "Storage unit id")->capture_default_str();
  s->add_option("--global-batch", storage.global_batch, "Rows per epoch (without --config)");
  s->add_option("--num-units", storage.num_units, "Number of storage units (without --config)")->capture_default_str();
  s->add_option("--epoch", storage.epoch, "Initial epoch (without --config)")->capture_default_str();
  s->add_option("--bind", storage.bind, "host:port to listen on (without --config)")->capture_default_str();

  std::string ctl_config, ctl_task;
  int register_timeout = 30;
  auto* c = app.add_subcommand("serve-controller", "Run the controller of one task");
  c->add_option("--config", ctl_config, "Run config")->required();
  c->add_option("--task", ctl_task, "Task name from the config")->required();
  c->add_option("--register-timeout", register_timeout, "Seconds to wait for storage units")->capture_default_str();

  std::string coord_config;
  auto* k = app.add_subcommand("serve-coordinator", "Run the user-level API and weight coordinator");
  k->add_option("--config", coord_config, "Run config")->required();

  SimArgs sim_args;
  auto* r = app.add_subcommand("run-sim", "Simulate a scenario and write the report");
  r->add_option("--config", sim_args.config, "Scenario file or run config with a scenario (default: built-in)");
  r->add_option("--set", sim_args.overrides, "Override a scenario key, e.g. --set response_length.sigma=0.5");
  r->add_option("--mode", sim_args.mode, "sequential|streamed|streamed_async|streamed_async_staggered");
  r->add_option("--seed", sim_args.seed, "Scenario seed");
  r->add_option("--iterations", sim_args.iterations, "Training iterations");
  r->add_option("--report", sim_args.report, "Report path, - for stdout")->capture_default_str();
  r->add_flag("--gantt", sim_args.gantt, "Include Gantt segments in the report");
  r->add_option("--trace", sim_args.trace, "Also write a trace file");
  r->add_option("--trace-format", sim_args.trace_format, "json_lines|chrome_trace")->capture_default_str();

  std::string trace_config, trace_format = "chrome_trace", trace_output = "-";
  std::vector<std::string> trace_overrides;
  auto* t = app.add_subcommand("trace-export", "Simulate a scenario and write only its trace");
  t->add_option("--config", trace_config, "Scenario file or run config (default: built-in)");
  t->add_option("--set", trace_overrides, "Override a scenario key");
  t->add_option("--format", trace_format, "json_lines|chrome_trace")->capture_default_str();
  t->add_option("--output", trace_output, "Trace path, - for stdout")->capture_default_str();

  std::string plan_tasks, plan_output = "-";
  std::uint32_t budget = 0;
  std::size_t keep_k = 0;
  auto* p = app.add_subcommand("plan", "Search device allocations for a budget");
  p->add_option("--tasks", plan_tasks, "Planner input file")->required();
  p->add_option("--budget", budget, "Total devices")->required();
  p->add_option("--keep-k", keep_k, "Finalists to simulate, 0 for all")->capture_default_str();
  p->add_option("--output", plan_output, "Result path, - for stdout")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (s->parsed() || c->parsed() || k->parsed()) block_signals();
    if (s->parsed()) return serve_storage(storage);
    if (c->parsed()) return serve_controller(ctl_config, ctl_task, register_timeout);
    if (k->parsed()) return serve_coordinator(coord_config);
    if (r->parsed()) return run_sim(sim_args);
    if (t->parsed()) return trace_export(trace_config, trace_overrides, trace_format, trace_output);
    if (p->parsed()) return plan_cmd(plan_tasks, budget, keep_k, plan_output);
  } catch (const Error& e) {
    spdlog::error("{}: {}", error_code_name(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
