// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

#include "gp2e/env.hpp"
#include "gp2e/io.hpp"
#include "gp2e/policy.hpp"
#include "gp2e/training.hpp"

namespace gp2e {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  std::filesystem::path demos = "gp2e.demos";
  std::filesystem::path checkpoints = "checkpoints";
  std::filesystem::path metrics = "metrics.csv";
  std::filesystem::path plot = "curve.svg";
};

struct RunConfig {
  TaskSpec task;
  PolicyConfig policy;
  TrainConfig train;
  StageSchedule schedule;
  RunPaths paths;
  std::uint64_t seed = 0;
  std::size_t demo_count = 200;
  std::uint64_t demo_seed_base = 0;
  std::size_t eval_episodes = 100;
  std::uint64_t eval_seed_base = 2'000'000;
  bool two_stage = true;
  bool finetune = true;  // false: stage 2 keeps the stage-1 batch and substeps
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_integer(std::string_view v) {
  long long x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + std::string(v) + "'");
  if (x < 0 || static_cast<unsigned long long>(x) > std::numeric_limits<T>::max())
    throw std::out_of_range("value " + std::string(v) + " is out of range");
  return static_cast<T>(x);
}

inline double parse_real(std::string_view v) {
  double x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(x))
    throw std::invalid_argument("expected a finite number, got '" + std::string(v) + "'");
  return x;
}

inline bool parse_bool(std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(v) + "'");
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

inline std::map<std::string, Setter> config_keys() {
  auto count = [](auto pick) {
    return [pick](RunConfig& c, std::string_view v) {
      auto& field = pick(c);
      using T = std::remove_reference_t<decltype(field)>;
      const T x = parse_integer<T>(v);
      if (x == 0) throw std::out_of_range("must be positive, got " + std::string(v));
      field = x;
    };
  };
  auto index = [](auto pick) {
    return [pick](RunConfig& c, std::string_view v) {
      auto& field = pick(c);
      field = parse_integer<std::remove_reference_t<decltype(field)>>(v);
    };
  };
  auto real = [](auto pick, double lo, double hi, bool lo_open, bool hi_open) {
    return [=](RunConfig& c, std::string_view v) {
      const double x = parse_real(v);
      if ((lo_open ? x <= lo : x < lo) || (hi_open ? x >= hi : x > hi))
        throw std::out_of_range("value " + std::string(v) + " is out of range");
      pick(c) = x;
    };
  };
  auto flag = [](auto pick) { return [pick](RunConfig& c, std::string_view v) { pick(c) = parse_bool(v); }; };
  auto path = [](auto pick) {
    return [pick](RunConfig& c, std::string_view v) {
      if (v.empty()) throw std::invalid_argument("path must not be empty");
      pick(c) = std::filesystem::path(std::string(v));
    };
  };
  constexpr double inf = std::numeric_limits<double>::infinity();

  std::map<std::string, Setter> k;
  k["run.seed"] = index([](RunConfig& c) -> auto& { return c.seed; });
  k["run.two_stage"] = flag([](RunConfig& c) -> auto& { return c.two_stage; });
  k["run.finetune"] = flag([](RunConfig& c) -> auto& { return c.finetune; });

  k["task.name"] = [](RunConfig& c, std::string_view v) {
    try {
      c.task.task = task_from_string(std::string(v));
    } catch (const std::exception&) {
      throw std::invalid_argument("expected fill or pour, got '" + std::string(v) + "'");
    }
  };
  k["task.particles"] = count([](RunConfig& c) -> auto& { return c.task.particles; });
  k["task.fill_threshold"] = real([](RunConfig& c) -> auto& { return c.task.fill_threshold; }, 0, 1, true, false);
  k["task.velocity_threshold"] =
      real([](RunConfig& c) -> auto& { return c.task.velocity_threshold; }, 0, inf, true, true);
  k["task.pour_tolerance"] = real([](RunConfig& c) -> auto& { return c.task.pour_tolerance; }, 0, inf, true, true);
  k["task.spill_limit"] = index([](RunConfig& c) -> auto& { return c.task.spill_limit; });
  k["task.max_steps"] = count([](RunConfig& c) -> auto& { return c.task.max_steps; });

  k["policy.n_points"] = count([](RunConfig& c) -> auto& { return c.policy.n_points; });
  k["policy.channels"] = [](RunConfig& c, std::string_view v) {
    std::array<std::size_t, 3> ch{};
    std::size_t i = 0;
    std::string_view rest = v;
    while (true) {
      const auto comma = rest.find(',');
      if (i == 3) throw std::invalid_argument("expected three comma-separated extents");
      ch[i] = parse_integer<std::size_t>(trim(rest.substr(0, comma)));
      if (ch[i] == 0) throw std::out_of_range("channel extents must be positive");
      ++i;
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (i != 3) throw std::invalid_argument("expected three comma-separated extents");
    c.policy.channels = ch;
  };
  k["policy.condensed_mode"] = [](RunConfig& c, std::string_view v) {
    try {
      c.policy.condensed_mode = condensed_mode_from_string(std::string(v));
    } catch (const std::exception&) {
      throw std::invalid_argument("expected PAPER_TEXT_704 or EQ2_LITERAL_198, got '" + std::string(v) + "'");
    }
  };
  k["policy.d_k"] = count([](RunConfig& c) -> auto& { return c.policy.d_k; });
  k["policy.bias_buckets"] = count([](RunConfig& c) -> auto& { return c.policy.bias_buckets; });
  k["policy.bias_max_dist"] = real([](RunConfig& c) -> auto& { return c.policy.bias_max_dist; }, 0, inf, true, true);
  k["policy.head_hidden"] = count([](RunConfig& c) -> auto& { return c.policy.head_hidden; });
  k["policy.attention"] = flag([](RunConfig& c) -> auto& { return c.policy.attention; });

  k["train.learning_rate"] = real([](RunConfig& c) -> auto& { return c.train.learning_rate; }, 0, inf, true, true);
  k["train.batch_size"] = count([](RunConfig& c) -> auto& { return c.train.batch_size; });
  k["train.sim_steps"] = count([](RunConfig& c) -> auto& { return c.train.sim_steps; });
  k["train.max_train_steps"] = count([](RunConfig& c) -> auto& { return c.train.max_train_steps; });
  k["train.eval_interval"] = count([](RunConfig& c) -> auto& { return c.train.eval_interval; });
  k["train.eval_episodes"] = count([](RunConfig& c) -> auto& { return c.train.eval_episodes; });
  k["train.eval_seed_base"] = index([](RunConfig& c) -> auto& { return c.train.eval_seed_base; });
  k["train.beta1"] = real([](RunConfig& c) -> auto& { return c.train.beta1; }, 0, 1, true, true);
  k["train.beta2"] = real([](RunConfig& c) -> auto& { return c.train.beta2; }, 0, 1, true, true);
  k["train.adam_epsilon"] = real([](RunConfig& c) -> auto& { return c.train.adam_epsilon; }, 0, inf, true, true);
  k["train.record_wall_clock"] = flag([](RunConfig& c) -> auto& { return c.train.record_wall_clock; });

  k["schedule.batch_scale"] = real([](RunConfig& c) -> auto& { return c.schedule.batch_scale; }, 0, 1, true, false);
  k["schedule.sim_scale"] = real([](RunConfig& c) -> auto& { return c.schedule.sim_scale; }, 0, 1, true, false);

  k["demos.count"] = count([](RunConfig& c) -> auto& { return c.demo_count; });
  k["demos.seed_base"] = index([](RunConfig& c) -> auto& { return c.demo_seed_base; });

  k["eval.episodes"] = count([](RunConfig& c) -> auto& { return c.eval_episodes; });
  k["eval.seed_base"] = index([](RunConfig& c) -> auto& { return c.eval_seed_base; });

  k["paths.demos"] = path([](RunConfig& c) -> auto& { return c.paths.demos; });
  k["paths.checkpoints"] = path([](RunConfig& c) -> auto& { return c.paths.checkpoints; });
  k["paths.metrics"] = path([](RunConfig& c) -> auto& { return c.paths.metrics; });
  k["paths.plot"] = path([](RunConfig& c) -> auto& { return c.paths.plot; });
  return k;
}

}  // namespace detail

/// `key = value` lines under `[section]` headers; `#` and `;` start comments.
/// Keys before the first header belong to [run].
inline RunConfig parse_config_text(std::string_view text, const std::string& origin = "config") {
  static const auto keys = detail::config_keys();
  RunConfig cfg;
  std::string section = "run";
  std::map<std::string, std::size_t> seen;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) -> ConfigError {
    return ConfigError(origin + ":" + std::to_string(lineno) + ": " + what);
  };
  while (!text.empty()) {
    ++lineno;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find_first_of("#;"); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw fail("malformed section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      static const std::set<std::string> sections{"run", "task", "policy", "train", "schedule",
                                                  "demos", "eval", "paths"};
      if (!sections.count(section)) throw fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw fail("expected key = value");
    const std::string key = std::string(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    const auto it = keys.find(full);
    if (it == keys.end()) throw fail("unknown key '" + key + "' in [" + section + "]");
    if (const auto prev = seen.find(full); prev != seen.end())
      throw fail("duplicate key '" + key + "' (first set on line " + std::to_string(prev->second) + ")");
    seen[full] = lineno;
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      throw fail(key + ": " + e.what());
    }
  }
  try {
    cfg.policy.validate();
    cfg.train.validate();
    cfg.schedule.validate();
  } catch (const std::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config_text(text, path.string());
}

}  // namespace gp2e
