#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace musc::selfcheck {

enum class Level { quick, full };

struct Options {
  Level level = Level::full;
  /// Trained checkpoint for the code-density probe. Without one, the full
  /// level trains a short default model first; the quick level skips it.
  std::filesystem::path model;
  /// Corpus directory whose `val` split feeds the density probe; empty
  /// regenerates the default task.
  std::filesystem::path data;
  int threads = 1;
  /// Run the operator checks in double instead of float.
  bool f64 = false;
};

struct Result {
  std::string id;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

/// Check ids in execution order: kron, adjoint, materialize, ista_oracle,
/// descent, least_norm, power, gradients, probing.
const std::vector<std::string>& check_ids();

/// Runs one check; exceptions are reported as failures.
Result run(const std::string& id, const Options& options);

std::vector<Result> run_all(const Options& options, const std::function<void(const Result&)>& on_result = {});

/// "PASS  <id>  <title>  <detail>  (<seconds> s)"
void print(const Result& r, std::ostream& out);

}  // namespace musc::selfcheck
