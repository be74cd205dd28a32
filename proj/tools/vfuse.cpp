// Copyright 2026 The vfuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end.
//
//   vfuse <command> [--config FILE] [--section.key=value ...]
//   vfuse rerun MANIFEST [--section.key=value ...]
//
// Exit codes: 0 success, 1 method or training failure, 2 usage error.

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "vfuse/experiment.hpp"

namespace {

// Turns leftover "--a.b=v" / "--a.b v" arguments into override pairs.
std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3) {
      throw vfuse::UsageError("unexpected argument '" + a + "'");
    }
    const std::string body = a.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < args.size()) {
      out.emplace_back(body, args[++i]);
    } else {
      throw vfuse::UsageError("flag '" + a + "' needs a value");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vfuse: fusion-layer probing and contrastive review masking"};
  app.require_subcommand(1);
  std::string config_path, manifest_path;

  const std::vector<std::pair<std::string, std::string>> help = {
      {"train", "train the toy model; writes checkpoint.bin and curve.csv"},
      {"gen-data", "write the synthetic train/eval splits as JSONL"},
      {"probe", "layer-wise masking sweep; writes sweep.csv and fusion_report.txt"},
      {"select", "per-sample pre-integrated layer selection histogram"},
      {"contrast", "contrastive review masking over the eval set"},
      {"sweep-ratio", "accuracy and latency across mask ratios"},
  };
  for (const auto& [name, desc] : help) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config file");
    sub->allow_extras();
  }
  auto* rerun = app.add_subcommand("rerun", "re-execute the run recorded in a manifest");
  rerun->add_option("manifest", manifest_path, "manifest.json of a previous run")
      ->required();
  rerun->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const auto overrides = parse_overrides(sub->remaining());
    vfuse::RunManifest m;
    if (sub == rerun) {
      m = vfuse::rerun_manifest(manifest_path, overrides);
    } else {
      m = vfuse::run_command(sub->get_name(), vfuse::resolve_config(config_path, overrides));
    }
    std::cerr << "wrote " << m.outputs.size() << " files to "
              << m.config["io"]["out"].get<std::string>() << '\n';
    return 0;
  } catch (const vfuse::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const vfuse::MethodInapplicableError& e) {
    std::cerr << "method inapplicable: " << e.what() << '\n';
    return 1;
  } catch (const vfuse::TrainingError& e) {
    std::cerr << "training failed at step " << e.step() << ": " << e.what() << '\n';
    return 1;
  } catch (const vfuse::DegenerateInputError& e) {
    std::cerr << "degenerate input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
