#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "placerec/pipeline.hpp"

namespace pl = placerec::pipeline;

namespace {

const pl::KeySpec& key_spec(const std::string& name) {
  for (const auto& k : pl::config_keys())
    if (k.name == name) return k;
  throw std::logic_error("unregistered key " + name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"placerec: map compression, query refinement and place recognition on point clouds"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "list every command with all options");

  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, std::string> extra;
  std::map<std::string, CLI::App*> subs;

  for (const auto& cmd : pl::commands()) {
    auto* sub = app.add_subcommand(cmd.name, cmd.summary);
    subs[cmd.name] = sub;
    sub->add_option("--config", config_path, "config file (TOML-style key = value, [section] headers)");
    sub->add_option("--set", sets, "override: key=value (repeatable)");
    auto& values = flag_values[cmd.name];
    for (const auto& key : cmd.keys) {
      const auto& spec = key_spec(key);
      sub->add_option("--" + key, values[key], spec.help + " (default: \"" + spec.default_value + "\")");
    }
    if (cmd.name == "train-agg") sub->add_option("--mode", values["train.mode"], "alias of --train.mode");
    if (cmd.name == "query") {
      sub->add_option("--input", extra["input"], "compressed submap (.gpcc) or refined query cloud")->required();
      sub->add_option("--k", extra["k"], "number of results (default 5)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  std::string name;
  for (const auto& [n, sub] : subs)
    if (sub->parsed()) name = n;

  pl::CommandContext ctx;
  try {
    if (!config_path.empty()) ctx.config.load_file(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos)
        placerec::fail(placerec::ErrorKind::ConfigError, "--set expects key=value, got '" + s + "'");
      ctx.config.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, value] : flag_values[name]) {
      auto* opt = subs[name]->get_option_no_throw(key == "train.mode" && subs[name]->count("--mode") ? "--mode"
                                                                                                        : "--" + key);
      if (opt && opt->count() > 0) ctx.config.set(key, value);
    }
    if (name == "query")
      for (const auto& [k, v] : extra)
        if (subs[name]->count("--" + k) > 0) ctx.options[k] = v;
    return pl::run_command(name, ctx);
  } catch (const placerec::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pl::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 5;
  }
}
