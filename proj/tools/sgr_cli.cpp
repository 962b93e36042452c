// SPDX-License-Identifier: Apache-2.0
// Command-line driver: train, theory, ablate, probe, memory, plot.
//
// Exit codes: 0 success, 1 verification failure or runtime failure,
// 2 usage, configuration or input-data error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "sgr/sgr.hpp"

namespace fs = std::filesystem;
using namespace sgr;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VerificationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(detail::trim(cur));
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& flag, const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& p : split(s, ',')) out.push_back(detail::parse_uint(flag, p));
  if (out.empty()) throw UsageError(flag + " needs at least one value");
  return out;
}

std::vector<double> parse_reals(const std::string& flag, const std::string& s) {
  std::vector<double> out;
  for (const auto& p : split(s, ',')) out.push_back(detail::parse_double(flag, p));
  if (out.empty()) throw UsageError(flag + " needs at least one value");
  return out;
}

struct Splits {
  Dataset train, test;
};

// mnist:<img>,<lbl>  or  blobs:<K>,<d>,<n>,<r>,<sigma>. Blobs draw n samples
// per class and keep half for testing; MNIST uses --test-data when given,
// otherwise holds out one sixth per class. Both splits are standardized with
// the training statistics.
Splits load_data(const std::string& spec, const std::string& test_spec, std::uint64_t seed) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw UsageError("--data expects mnist:<img>,<lbl> or blobs:<K>,<d>,<n>,<r>,<sigma>");
  const std::string kind = spec.substr(0, colon);
  const auto args = split(spec.substr(colon + 1), ',');
  Splits s;
  if (kind == "blobs") {
    if (args.size() != 5) throw UsageError("--data blobs needs K,d,n,r,sigma");
    const Dataset all = synth_blobs(detail::parse_uint("--data", args[0]), detail::parse_uint("--data", args[1]),
                                    detail::parse_uint("--data", args[2]), detail::parse_double("--data", args[3]),
                                    detail::parse_double("--data", args[4]), seed);
    std::tie(s.train, s.test) = train_test_split(all, 0.5);
  } else if (kind == "mnist") {
    if (args.size() != 2) throw UsageError("--data mnist needs <img>,<lbl>");
    const Dataset all = load_mnist_idx(args[0], args[1]);
    if (test_spec.empty()) {
      std::tie(s.train, s.test) = train_test_split(all, 1.0 / 6.0);
    } else {
      const auto t = split(test_spec, ',');
      if (t.size() != 2) throw UsageError("--test-data needs <img>,<lbl>");
      s.train = all;
      s.test = load_mnist_idx(t[0], t[1]);
      s.test.split = "test";
      s.test.classes = s.train.classes = std::max(s.train.classes, s.test.classes);
    }
  } else {
    throw UsageError("unknown data source '" + kind + "' (mnist|blobs)");
  }
  standardize(s.train, s.test);
  return s;
}

// Options shared by the training-style subcommands.
struct RunOptions {
  std::string config, out = "out", mode, data = "blobs:10,32,200,3,1", test_data, widths, pipeline = "off";
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::size_t head_hidden = 64, queue_depth = 2;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "recipe file with `key = value` lines");
    app->add_option("--out", out, "output directory (created if absent)");
    app->add_option("--seed", seed, "seed override");
    app->add_option("--mode", mode, "mode override: globalbp|layerwise|reforward|sgr");
    app->add_option("--lambda", lambda, "SGR weight override");
    app->add_option("--data", data, "mnist:<img>,<lbl> | blobs:<K>,<d>,<n>,<r>,<sigma>");
    app->add_option("--test-data", test_data, "MNIST test split as <img>,<lbl>");
    app->add_option("--widths", widths, "hidden layer widths, comma separated (default: 64 per module)");
    app->add_option("--head-hidden", head_hidden, "hidden width of local-BP heads");
  }

  TrainConfig train_config() const {
    TrainConfig c = config.empty() ? TrainConfig{} : parse_config(config);
    if (seed) c.seed = *seed;
    if (!mode.empty()) c.mode = parse_train_mode(mode);
    if (lambda) c.lambda = *lambda;
    validate(c);
    return c;
  }

  std::vector<std::size_t> layer_widths(const Dataset& d, const TrainConfig& c) const {
    std::vector<std::size_t> w{d.dim()};
    const auto hidden = widths.empty() ? std::vector<std::size_t>(c.modules, 64) : parse_sizes("--widths", widths);
    w.insert(w.end(), hidden.begin(), hidden.end());
    return w;
  }

  Network network(const Dataset& d, const TrainConfig& c, std::uint64_t seed_value) const {
    return build_network(layer_widths(d, c), c.modules, {c.head_mode, d.classes, head_hidden}, seed_value);
  }
};

void prepare_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir);
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_train_plots(const CsvTable& t, const std::string& out, std::size_t modules) {
  PlotOptions o;
  o.x_column = "epoch";
  o.filter_column = "split";
  o.filter_value = "train";
  o.title = "train loss";
  o.y_label = "loss";
  render_line_plot(t, {"loss"}, path_in(out, "train_loss.svg"), o);
  o.filter_value = "test";
  o.title = "test accuracy";
  o.y_label = "accuracy";
  render_line_plot(t, {"acc"}, path_in(out, "test_acc.svg"), o);
  if (modules > 1) {
    o.filter_value = "train";
    o.title = "mean SGR loss of neighbouring modules";
    o.y_label = "SGR loss";
    render_line_plot(t, {"sgr_loss_mean"}, path_in(out, "sgr_loss.svg"), o);
  }
}

int run_train(const RunOptions& ro) {
  const TrainConfig cfg = ro.train_config();
  PipelineMode pm = PipelineMode::Lockstep;
  if (ro.pipeline == "lockstep") pm = PipelineMode::Lockstep;
  else if (ro.pipeline == "async") pm = PipelineMode::Async;
  else if (ro.pipeline != "off") throw UsageError("--pipeline must be off, lockstep or async");
  const Splits data = load_data(ro.data, ro.test_data, cfg.seed);
  Network net = ro.network(data.train, cfg, cfg.seed);
  prepare_out(ro.out);

  const TrainReport rep = ro.pipeline == "off" ? train(net, data.train, data.test, cfg)
                                               : pipeline_train(net, data.train, data.test, cfg, pm, ro.queue_depth);
  const CsvTable table = report_table(rep, cfg.modules);
  write_text(path_in(ro.out, "report.csv"), to_csv(table));
  write_train_plots(table, ro.out, cfg.modules);
  save_checkpoint(net, path_in(ro.out, "checkpoint.sgr"));

  std::ostringstream s;
  s << "# train\n" << serialize_config(cfg) << "pipeline = " << ro.pipeline << "\ndata = " << ro.data << '\n';
  s << "widths =";
  for (std::size_t w : ro.layer_widths(data.train, cfg)) s << ' ' << w;
  s << "\nparameters = " << parameter_count(net) << '\n';
  if (!rep.epochs.empty()) {
    const EpochRecord& e = rep.epochs.back();
    s << "final_train_loss = " << format_double(e.train_loss) << "\nfinal_train_acc = " << format_double(e.train_acc)
      << "\nfinal_test_loss = " << format_double(e.test_loss) << "\nfinal_test_acc = " << format_double(e.test_acc)
      << "\nfinal_sgr_loss_mean = " << csv_number(e.sgr_mean) << '\n';
  }
  if (ro.pipeline == "async") s << "stage_overlap = " << format_double(stage_overlap(rep.spans)) << '\n';
  write_text(path_in(ro.out, "summary.txt"), s.str());
  std::cout << s.str();
  return 0;
}

int run_theory(const std::string& out, std::uint64_t seed, const TheorySuiteOptions& opt) {
  prepare_out(out);
  const auto rows = run_theory_suite(seed, opt);
  write_text(path_in(out, "verification.csv"), to_csv(verification_table(rows)));
  std::ostringstream s;
  s << "# theory suite, seed " << seed << "\n";
  std::map<std::string, std::pair<double, std::size_t>> worst;  // check -> (min margin, failures)
  std::vector<std::string> order;
  for (const auto& r : rows) {
    auto [it, fresh] = worst.try_emplace(r.check, r.margin, 0);
    if (fresh) order.push_back(r.check);
    it->second.first = std::min(it->second.first, r.margin);
    it->second.second += !r.pass;
  }
  std::size_t failed = 0;
  for (const auto& name : order) {
    const auto& [margin, fails] = worst[name];
    s << (fails ? "FAIL " : "ok   ") << name << "  min_margin = " << format_double(margin);
    if (fails) s << "  failures = " << fails;
    s << '\n';
    failed += fails;
  }
  s << (failed ? "RESULT: FAIL\n" : "RESULT: PASS\n");
  write_text(path_in(out, "summary.txt"), s.str());
  std::cout << s.str();
  if (failed) throw VerificationFailure(std::to_string(failed) + " verification rows failed");
  return 0;
}

int run_ablate(const RunOptions& ro, const std::string& lambdas, const std::string& seeds) {
  const TrainConfig cfg = ro.train_config();
  const auto lams = parse_reals("--lambdas", lambdas);
  const auto seed_list = parse_sizes("--seeds", seeds);
  const std::vector<std::uint64_t> sd(seed_list.begin(), seed_list.end());
  const Splits data = load_data(ro.data, ro.test_data, cfg.seed);
  prepare_out(ro.out);
  const auto rows = ablate_lambda([&](std::uint64_t s) { return ro.network(data.train, cfg, s); }, data.train,
                                  data.test, lams, sd, cfg);
  CsvTable t;
  t.header = {"lambda", "mean_acc", "std_acc"};
  for (auto s : sd) t.header.push_back("acc_seed" + std::to_string(s));
  std::ostringstream s;
  s << "# lambda ablation\n";
  for (const auto& r : rows) {
    std::vector<std::string> row{format_double(r.lambda), format_double(r.mean_acc), format_double(r.std_acc)};
    for (double a : r.accs) row.push_back(format_double(a));
    t.rows.push_back(std::move(row));
    s << "lambda = " << format_double(r.lambda) << "  acc = " << format_double(r.mean_acc) << " +- "
      << format_double(r.std_acc) << '\n';
  }
  write_text(path_in(ro.out, "ablation.csv"), to_csv(t));
  PlotOptions o;
  o.x_column = "lambda";
  o.title = "test accuracy by lambda";
  o.y_label = "accuracy";
  render_line_plot(t, {"mean_acc"}, path_in(ro.out, "ablation.svg"), o);
  write_text(path_in(ro.out, "summary.txt"), s.str());
  std::cout << s.str();
  return 0;
}

// ΔL series under sgr and layerwise training from the same initialization.
int run_probe(const RunOptions& ro) {
  TrainConfig cfg = ro.train_config();
  const Splits data = load_data(ro.data, ro.test_data, cfg.seed);
  prepare_out(ro.out);
  const std::size_t K = cfg.modules;
  std::vector<ProbeRun> runs;
  const TrainMode modes[2] = {TrainMode::Sgr, TrainMode::Layerwise};
  for (TrainMode m : modes) {
    cfg.mode = m;
    Network net = ro.network(data.train, cfg, cfg.seed);
    runs.push_back(delta_loss_probe(net, data.train, data.test, cfg));
  }
  CsvTable t;
  t.header = {"iteration"};
  for (TrainMode m : modes)
    for (std::size_t k = 2; k <= K; ++k) t.header.push_back(std::string("dl_") + to_string(m) + "_" + std::to_string(k));
  const std::size_t n = K > 1 ? runs[0].probe.series[1].size() : 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> row{std::to_string(i)};
    for (const auto& r : runs)
      for (std::size_t k = 1; k < K; ++k) row.push_back(csv_number(r.probe.series[k][i]));
    t.rows.push_back(std::move(row));
  }
  write_text(path_in(ro.out, "probe.csv"), to_csv(t));
  std::ostringstream s;
  s << "# input-shift probe, seed " << cfg.seed << '\n';
  for (std::size_t k = 1; k < K; ++k)
    s << "layer " << k + 1 << "  mean_dl_sgr = " << format_double(runs[0].probe.mean(k))
      << "  mean_dl_layerwise = " << format_double(runs[1].probe.mean(k)) << '\n';
  if (K > 1) {
    PlotOptions o;
    o.x_column = "iteration";
    o.title = "loss change of the last module from upstream updates";
    o.y_label = "delta loss";
    const std::string last = std::to_string(K);
    render_line_plot(t, {"dl_sgr_" + last, "dl_layerwise_" + last}, path_in(ro.out, "probe.svg"), o);
  }
  write_text(path_in(ro.out, "summary.txt"), s.str());
  std::cout << s.str();
  return 0;
}

int run_memory(const std::string& out, const std::string& widths, std::size_t batch, std::size_t modules,
               std::size_t head_width) {
  const auto w = parse_sizes("--widths", widths);
  if (w.size() < 2) throw UsageError("--widths needs the input width and at least one layer");
  const std::size_t L = w.size() - 1;
  if (modules < 1 || modules > L) throw UsageError("--modules must be between 1 and the layer count");
  std::vector<std::size_t> part;
  for (std::size_t k = 0; k < modules; ++k) part.push_back(L / modules + (k < L % modules ? 1 : 0));
  const MemoryModel mm = memory_model(w, batch, part, std::vector<std::size_t>(modules, head_width), TrainMode::Sgr);
  prepare_out(out);
  CsvTable t;
  t.header = {"scope", "units"};
  t.rows.push_back({"global", std::to_string(mm.global_units)});
  for (std::size_t k = 0; k < modules; ++k) t.rows.push_back({"module_" + std::to_string(k + 1), std::to_string(mm.module_units[k])});
  t.rows.push_back({"local", std::to_string(mm.local_units)});
  write_text(path_in(out, "memory.csv"), to_csv(t));
  std::ostringstream s;
  s << "global_units = " << mm.global_units << "\nlocal_units = " << mm.local_units
    << "\nratio = " << format_double(mm.ratio) << '\n';
  write_text(path_in(out, "summary.txt"), s.str());
  std::cout << s.str();
  return 0;
}

int run_plot(const std::string& csv, const std::string& columns, const std::string& x, const std::string& filter,
             const std::string& title, const std::string& out) {
  const CsvTable t = read_csv(csv);
  PlotOptions o;
  o.x_column = x;
  o.title = title;
  if (!filter.empty()) {
    const auto eq = filter.find('=');
    if (eq == std::string::npos) throw UsageError("--filter expects column=value");
    o.filter_column = filter.substr(0, eq);
    o.filter_value = filter.substr(eq + 1);
  }
  const fs::path p(out);
  if (p.has_parent_path()) prepare_out(p.parent_path().string());
  render_line_plot(t, split(columns, ','), out, o);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local learning with gradient reconciliation"};
  app.require_subcommand(1);

  RunOptions train_opt, ablate_opt, probe_opt;
  auto* train_cmd = app.add_subcommand("train", "train a network and write report.csv, plots, checkpoint, summary");
  train_opt.attach(train_cmd);
  train_cmd->add_option("--pipeline", train_opt.pipeline, "off|lockstep|async");
  train_cmd->add_option("--queue-depth", train_opt.queue_depth, "queue capacity between async stages");

  std::string theory_out = "out";
  std::uint64_t theory_seed = 0;
  auto* theory_cmd = app.add_subcommand("theory", "run the convergence and gradient verification suite");
  theory_cmd->add_option("--out", theory_out, "output directory");
  theory_cmd->add_option("--seed", theory_seed, "suite seed");
  TheorySuiteOptions theory_opt;
  theory_cmd->add_option("--theorem-seeds", theory_opt.theorem_seeds, "testbeds for the convergence bound");
  theory_cmd->add_option("--theorem-iters", theory_opt.theorem_iters, "iterations per testbed");
  theory_cmd->add_option("--recon-trials", theory_opt.recon.trials, "random trials for the one-step comparison");
  theory_cmd->add_option("--recon-fraction", theory_opt.recon_fraction, "required improved fraction");
  theory_cmd->add_option("--recon-min-admitted", theory_opt.recon_min_admitted, "required admitted trials");

  std::string lambdas = "0,0.1,1,10", seeds = "0,1,2";
  auto* ablate_cmd = app.add_subcommand("ablate", "sweep the SGR weight over seeds");
  ablate_opt.attach(ablate_cmd);
  ablate_cmd->add_option("--lambdas", lambdas, "comma-separated SGR weights");
  ablate_cmd->add_option("--seeds", seeds, "comma-separated seeds");

  auto* probe_cmd = app.add_subcommand("probe", "record per-module loss change caused by upstream updates");
  probe_opt.attach(probe_cmd);

  std::string mem_out = "out", mem_widths = "784,256,256,256";
  std::size_t mem_batch = 128, mem_modules = 3, mem_head = 10;
  auto* memory_cmd = app.add_subcommand("memory", "activation-count memory model");
  memory_cmd->add_option("--out", mem_out, "output directory");
  memory_cmd->add_option("--widths", mem_widths, "input width followed by layer widths");
  memory_cmd->add_option("--batch", mem_batch, "batch size");
  memory_cmd->add_option("--modules", mem_modules, "module count");
  memory_cmd->add_option("--head-width", mem_head, "per-sample head activations");

  std::string plot_csv, plot_cols, plot_x, plot_filter, plot_title, plot_out = "plot.svg";
  auto* plot_cmd = app.add_subcommand("plot", "render CSV columns as an SVG line plot");
  plot_cmd->add_option("--csv", plot_csv, "input CSV")->required();
  plot_cmd->add_option("--columns", plot_cols, "comma-separated columns")->required();
  plot_cmd->add_option("--x", plot_x, "x-axis column (default: row index)");
  plot_cmd->add_option("--filter", plot_filter, "keep rows where column=value");
  plot_cmd->add_option("--title", plot_title, "plot title");
  plot_cmd->add_option("--out", plot_out, "output SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train_cmd) return run_train(train_opt);
    if (*theory_cmd) return run_theory(theory_out, theory_seed, theory_opt);
    if (*ablate_cmd) return run_ablate(ablate_opt, lambdas, seeds);
    if (*probe_cmd) return run_probe(probe_opt);
    if (*memory_cmd) return run_memory(mem_out, mem_widths, mem_batch, mem_modules, mem_head);
    if (*plot_cmd) return run_plot(plot_csv, plot_cols, plot_x, plot_filter, plot_title, plot_out);
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IdxError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
