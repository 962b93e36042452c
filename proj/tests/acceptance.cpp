// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace sgr;
using namespace sgr::fixtures;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs <= budget_s;
  const bool pass = v.pass && in_time;
  if (!pass) ++failures;
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << name << "  [" << fmt(secs, 3)
            << " s / " << budget_s << " s" << (in_time ? "" : ", over budget") << "]  " << v.detail << std::endl;
}

// ---------------------------------------------------------------------------

Verdict theorem_suite() {
  std::size_t bad = 0;
  double min_step = INFINITY, min_cum = INFINITY;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const QuadraticTestbed tb = make_testbed({}, s);
    const TheoremConstants c = estimate_constants(tb);
    const EpsTrace tr = run_two_layer_local(tb, c, 1000);
    const TheoremCheck chk = check_theorem_bound(tr, c, 1e-10);
    if (!c.rates_valid() || tr.diverged || tr.left_region || !chk.ok() || tr.eps_norm.size() != 1000) ++bad;
    min_step = std::min(min_step, chk.min_step());
    min_cum = std::min(min_cum, chk.min_cumulative());
  }
  return {bad == 0 && min_step >= -1e-10 && min_cum >= -1e-10,
          "20 seeds x 1000 iters; failing seeds " + std::to_string(bad) + "; min step margin " + fmt(min_step) +
              "; min cumulative margin " + fmt(min_cum)};
}

Verdict lemma_suite() {
  std::size_t viol = 0;
  double md = INFINITY, mg = INFINITY;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const QuadraticTestbed tb = make_testbed({}, s);
    const TheoremConstants c = estimate_constants(tb);
    const LemmaReport r = check_descent_lemmas(tb, c, 200, s, 1e-10);
    viol += r.violations;
    md = std::min(md, r.min_descent());
    mg = std::min(mg, r.min_gradient());
  }
  const EtfLemmaReport etf = check_etf_lemma(1000, 0);
  return {viol == 0 && etf.draws == 1000 && etf.strict == etf.draws,
          "lemma violations " + std::to_string(viol) + " (min margins " + fmt(md) + ", " + fmt(mg) +
              "); ETF strict decrease " + std::to_string(etf.strict) + "/" + std::to_string(etf.draws) +
              " (min " + fmt(etf.min_decrease) + ")"};
}

Verdict composed_head_oracle() {
  bool ok = true;
  std::string d;
  for (std::size_t depth = 2; depth <= 4; ++depth) {
    std::vector<std::size_t> widths{6};
    for (std::size_t k = 0; k < depth; ++k) widths.push_back(5 + k);
    for (bool relu : {true, false}) {
      const ComposedHeadResult r = check_composed_heads(widths, 100 + depth, relu);
      ok = ok && r.max_rel_dev <= 1e-8 && r.max_sgr <= 1e-20;
      if (relu) d += "depth " + std::to_string(depth) + ": dev " + fmt(r.max_rel_dev, 3) + ", sgr " + fmt(r.max_sgr, 3) + "; ";
    }
  }
  return {ok, d};
}

Verdict recon_statistic() {
  const ReconReport r = check_recon_step(ReconSpec{}, 0);
  return {r.admitted >= 500 && r.fraction() >= 0.95,
          "admitted " + std::to_string(r.admitted) + "/" + std::to_string(r.trials) + ", fraction " +
              fmt(r.fraction())};
}

Verdict gradient_integrity() {
  double worst1 = 0, worst2 = 0, worst_step = 0;
  std::size_t unchecked = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    for (const OpCase& c : op_cases(s)) {
      const OpCheck r = check_op(c);
      worst1 = std::max(worst1, r.first);
      worst2 = std::max(worst2, r.second);
      if (r.checked == 0) ++unchecked;
    }
    for (HeadMode h : {HeadMode::BpFree, HeadMode::LocalBp})
      for (bool norm : {false, true}) {
        const StepCheck r = check_sgr_step(s, h, norm);
        worst_step = std::max(worst_step, r.max_rel_err);
        if (r.checked == 0) ++unchecked;
      }
  }
  return {worst1 <= 1e-4 && worst2 <= 1e-4 && worst_step <= 1e-4 && unchecked == 0,
          std::to_string(op_cases(0).size()) + " ops x 10 seeds: max rel-err first " + fmt(worst1, 3) + ", second " +
              fmt(worst2, 3) + "; local step " + fmt(worst_step, 3)};
}

Verdict closed_form() {
  bool ok = true;
  std::string d;
  for (const auto& [m, n] : {std::pair<std::size_t, std::size_t>{8, 4}, {32, 16}, {128, 64}}) {
    const FlopsReport r = check_flops_claim(m, n, 0);
    ok = ok && r.ad_max_diff <= 1e-9 && r.measured == r.expected;
    d += "(" + std::to_string(m) + "," + std::to_string(n) + "): ops " + std::to_string(r.measured) + " vs 3mn+m " +
         std::to_string(r.expected) + ", AD diff " + fmt(r.ad_max_diff, 3) + "; ";
  }
  return {ok, d};
}

// ---------------------------------------------------------------------------
// Desk-scale training: blobs with r/sigma = 3, three BP-free modules.

struct SeedRun {
  double acc = 0;
  double sgr_tail = 0;     // mean reconciliation loss over the last quarter of epochs
  double last_delta = 0;   // mean input-shift loss change of the last module
};

constexpr std::size_t kSeeds = 5;

TrainConfig desk_config(TrainMode mode, std::uint64_t seed) {
  TrainConfig c;
  c.mode = mode;
  c.lambda = 1.0;
  c.lr = 0.02;
  c.epochs = 30;
  c.batch_size = 128;
  c.seed = seed;
  return c;
}

SeedRun desk_run(TrainMode mode, std::uint64_t seed) {
  const auto [tr, te] = blob_splits(10, 32, 200, 3.0, 1.0, seed);
  Network net = build_network({32, 16, 16, 16}, 3, HeadSpec{HeadMode::BpFree, 10}, seed);
  const TrainConfig cfg = desk_config(mode, seed);
  ProbeRun run = delta_loss_probe(net, tr, te, cfg);
  SeedRun out;
  out.acc = run.report.epochs.back().test_acc;
  const std::size_t from = cfg.epochs - cfg.epochs / 4;
  for (std::size_t e = from; e < cfg.epochs; ++e) out.sgr_tail += run.report.epochs[e].sgr_mean;
  out.sgr_tail /= static_cast<double>(cfg.epochs - from);
  out.last_delta = run.probe.mean(2);
  return out;
}

struct DeskResults {
  std::vector<SeedRun> sgr, layerwise, reforward;
};

DeskResults desk;

double mean_acc(const std::vector<SeedRun>& v) {
  double m = 0;
  for (const auto& r : v) m += r.acc;
  return m / static_cast<double>(v.size());
}

Verdict training_direction() {
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    desk.sgr.push_back(desk_run(TrainMode::Sgr, s));
    desk.layerwise.push_back(desk_run(TrainMode::Layerwise, s));
    desk.reforward.push_back(desk_run(TrainMode::Reforward, s));
  }
  const double a_sgr = 100 * mean_acc(desk.sgr), a_lw = 100 * mean_acc(desk.layerwise),
               a_rf = 100 * mean_acc(desk.reforward);
  std::size_t rf_out = 0;
  std::string per;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    const double diff = 100 * (desk.reforward[s].acc - desk.layerwise[s].acc);
    if (std::abs(diff) > 0.5) ++rf_out;
    per += fmt(100 * desk.sgr[s].acc, 4) + "/" + fmt(100 * desk.layerwise[s].acc, 4) + "/" +
           fmt(100 * desk.reforward[s].acc, 4) + " ";
  }
  const bool gap_ok = a_sgr - a_lw >= 1.0;
  const bool rf_ok = rf_out <= 1;
  return {gap_ok && rf_ok, "mean test acc sgr " + fmt(a_sgr) + "%, layerwise " + fmt(a_lw) + "%, reforward " +
                               fmt(a_rf) + "% (gap " + fmt(a_sgr - a_lw, 3) + " pts); reforward seeds outside 0.5 pts: " +
                               std::to_string(rf_out) + "; per seed sgr/lw/rf: " + per};
}

Verdict figure_directions() {
  if (desk.sgr.size() != kSeeds) return {false, "criterion 7 runs missing"};
  std::size_t sgr_wins = 0, delta_wins = 0;
  std::string d;
  for (std::size_t s = 0; s < kSeeds; ++s) {
    if (desk.sgr[s].sgr_tail < desk.layerwise[s].sgr_tail) ++sgr_wins;
    if (desk.sgr[s].last_delta < desk.layerwise[s].last_delta) ++delta_wins;
    d += "[" + fmt(desk.sgr[s].sgr_tail, 3) + " vs " + fmt(desk.layerwise[s].sgr_tail, 3) + "; " +
         fmt(desk.sgr[s].last_delta, 3) + " vs " + fmt(desk.layerwise[s].last_delta, 3) + "] ";
  }
  return {sgr_wins >= 4 && delta_wins >= 4, "tail SGR lower in " + std::to_string(sgr_wins) +
                                                "/5 seeds, last-module dL lower in " + std::to_string(delta_wins) +
                                                "/5; per seed [sgr vs lw tail; dL]: " + d};
}

Verdict memory() {
  const MemoryModel m = memory_model({784, 256, 256, 256}, 128, {1, 1, 1}, {10, 10, 10}, TrainMode::Sgr);
  const std::size_t global = 128 * (256 * 3 + 10), local = 128 * (256 + 10);
  return {m.ratio <= 0.60 && m.global_units == global && m.local_units == local,
          "global " + std::to_string(m.global_units) + ", per module " + std::to_string(m.local_units) + ", ratio " +
              fmt(m.ratio)};
}

// ---------------------------------------------------------------------------

bool same_params(const Network& a, const Network& b) {
  for (std::size_t k = 0; k < a.modules.size(); ++k) {
    const auto pa = parameters(a.modules[k]), pb = parameters(b.modules[k]);
    for (std::size_t p = 0; p < pa.size(); ++p)
      if (!(*pa[p] == *pb[p])) return false;
  }
  return a.modules.size() == b.modules.size();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + SGR_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

Verdict systems() {
  const auto [tr, te] = blob_splits(4, 8, 40, 3.0, 1.0, 11);
  std::size_t lock_ok = 0, det_ok = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    TrainConfig c;
    c.epochs = 3;
    c.batch_size = 16;
    c.lr = 0.05;
    c.seed = s;
    Network a = build_network({8, 16, 16, 16}, 3, HeadSpec{HeadMode::BpFree, 4}, s);
    Network b = a, again = a;
    const std::string seq = to_csv(report_table(train(a, tr, te, c), 3));
    const std::string lock = to_csv(report_table(pipeline_train(b, tr, te, c, PipelineMode::Lockstep, 2), 3));
    const std::string rerun = to_csv(report_table(train(again, tr, te, c), 3));
    if (seq == lock && same_params(a, b)) ++lock_ok;
    if (seq == rerun && same_params(a, again)) ++det_ok;
  }

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "sgr_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_text((dir / "bad.cfg").string(), "modee = sgr\n");
  const std::string small = " --data blobs:4,8,40,3,1 --widths 16,16,16 --seed 4 ";
  const std::string base = "train --config " + (dir / "r.cfg").string() + small + "--out ";
  write_text((dir / "r.cfg").string(), "epochs = 2\nbatch_size = 16\n");
  const int train_a = cli(base + (dir / "a").string());
  const int train_b = cli(base + (dir / "b").string());
  const bool bytes_equal = train_a == 0 && train_b == 0 && slurp(dir / "a/report.csv") == slurp(dir / "b/report.csv") &&
                           !slurp(dir / "a/report.csv").empty();
  const struct {
    std::string args;
    int want;
  } cases[] = {
      {"theory --seed 7 --out " + (dir / "th").string(), 0},
      {"theory --out " + (dir / "th2").string() + " --theorem-seeds 1 --recon-trials 50 --recon-min-admitted 1000", 1},
      {"train --bogus", 2},
      {"", 2},
      {"train --config " + (dir / "bad.cfg").string(), 2},
      {"train --data blobs:4,8 --out " + (dir / "x").string(), 2},
      {"memory --out " + (dir / "m").string(), 0},
  };
  std::size_t exit_ok = 0;
  std::string exits;
  for (const auto& c : cases) {
    const int got = cli(c.args);
    exit_ok += got == c.want;
    exits += std::to_string(got) + "/" + std::to_string(c.want) + " ";
  }
  fs::remove_all(dir);
  const std::size_t n_cases = sizeof(cases) / sizeof(cases[0]);
  return {lock_ok == 3 && det_ok == 3 && bytes_equal && exit_ok == n_cases,
          "lockstep identical " + std::to_string(lock_ok) + "/3; reruns identical " + std::to_string(det_ok) +
              "/3; CLI report.csv byte-identical " + (bytes_equal ? "yes" : "no") + "; exit codes got/want " + exits};
}

}  // namespace

int main() {
  criterion(1, "two-layer convergence bound", 30, theorem_suite);
  criterion(2, "descent lemmas and ETF step", 10, lemma_suite);
  criterion(3, "composed heads reproduce global gradients", 5, composed_head_oracle);
  criterion(4, "reconciliation step lowers next-layer loss", 30, recon_statistic);
  criterion(5, "AD vs finite differences", 60, gradient_integrity);
  criterion(6, "closed-form reconciliation gradient and op count", 5, closed_form);
  criterion(7, "desk-scale accuracy direction", 900, training_direction);
  // Reuses the criterion 7 runs; its time is counted there.
  criterion(8, "reconciliation loss and input-shift direction", 900, figure_directions);
  criterion(9, "activation memory model", 1, memory);
  criterion(10, "pipeline, determinism and exit codes", 120, systems);
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
