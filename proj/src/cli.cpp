#include "iir/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "iir/app.hpp"
#include "iir/error.hpp"
#include "iir/ops.hpp"
#include "iir/previewer.hpp"

namespace iir {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::vector<std::string> sets;
  std::string ckpt;
  bool resume = false;
  std::string level = "mild";
  std::vector<std::string> inputs;
  std::string output;
  int bench_iters = 3;
};

std::pair<std::string, std::string> split_assignment(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

RunConfig resolve_config(const Options& o) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& s : o.sets) overrides.push_back(split_assignment(s));
  if (o.config_path.empty()) {
    std::istringstream empty;
    return parse_config(empty, overrides);
  }
  return load_config(o.config_path, overrides);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

std::vector<ManifestEntry> read_manifest_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("dataset manifest " + path.string() + " not found; run gen-data first");
  return read_manifest(in);
}

fs::path ckpt_or(const Options& o, const fs::path& fallback) { return o.ckpt.empty() ? fallback : fs::path(o.ckpt); }

// Loads the checkpoint a command builds on; a missing file is a phase-order
// problem, not an I/O one.
Checkpoint load_upstream(const fs::path& path, Phase required, const std::string& command,
                         const std::string& producer) {
  if (!fs::exists(path)) {
    throw PhaseError(command + " needs a '" + phase_name(required) + "' checkpoint; " + path.string() +
                     " does not exist (run " + producer + " first)");
  }
  Checkpoint ck = load_checkpoint(path);
  require_phase(ck, required, command);
  return ck;
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
  auto f = open_out(path);
  f << "step,loss\n";
  f.precision(9);
  for (std::size_t i = 0; i < losses.size(); ++i) f << i + 1 << ',' << losses[i] << '\n';
}

TrainHooks progress_hooks(const RunConfig& c, std::ostream& out, const std::string& tag, const Pipeline& pipe,
                          Phase last_done, const fs::path& resume_path) {
  TrainHooks h;
  h.on_step = [&out, tag, every = c.train.log_every](std::int64_t step, double loss) {
    if (every > 0 && step % every == 0) out << tag << " step " << step << " loss " << loss << std::endl;
  };
  h.on_checkpoint = [&pipe, last_done, resume_path, hash = c.hash()](const ResumeState& st) {
    save_checkpoint(resume_path, pipe, last_done, hash, &st);
  };
  return h;
}

std::optional<ResumeState> maybe_resume(const Options& o, const fs::path& resume_path, Phase training,
                                        Pipeline& pipe, std::ostream& out) {
  if (!o.resume || !fs::exists(resume_path)) return std::nullopt;
  Checkpoint ck = load_checkpoint(resume_path);
  if (!ck.resume || ck.resume->training != training) {
    throw PhaseError(resume_path.string() + " is not a mid-run " + phase_name(training) + " checkpoint");
  }
  pipe = std::move(ck.pipeline);
  out << "resuming " << phase_name(training) << " at step " << ck.resume->step << std::endl;
  return std::move(ck.resume);
}

int cmd_gen_data(const RunConfig& c, std::ostream& out) {
  ensure_dir(c.out_dir);
  const auto entries = build_manifest(c.data);
  auto f = open_out(c.out_dir / "manifest.csv");
  write_manifest(f, entries);
  if (!f) throw IoError("write failed for manifest");
  out << "wrote " << entries.size() << " rows to " << (c.out_dir / "manifest.csv").string() << std::endl;
  return 0;
}

int cmd_train_stage1(const RunConfig& c, const Options& o, std::ostream& out) {
  ensure_dir(c.out_dir);
  const auto train = select_split(read_manifest_file(c.out_dir / "manifest.csv"), "train");
  Pipeline pipe = init_pipeline(c);
  const fs::path resume_path = c.out_dir / "stage1.resume.iirk";
  auto resume = maybe_resume(o, resume_path, Phase::base_dcp, pipe, out);
  ResumeState st = resume ? std::move(*resume) : ResumeState{Phase::base_dcp, 0, {}, {}};
  auto report = train_stage1(pipe, c, train, &st, progress_hooks(c, out, "stage1", pipe, Phase::base_dcp, resume_path));
  write_losses(c.out_dir / "stage1_loss.csv", report.losses);
  save_checkpoint(c.out_dir / "stage1.iirk", pipe, Phase::base_dcp, c.hash());
  out << "stage1 smoothed loss " << report.initial_smoothed << " -> " << report.final_smoothed << " ("
      << report.seconds << " s)" << std::endl;
  return 0;
}

int cmd_distill(const RunConfig& c, const Options& o, std::ostream& out) {
  ensure_dir(c.out_dir);
  Checkpoint ck = load_upstream(ckpt_or(o, c.out_dir / "stage1.iirk"), Phase::base_dcp, "distill-previewer",
                                "train-stage1");
  Pipeline pipe = std::move(ck.pipeline);
  const auto manifest = read_manifest_file(c.out_dir / "manifest.csv");
  const auto train = select_split(manifest, "train");
  const PairBatch val = manifest_batch(select_split(manifest, "val"), c.data.p2);
  const fs::path resume_path = c.out_dir / "previewer.resume.iirk";
  auto resume = maybe_resume(o, resume_path, Phase::previewer, pipe, out);
  if (!pipe.denoiser.has_adapter) {
    Rng r = Rng(c.train.seed).fork(3);
    pipe.denoiser.attach_adapter(r);
  }
  const std::string base_before = params_hash(base_params(pipe));
  const double before = previewer_consistency(pipe, c, val);
  ResumeState st = resume ? std::move(*resume) : ResumeState{Phase::previewer, 0, {}, {}};
  auto report =
      distill_previewer(pipe, c, train, &st, progress_hooks(c, out, "distill", pipe, Phase::base_dcp, resume_path));
  const double after = previewer_consistency(pipe, c, val);
  const std::string base_after = params_hash(base_params(pipe));
  {
    auto f = open_out(c.out_dir / "distill_progress.csv");
    f << "step,loss,self_consistency\n";
    f.precision(9);
    f << 0 << ",," << before << '\n';
    for (std::size_t i = 0; i < report.losses.size(); ++i) {
      f << i + 1 << ',' << report.losses[i] << ',';
      if (i + 1 == report.losses.size()) f << after;
      f << '\n';
    }
  }
  save_checkpoint(c.out_dir / "previewer.iirk", pipe, Phase::previewer, c.hash());
  const auto adapter = nn::count_params(adapter_params(pipe)), base = nn::count_params(base_params(pipe));
  out << "self-consistency " << before << " -> " << after << " (" << 100.0 * (1.0 - after / before)
      << "% reduction)\n"
      << "base weights " << (base_before == base_after ? "unchanged" : "CHANGED") << " (" << base_after << ")\n"
      << "adapter parameters " << adapter << " = " << 100.0 * static_cast<double>(adapter) / static_cast<double>(base)
      << "% of base" << std::endl;
  return base_before == base_after ? 0 : 1;
}

int cmd_train_stage2(const RunConfig& c, const Options& o, std::ostream& out) {
  ensure_dir(c.out_dir);
  Checkpoint ck = load_upstream(ckpt_or(o, c.out_dir / "previewer.iirk"), Phase::previewer, "train-stage2",
                                "distill-previewer");
  Pipeline pipe = std::move(ck.pipeline);
  const auto manifest = read_manifest_file(c.out_dir / "manifest.csv");
  const auto train = select_split(manifest, "train");
  const PairBatch val = manifest_batch(select_split(manifest, "val"), c.data.p2);
  const std::string stem = c.train.noisy_preview ? "aggregator_noisy" : "aggregator";
  const fs::path resume_path = c.out_dir / (stem + ".resume.iirk");
  auto resume = maybe_resume(o, resume_path, Phase::aggregator, pipe, out);
  if (!pipe.aggregator) {
    Rng r = Rng(c.train.seed).fork(4);
    pipe.aggregator.emplace(pipe.denoiser, r);
  }
  nn::ParamList frozen = base_params(pipe);
  for (auto& p : adapter_params(pipe)) frozen.push_back(p);
  const std::string frozen_before = params_hash(frozen);
  const std::uint64_t val_seed = splitmix64(c.data.seed ^ 0x57a9e2);
  const double before = stage2_validation_loss(pipe, c, val, val_seed);
  ResumeState st = resume ? std::move(*resume) : ResumeState{Phase::aggregator, 0, {}, {}};
  auto report =
      train_stage2(pipe, c, train, &st, progress_hooks(c, out, "stage2", pipe, Phase::previewer, resume_path));
  const double after = stage2_validation_loss(pipe, c, val, val_seed);
  const std::string frozen_after = params_hash(frozen);
  write_losses(c.out_dir / (stem + "_loss.csv"), report.losses);
  save_checkpoint(c.out_dir / (stem + ".iirk"), pipe, Phase::aggregator, c.hash());
  out << "stage2 validation loss " << before << " -> " << after << " (" << 100.0 * (1.0 - after / before)
      << "% reduction); smoothed training loss " << report.initial_smoothed << " -> " << report.final_smoothed << '\n'
      << "frozen modules " << (frozen_before == frozen_after ? "unchanged" : "CHANGED") << std::endl;
  return frozen_before == frozen_after ? 0 : 1;
}

Tensor row_of(const Tensor& x, std::int64_t i) {
  const std::int64_t n = x.dim(0);
  const std::int64_t sizes[] = {i, 1, n - i - 1};
  return ops::split(x, 0, sizes)[1];
}

int cmd_restore(const RunConfig& c, const Options& o, std::ostream& out) {
  const bool references = c.sampler.mode != SamplerMode::no_reference;
  const fs::path default_ckpt = c.out_dir / (c.sampler.mode == SamplerMode::noisy_preview ? "aggregator_noisy.iirk"
                                             : references                                ? "aggregator.iirk"
                                                                                         : "stage1.iirk");
  Checkpoint ck = references ? load_upstream(ckpt_or(o, default_ckpt), Phase::aggregator,
                                             "restore (mode " + mode_name(c.sampler.mode) + ")", "train-stage2")
                             : load_checkpoint(ckpt_or(o, default_ckpt));
  Pipeline pipe = std::move(ck.pipeline);

  PairBatch batch;
  bool have_hq = false;
  if (!o.inputs.empty()) {
    std::vector<Tensor> planes;
    for (const auto& in : o.inputs) {
      Tensor img = read_pgm(in);
      if (img.dim(2) != pipe.cfg.image_size || img.dim(3) != pipe.cfg.image_size) {
        throw ShapeError(in + ": resolution " + std::to_string(img.dim(3)) + "x" + std::to_string(img.dim(2)) +
                         " does not match model resolution " + std::to_string(pipe.cfg.image_size));
      }
      planes.push_back(img);
    }
    batch.lq = ops::concat(planes, 0);
    batch.class_ids.assign(planes.size(), pipe.cfg.null_class());
  } else {
    const auto entries = select_split(build_manifest(c.data), "test", parse_level(o.level));
    batch = manifest_batch(entries, c.data.p2);
    have_hq = true;
  }
  const fs::path dir = o.output.empty() ? c.out_dir / ("restore_" + mode_name(c.sampler.mode)) : fs::path(o.output);
  ensure_dir(dir);
  const RestoreOutput r = restore_batch(pipe, batch, c.sampler);
  save_archive(dir / "restored.iirk", {{"restored", r.images}});
  char name[64];
  for (std::int64_t i = 0; i < r.images.dim(0); ++i) {
    std::snprintf(name, sizeof name, "%03lld", static_cast<long long>(i));
    write_pgm(dir / ("restored_" + std::string(name) + ".pgm"), row_of(r.images, i));
    write_pgm(dir / ("lq_" + std::string(name) + ".pgm"), row_of(batch.lq, i));
    if (have_hq) write_pgm(dir / ("hq_" + std::string(name) + ".pgm"), row_of(batch.hq, i));
    auto f = open_out(dir / ("trajectory_" + std::string(name) + ".csv"));
    r.logs[static_cast<std::size_t>(i)].write_csv(f);
  }
  if (have_hq) {
    const MetricReport restored = evaluate(r.images, batch.hq), input = evaluate(batch.lq, batch.hq);
    auto f = open_out(dir / "metrics.csv");
    restored.write_csv(f);
    auto g = open_out(dir / "metrics_input.csv");
    input.write_csv(g);
    out << "level " << o.level << " mode " << mode_name(c.sampler.mode) << ": PSNR "
        << MetricReport::mean(input.psnr) << " -> " << MetricReport::mean(restored.psnr) << " dB, SSIM "
        << MetricReport::mean(input.ssim) << " -> " << MetricReport::mean(restored.ssim) << ", band-SSIM "
        << MetricReport::mean(input.band_ssim) << " -> " << MetricReport::mean(restored.band_ssim) << '\n';
  }
  out << "wrote " << r.images.dim(0) << " images to " << dir.string() << std::endl;
  return 0;
}

int cmd_analyze(const RunConfig& c, const Options& o, std::ostream& out) {
  Checkpoint ck = load_upstream(ckpt_or(o, c.out_dir / "aggregator.iirk"), Phase::aggregator, "analyze",
                                "train-stage2");
  Pipeline pipe = std::move(ck.pipeline);
  const auto test = select_split(build_manifest(c.data), "test");
  const fs::path dir = o.output.empty() ? c.out_dir / "analysis" : fs::path(o.output);
  ensure_dir(dir);
  SamplerConfig s = c.sampler;
  s.snapshots = true;
  const TrajectoryStats stats = analyze_levels(pipe, c, test, s);
  for (const auto& p : write_panels(stats, dir)) out << "wrote " << p.string() << '\n';
  const double frac = delta_ordering_fraction(stats, s.eta);
  out << "delta ordering hq > down4 > down8_analog > multi at " << 100.0 * frac << "% of post-warmup steps: "
      << (frac >= 0.8 ? "PASS" : "FAIL") << '\n';
  for (int eta : c.eta_sweep) {
    SamplerConfig sw = s;
    sw.eta = eta;
    const fs::path p = dir / ("panel_c_eta" + std::to_string(eta) + ".csv");
    write_delta_panel(analyze_levels(pipe, c, test, sw), p);
    out << "wrote " << p.string() << '\n';
  }
  out.flush();
  return 0;
}

int cmd_bench(const RunConfig& c, const Options& o, std::ostream& out) {
  Pipeline pipe = init_pipeline(c);
  Rng r = Rng(c.train.seed).fork(3);
  pipe.denoiser.attach_adapter(r);
  Rng ra = Rng(c.train.seed).fork(4);
  pipe.aggregator.emplace(pipe.denoiser, ra);
  const PairBatch b = make_train_batch(c.data.seed, 0, c.train.batch, c.data.p2);
  const std::vector<int> t(static_cast<std::size_t>(c.train.batch), pipe.schedule.steps() / 2);
  auto time = [&](const char* what, auto&& fn) {
    fn();
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < o.bench_iters; ++i) fn();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out << what << ": " << ms / o.bench_iters << " ms" << std::endl;
  };
  Conditioning cond{b.class_ids, {}, {}, {}};
  time("encoder forward", [&] {
    NoGradGuard g;
    pipe.dcp.forward(b.lq, t);
  });
  {
    NoGradGuard g;
    cond.c_lq = pipe.dcp.forward(b.lq, t);
  }
  time("denoiser forward", [&] {
    NoGradGuard g;
    pipe.denoiser.forward(b.hq, t, cond);
  });
  time("denoiser forward+backward", [&] {
    Tensor loss = ops::mean(pipe.denoiser.forward(b.hq, t, cond));
    loss.backward();
  });
  time("aggregator forward+backward", [&] {
    Tensor loss = ops::mean(pipe.aggregator->forward(b.hq, b.lq, t)[0]);
    loss.backward();
  });
  SamplerConfig s = c.sampler;
  s.steps = 2;
  s.eta = 0;
  time("sampler step (2-step run / 2)", [&] { adares_sample(pipe, b.lq, b.class_ids, s); });
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale instant-reference image restoration"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_path, "config file ([section] key = value)");
  app.add_option("--set", o.sets, "override a config key: section.key=value")->take_all();
  auto* gen = app.add_subcommand("gen-data", "write the dataset manifest");
  auto* s1 = app.add_subcommand("train-stage1", "train denoiser, compact encoder and class tokens");
  auto* dist = app.add_subcommand("distill-previewer", "distill the previewer adapter");
  auto* s2 = app.add_subcommand("train-stage2", "train the aggregator");
  auto* rest = app.add_subcommand("restore", "restore a test level or PGM inputs");
  auto* ana = app.add_subcommand("analyze", "trajectory panels over the four degradation levels");
  auto* bench = app.add_subcommand("bench", "time the main forward and backward passes");
  for (auto* sub : {s1, dist, s2}) sub->add_flag("--resume", o.resume, "continue from the mid-run checkpoint");
  for (auto* sub : {dist, s2, rest, ana}) sub->add_option("--ckpt", o.ckpt, "input checkpoint");
  rest->add_option("--level", o.level, "test level: hq, down4, down8_analog, multi or mild");
  rest->add_option("--input", o.inputs, "PGM files to restore instead of a test level");
  for (auto* sub : {rest, ana}) sub->add_option("--output", o.output, "output directory");
  bench->add_option("--iters", o.bench_iters, "timed repetitions")->check(CLI::PositiveNumber);

  std::vector<const char*> argv{"iir"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return 2;
  }

  std::string command;
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    const RunConfig c = resolve_config(o);
    int code = 0;
    if (command == "gen-data") code = cmd_gen_data(c, out);
    else if (command == "train-stage1") code = cmd_train_stage1(c, o, out);
    else if (command == "distill-previewer") code = cmd_distill(c, o, out);
    else if (command == "train-stage2") code = cmd_train_stage2(c, o, out);
    else if (command == "restore") code = cmd_restore(c, o, out);
    else if (command == "analyze") code = cmd_analyze(c, o, out);
    else if (command == "bench") code = cmd_bench(c, o, out);
    if (command != "bench") append_run_log(c.out_dir / "run.log", c, command);
    (void)gen;
    return code;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return 2;
  } catch (const PhaseError& e) {
    err << "phase error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace iir
