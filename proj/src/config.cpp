#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>

#include "iir/app.hpp"
#include "iir/error.hpp"

namespace iir {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError("config key '" + key + "': '" + value + "' is not " + want);
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

template <class Int>
std::string fmt_list(const std::vector<Int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(static_cast<double>(v[i]));
  return out;
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Entry {
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define IIR_INT(field) \
  [](const RunConfig& c) { return std::to_string(c.field); }, \
  [](RunConfig& c, const std::string& k, const std::string& v) { c.field = static_cast<decltype(c.field)>(to_int(k, v)); }
#define IIR_U64(field) \
  [](const RunConfig& c) { return std::to_string(c.field); }, \
  [](RunConfig& c, const std::string& k, const std::string& v) { c.field = to_u64(k, v); }
#define IIR_DBL(field) \
  [](const RunConfig& c) { return fmt(static_cast<double>(c.field)); }, \
  [](RunConfig& c, const std::string& k, const std::string& v) { c.field = to_double(k, v); }
#define IIR_BOOL(field) \
  [](const RunConfig& c) { return fmt(c.field); }, \
  [](RunConfig& c, const std::string& k, const std::string& v) { c.field = to_bool(k, v); }

const std::map<std::string, Entry>& table() {
  static const std::map<std::string, Entry> t = {
      {"schedule.steps", {"training time-steps T", IIR_INT(schedule_steps)}},
      {"nets.channels", {"UNet base width C (levels use C, 2C, 4C)", IIR_INT(net.channels)}},
      {"nets.tokens", {"compact encoder output tokens M", IIR_INT(net.tokens)}},
      {"nets.token_dim", {"token width D", IIR_INT(net.token_dim)}},
      {"nets.class_tokens", {"tokens per class label", IIR_INT(net.class_tokens)}},
      {"nets.heads", {"attention heads", IIR_INT(net.heads)}},
      {"nets.encoder_layers", {"self-attention layers in the compact encoder", IIR_INT(net.encoder_layers)}},
      {"nets.lora_rank", {"previewer adapter rank r", IIR_INT(net.lora_rank)}},
      {"nets.lora_scale", {"previewer adapter scale s", IIR_DBL(net.lora_scale)}},
      {"nets.w_lq",
       {"LQ cross-attention weight per conditioning block (5 values, encoder to decoder)",
        [](const RunConfig& c) {
          std::string out;
          for (std::size_t i = 0; i < c.net.w_lq.size(); ++i) out += (i ? "," : "") + fmt(c.net.w_lq[i]);
          return out;
        },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          auto items = split_list(v);
          if (items.size() == 1) items.assign(c.net.w_lq.size(), items[0]);
          if (items.size() != c.net.w_lq.size()) bad_value(k, v, "1 or 5 comma-separated numbers");
          for (std::size_t i = 0; i < items.size(); ++i) c.net.w_lq[i] = to_double(k, items[i]);
        }}},
      {"training.lr", {"Stage I AdamW learning rate", IIR_DBL(train.lr)}},
      {"training.distill_lr", {"previewer distillation learning rate", IIR_DBL(train.distill_lr)}},
      {"training.stage2_lr", {"Stage II learning rate", IIR_DBL(train.stage2_lr)}},
      {"training.lr_schedule",
       {"constant, or cosine annealing to 0 over each phase",
        [](const RunConfig& c) { return std::string(c.train.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "constant") c.train.lr_schedule = LrSchedule::constant;
          else if (v == "cosine") c.train.lr_schedule = LrSchedule::cosine;
          else bad_value(k, v, "constant or cosine");
        }}},
      {"training.weight_decay", {"AdamW decoupled weight decay", IIR_DBL(train.weight_decay)}},
      {"training.grad_clip", {"global gradient-norm clip, 0 disables", IIR_DBL(train.grad_clip)}},
      {"training.batch", {"images per step", IIR_INT(train.batch)}},
      {"training.lq_dropout", {"probability of zeroing the LQ tokens per image", IIR_DBL(train.lq_dropout)}},
      {"training.class_dropout", {"probability of the null class per image", IIR_DBL(train.class_dropout)}},
      {"training.stage1_steps", {"Stage I steps", IIR_INT(train.stage1_steps)}},
      {"training.distill_steps", {"distillation steps", IIR_INT(train.distill_steps)}},
      {"training.stage2_steps", {"Stage II steps", IIR_INT(train.stage2_steps)}},
      {"training.checkpoint_every", {"steps between resumable checkpoints, 0 disables", IIR_INT(train.checkpoint_every)}},
      {"training.log_every", {"steps between progress lines", IIR_INT(train.log_every)}},
      {"training.noisy_preview", {"Stage II sees re-noised previews (ablation)", IIR_BOOL(train.noisy_preview)}},
      {"training.seed", {"weight init and training stream seed", IIR_U64(train.seed)}},
      {"sampler.steps", {"DDIM steps K", IIR_INT(sampler.steps)}},
      {"sampler.cfg_scale", {"classifier-free guidance scale", IIR_DBL(sampler.cfg_scale)}},
      {"sampler.eta", {"gate is zero once this many steps or fewer remain", IIR_INT(sampler.eta)}},
      {"sampler.delta_max", {"upper clamp of the quality gate", IIR_DBL(sampler.delta_max)}},
      {"sampler.mode",
       {"adares, fixed, no_reference or noisy_preview",
        [](const RunConfig& c) { return mode_name(c.sampler.mode); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.sampler.mode = parse_mode(v); }}},
      {"sampler.seed", {"sampling noise seed", IIR_U64(sampler.seed)}},
      {"sampler.uncond_drops_residuals",
       {"unconditional guidance branch also drops aggregator residuals", IIR_BOOL(sampler.uncond_drops_residuals)}},
      {"sampler.clip_x0", {"clamp x0 estimates to [-1,1] before each DDIM step", IIR_BOOL(sampler.clip_x0)}},
      {"sampler.snapshots", {"keep preview and x0 snapshots in trajectory logs", IIR_BOOL(sampler.snapshots)}},
      {"sampler.creative_class",
       {"target class for creative restoration, or none",
        [](const RunConfig& c) {
          return c.sampler.creative ? class_name(c.sampler.creative->target_class) : std::string("none");
        },
        [](RunConfig& c, const std::string&, const std::string& v) {
          if (v == "none") {
            c.sampler.creative.reset();
            return;
          }
          const int cutoff = c.sampler.creative ? c.sampler.creative->cutoff : c.sampler.steps / 2;
          c.sampler.creative = CreativeSpec{parse_class(v), cutoff};
        }}},
      {"sampler.creative_cutoff",
       {"creative restoration drops residuals after this grid index (0 keeps them)",
        [](const RunConfig& c) { return std::to_string(c.sampler.creative ? c.sampler.creative->cutoff : 0); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          const int cutoff = static_cast<int>(to_int(k, v));
          if (c.sampler.creative) c.sampler.creative->cutoff = cutoff;
          else if (cutoff != 0) throw ConfigError("sampler.creative_cutoff needs sampler.creative_class set first");
        }}},
      {"data.seed", {"dataset seed", IIR_U64(data.seed)}},
      {"data.train_size", {"training pairs in the manifest", IIR_INT(data.train_size)}},
      {"data.val_size", {"validation pairs", IIR_INT(data.val_size)}},
      {"data.eval_size", {"test pairs per degradation level", IIR_INT(data.eval_size)}},
      {"data.p2", {"probability of a second degradation pass (multi level)", IIR_DBL(data.p2)}},
      {"paths.out_dir", {"directory for checkpoints, logs and outputs",
                         [](const RunConfig& c) { return c.out_dir.string(); },
                         [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }}},
      {"analyze.eta_sweep",
       {"comma-separated eta values for extra panel-c curves",
        [](const RunConfig& c) { return fmt_list(c.eta_sweep); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.eta_sweep.clear();
          for (const auto& item : split_list(v)) c.eta_sweep.push_back(static_cast<int>(to_int(k, item)));
        }}},
  };
  return t;
}

#undef IIR_INT
#undef IIR_U64
#undef IIR_DBL
#undef IIR_BOOL

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& t = table();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, key, trim(value));
}

std::string RunConfig::get(const std::string& key) const {
  auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [key, e] : table()) out += key + " = " + e.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (schedule_steps < 8) fail("schedule.steps must be at least 8");
  if (net.channels < 1 || net.tokens < 1 || net.token_dim < 1 || net.class_tokens < 1) fail("nets sizes must be positive");
  if (net.heads < 1 || net.token_dim % net.heads || (2 * net.channels) % net.heads) {
    fail("nets.heads must divide nets.token_dim and 2 * nets.channels");
  }
  if (net.lora_rank < 1) fail("nets.lora_rank must be positive");
  if (train.batch < 1) fail("training.batch must be positive");
  for (double p : {train.lq_dropout, train.class_dropout, data.p2}) {
    if (p < 0 || p > 1) fail("probabilities must lie in [0,1]");
  }
  for (double lr : {train.lr, train.distill_lr, train.stage2_lr}) {
    if (lr <= 0) fail("learning rates must be positive");
  }
  if (train.stage1_steps < 0 || train.distill_steps < 0 || train.stage2_steps < 0) fail("step counts must be >= 0");
  if (data.train_size < 1 || data.val_size < 1 || data.eval_size < 1) fail("data sizes must be positive");
  if (sampler.steps >= schedule_steps) fail("sampler.steps must be below schedule.steps");
  sampler.validate();
  for (int e : eta_sweep) {
    if (e < 0 || e >= sampler.steps) fail("analyze.eta_sweep values must lie in [0, sampler.steps)");
  }
}

const std::vector<RunConfig::KeyDoc>& RunConfig::documented_keys() {
  static const std::vector<KeyDoc> docs = [] {
    std::vector<KeyDoc> d;
    for (const auto& [k, e] : table()) d.push_back({k, e.doc});
    return d;
  }();
  return docs;
}

RunConfig parse_config(std::istream& in, const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig c;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    c.set(section.empty() ? key : section + "." + key, line.substr(eq + 1));
  }
  for (const auto& [k, v] : overrides) c.set(k, v);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  return parse_config(in, overrides);
}

}  // namespace iir
