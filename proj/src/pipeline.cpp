#include "osd/pipeline.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <fmt/format.h>
#include <fstream>
#include <set>
#include <sstream>

namespace osd::pipeline {

namespace {

// ---------------------------------------------------------------------------
// Strict JSON reading: every key must be consumed, types are checked exactly.

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ValidationError(where_ + ": expected an object");
  }

  template <class T>
  void opt(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(j_.at(key), out, where_ + "." + key);
  }

  template <class T>
  void req(const char* key, T& out) {
    if (!j_.contains(key)) throw ValidationError(where_ + "." + key + ": required key missing");
    opt(key, out);
  }

  /// Sub-object reader; an absent key yields an empty object.
  Reader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, where_ + "." + key);
  }

  /// Marks a key as handled by the caller; returns it when present.
  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError(where_ + ": unknown key \"" + k + "\"");
  }

 private:
  static void read(const json& v, double& out, const std::string& w) {
    if (!v.is_number()) throw ValidationError(w + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, int& out, const std::string& w) {
    if (!v.is_number_integer()) throw ValidationError(w + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
      throw ValidationError(w + ": integer out of range");
    out = static_cast<int>(x);
  }
  static void read(const json& v, long& out, const std::string& w) {
    if (!v.is_number_integer()) throw ValidationError(w + ": expected an integer");
    out = v.get<long>();
  }
  static_assert(std::is_same_v<std::size_t, std::uint64_t>);
  static void read(const json& v, std::uint64_t& out, const std::string& w) {
    if (!v.is_number_unsigned()) throw ValidationError(w + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, bool& out, const std::string& w) {
    if (!v.is_boolean()) throw ValidationError(w + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, std::string& out, const std::string& w) {
    if (!v.is_string()) throw ValidationError(w + ": expected a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, std::vector<double>& out, const std::string& w) {
    if (!v.is_array()) throw ValidationError(w + ": expected an array of numbers");
    out.clear();
    for (const auto& e : v) {
      double x = 0;
      read(e, x, w + "[]");
      out.push_back(x);
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::ofstream open_text(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream o(path);
  if (!o) throw IoError("cannot open " + path.string() + " for writing");
  return o;
}

void close_text(std::ofstream& o, const fs::path& path) {
  o.close();
  if (!o) throw IoError("write failed: " + path.string());
}

eval::ErrorReportOptions report_options(const PipelineConfig& c) {
  eval::ErrorReportOptions r;
  r.bin_width = c.evaluation.bin_width;
  r.glucose_offset = c.campaign.nominal.G_b;
  return r;
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig PipelineConfig::from_json(const json& root) {
  PipelineConfig c;
  Reader r(root, "config");

  {
    Reader s = r.child("seeds");
    s.req("simulation", c.seeds.simulation);
    s.req("hnsw", c.seeds.hnsw);
    s.req("train", c.seeds.train);
    s.req("audit", c.seeds.audit);
    s.finish();
  }
  {
    Reader s = r.child("campaign");
    s.opt("n_subjects", c.campaign.n_subjects);
    s.opt("days_per_subject", c.campaign.days_per_subject);
    s.opt("threads", c.campaign.threads);
    s.finish();
  }
  {
    Reader s = r.child("subject");
    auto& n = c.campaign.nominal;
    s.opt("S_g", n.S_g);
    s.opt("G_b", n.G_b);
    s.opt("S_i", n.S_i);
    s.opt("p_2", n.p_2);
    s.opt("I_b", n.I_b);
    s.opt("k_a1", n.k_a1);
    s.opt("k_d", n.k_d);
    s.opt("k_a2", n.k_a2);
    s.opt("k_cl", n.k_cl);
    s.opt("V_I", n.V_I);
    s.opt("BW", n.BW);
    Reader sp = s.child("spread");
    auto& p = c.campaign.spread;
    sp.opt("S_g", p.S_g);
    sp.opt("S_i", p.S_i);
    sp.opt("p_2", p.p_2);
    sp.opt("k_a1", p.k_a1);
    sp.opt("k_d", p.k_d);
    sp.opt("k_a2", p.k_a2);
    sp.opt("k_cl", p.k_cl);
    sp.opt("V_I", p.V_I);
    sp.opt("BW", p.BW);
    sp.finish();
    s.finish();
  }
  {
    Reader s = r.child("scenario");
    auto& d = c.campaign.scenario;
    s.opt("meals_min", d.meals_min);
    s.opt("meals_max", d.meals_max);
    s.opt("carbs_min", d.carbs_min);
    s.opt("carbs_max", d.carbs_max);
    s.opt("meal_slots", d.meal_slots);
    s.opt("time_jitter", d.time_jitter);
    s.opt("fast_fraction", d.fast_fraction);
    s.opt("hybrid_probability", d.hybrid_probability);
    s.opt("bolus_probability", d.bolus_probability);
    s.opt("carb_ratio", d.carb_ratio);
    s.opt("rescue_carbs_enabled", d.rescue_carbs_enabled);
    s.opt("cgm_noise_sd", d.cgm_noise_sd);
    s.finish();
  }
  {
    Reader s = r.child("simulation");
    auto& o = c.campaign.sim;
    s.opt("rescue_carbs", o.rescue_carbs);
    s.opt("rescue_threshold", o.rescue_threshold);
    s.opt("rescue_lockout", o.rescue_lockout);
    s.opt("substeps", o.substeps);
    s.opt("kalman_measurement_variance", o.kalman.R_v);
    Reader m = s.child("meal");
    m.opt("fast_tau1", o.meal_model.fast_tau1);
    m.opt("fast_tau2", o.meal_model.fast_tau2);
    m.opt("slow_tau1", o.meal_model.slow_tau1);
    m.opt("slow_tau2", o.meal_model.slow_tau2);
    m.opt("peak_gain", o.meal_model.peak_gain);
    m.finish();
    Reader i = s.child("iob");
    std::string kind = o.iob_curve.kind == glucose::IobCurve::Kind::Linear ? "linear" : "exponential";
    i.opt("kind", kind);
    if (kind == "linear") o.iob_curve.kind = glucose::IobCurve::Kind::Linear;
    else if (kind == "exponential") o.iob_curve.kind = glucose::IobCurve::Kind::Exponential;
    else throw ValidationError("config.simulation.iob.kind: expected \"linear\" or \"exponential\"");
    i.opt("duration", o.iob_curve.duration);
    i.opt("time_constant", o.iob_curve.time_constant);
    i.finish();
    s.finish();
  }
  {
    Reader s = r.child("mpc");
    auto& m = c.campaign.mpc;
    s.opt("horizon", m.horizon);
    s.opt("kappa", m.kappa);
    s.opt("u_max_abs", m.u_max_abs);
    s.opt("rate_limit", m.rate_limit);
    s.opt("hypo_level", m.hypo_level);
    s.opt("q_max", m.q_max);
    s.opt("q_rate", m.q_rate);
    s.opt("q_floor", m.q_floor);
    s.opt("lambda_min", m.lambda_min);
    s.opt("lambda_max", m.lambda_max);
    s.opt("lambda_beta", m.lambda_beta);
    s.opt("ref_decay", m.ref_decay);
    s.opt("dist_decay", m.dist_decay);
    s.opt("dist_rate_threshold", m.dist_rate_threshold);
    s.opt("anchor_rate_to_previous", m.anchor_rate_to_previous);
    s.finish();
  }
  {
    Reader s = r.child("osd");
    s.opt("j_star", c.osd.j_star);
    s.opt("s_u", c.osd.s_u);
    s.opt("metric_min_records", c.osd.metric_min_records);
    s.opt("window", c.osd.build.window);
    s.opt("history_stride", c.osd.build.history_stride);
    s.opt("exact_guard", c.osd.build.exact_guard);
    Reader h = s.child("hnsw");
    h.opt("M", c.osd.build.hnsw.M);
    h.opt("ef_construction", c.osd.build.hnsw.ef_construction);
    h.opt("ef_search", c.osd.build.hnsw.ef_search);
    h.opt("ef_verify", c.osd.build.hnsw.ef_verify);
    h.opt("level_mult", c.osd.build.hnsw.level_mult);
    h.finish();
    s.finish();
  }
  {
    Reader s = r.child("net");
    std::string kind = c.net.kind == neural::Kind::ResNet ? "resnet" : "mlp";
    std::string shortcut = c.net.shortcut == neural::Shortcut::Affine ? "affine" : "identity";
    s.opt("kind", kind);
    s.opt("depth", c.net.depth);
    s.opt("width", c.net.width);
    s.opt("shortcut", shortcut);
    s.opt("epsilon", c.net.norm.epsilon);
    s.finish();
    if (kind == "resnet") c.net.kind = neural::Kind::ResNet;
    else if (kind == "mlp") c.net.kind = neural::Kind::Mlp;
    else throw ValidationError("config.net.kind: expected \"resnet\" or \"mlp\"");
    if (shortcut == "affine") c.net.shortcut = neural::Shortcut::Affine;
    else if (shortcut == "identity") c.net.shortcut = neural::Shortcut::Identity;
    else throw ValidationError("config.net.shortcut: expected \"affine\" or \"identity\"");
  }
  {
    Reader s = r.child("train");
    auto& t = c.train;
    s.opt("batch_size", t.batch_size);
    s.opt("learning_rate", t.learning_rate);
    s.opt("learning_rate_min", t.learning_rate_min);
    s.opt("epochs", t.epochs);
    s.opt("steps", t.steps);
    s.opt("beta1", t.beta1);
    s.opt("beta2", t.beta2);
    s.opt("adam_epsilon", t.adam_epsilon);
    s.opt("validation_fraction", t.validation_fraction);
    s.opt("patience", t.patience);
    s.opt("eval_interval", t.eval_interval);
    s.finish();
  }
  {
    Reader s = r.child("evaluation");
    auto& e = c.evaluation;
    if (const json* cells_ptr = s.raw("train_cells")) {
      const json& cells = *cells_ptr;
      if (!cells.is_array()) throw ValidationError("config.evaluation.train_cells: expected an array of [J*, S_u]");
      e.train_cells.clear();
      for (const auto& cell : cells) {
        if (!cell.is_array() || cell.size() != 2 || !cell[0].is_number() || !cell[1].is_number())
          throw ValidationError("config.evaluation.train_cells: each entry must be [J*, S_u]");
        e.train_cells.emplace_back(cell[0].get<double>(), cell[1].get<double>());
      }
    }
    s.opt("train_raw", e.train_raw);
    s.opt("test_ratio", e.test_ratio);
    s.opt("bin_width", e.bin_width);
    s.opt("audit_fraction", e.audit_fraction);
    s.opt("timing_states", e.timing_states);
    s.finish();
  }
  {
    Reader s = r.child("paths");
    std::string w = c.work_dir.string();
    s.opt("work_dir", w);
    c.work_dir = w;
    s.finish();
  }
  r.finish();

  c.campaign.mpc.u_b = c.campaign.nominal.basal_rate();
  c.campaign.master_seed = c.seeds.simulation;
  c.osd.build.hnsw.seed = c.seeds.hnsw;
  c.train.seed = c.seeds.train;
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void PipelineConfig::validate() const {
  campaign.nominal.validate();
  campaign.spread.validate();
  campaign.scenario.validate();
  campaign.sim.validate();
  campaign.mpc.validate();
  require(campaign.n_subjects >= 1 && campaign.days_per_subject >= 1, "config.campaign: need >= 1 subject and day");
  require(campaign.threads >= 1, "config.campaign.threads must be >= 1");
  require(!osd.j_star.empty() && !osd.s_u.empty(), "config.osd: empty grid");
  for (double j : osd.j_star) require(j > 0 && std::isfinite(j), "config.osd.j_star entries must be > 0");
  for (double s : osd.s_u) require(s >= 0 && std::isfinite(s), "config.osd.s_u entries must be >= 0");
  osd.build.hnsw.validate();
  require(osd.build.window >= 1, "config.osd.window must be >= 1");
  net.validate();
  train.validate();
  for (const auto& [j, s] : evaluation.train_cells) {
    require(j > 0 && std::isfinite(j) && s >= 0 && std::isfinite(s),
            fmt::format("config.evaluation.train_cells: ({}, {}) needs J* > 0 and S_u >= 0", j, s));
  }
  require(!evaluation.train_cells.empty() || evaluation.train_raw, "config.evaluation: nothing to train");
  require(evaluation.test_ratio >= 1.0, "config.evaluation.test_ratio must be >= 1");
  require(evaluation.bin_width > 0, "config.evaluation.bin_width must be > 0");
  require(evaluation.audit_fraction > 0 && evaluation.audit_fraction <= 1,
          "config.evaluation.audit_fraction must be in (0, 1]");
  require(evaluation.timing_states >= 1, "config.evaluation.timing_states must be >= 1");
}

json PipelineConfig::to_json() const {
  const auto& n = campaign.nominal;
  const auto& p = campaign.spread;
  const auto& d = campaign.scenario;
  const auto& o = campaign.sim;
  const auto& m = campaign.mpc;
  json cells = json::array();
  for (const auto& [j, s] : evaluation.train_cells) cells.push_back({j, s});
  return {
      {"seeds", {{"simulation", seeds.simulation}, {"hnsw", seeds.hnsw}, {"train", seeds.train}, {"audit", seeds.audit}}},
      {"campaign",
       {{"n_subjects", campaign.n_subjects}, {"days_per_subject", campaign.days_per_subject},
        {"threads", campaign.threads}}},
      {"subject",
       {{"S_g", n.S_g},
        {"G_b", n.G_b},
        {"S_i", n.S_i},
        {"p_2", n.p_2},
        {"I_b", n.I_b},
        {"k_a1", n.k_a1},
        {"k_d", n.k_d},
        {"k_a2", n.k_a2},
        {"k_cl", n.k_cl},
        {"V_I", n.V_I},
        {"BW", n.BW},
        {"spread",
         {{"S_g", p.S_g},
          {"S_i", p.S_i},
          {"p_2", p.p_2},
          {"k_a1", p.k_a1},
          {"k_d", p.k_d},
          {"k_a2", p.k_a2},
          {"k_cl", p.k_cl},
          {"V_I", p.V_I},
          {"BW", p.BW}}}}},
      {"scenario",
       {{"meals_min", d.meals_min},
        {"meals_max", d.meals_max},
        {"carbs_min", d.carbs_min},
        {"carbs_max", d.carbs_max},
        {"meal_slots", d.meal_slots},
        {"time_jitter", d.time_jitter},
        {"fast_fraction", d.fast_fraction},
        {"hybrid_probability", d.hybrid_probability},
        {"bolus_probability", d.bolus_probability},
        {"carb_ratio", d.carb_ratio},
        {"rescue_carbs_enabled", d.rescue_carbs_enabled},
        {"cgm_noise_sd", d.cgm_noise_sd}}},
      {"simulation",
       {{"rescue_carbs", o.rescue_carbs},
        {"rescue_threshold", o.rescue_threshold},
        {"rescue_lockout", o.rescue_lockout},
        {"substeps", o.substeps},
        {"kalman_measurement_variance", o.kalman.R_v},
        {"meal",
         {{"fast_tau1", o.meal_model.fast_tau1},
          {"fast_tau2", o.meal_model.fast_tau2},
          {"slow_tau1", o.meal_model.slow_tau1},
          {"slow_tau2", o.meal_model.slow_tau2},
          {"peak_gain", o.meal_model.peak_gain}}},
        {"iob",
         {{"kind", o.iob_curve.kind == glucose::IobCurve::Kind::Linear ? "linear" : "exponential"},
          {"duration", o.iob_curve.duration},
          {"time_constant", o.iob_curve.time_constant}}}}},
      {"mpc",
       {{"horizon", m.horizon},
        {"kappa", m.kappa},
        {"u_max_abs", m.u_max_abs},
        {"rate_limit", m.rate_limit},
        {"hypo_level", m.hypo_level},
        {"q_max", m.q_max},
        {"q_rate", m.q_rate},
        {"q_floor", m.q_floor},
        {"lambda_min", m.lambda_min},
        {"lambda_max", m.lambda_max},
        {"lambda_beta", m.lambda_beta},
        {"ref_decay", m.ref_decay},
        {"dist_decay", m.dist_decay},
        {"dist_rate_threshold", m.dist_rate_threshold},
        {"anchor_rate_to_previous", m.anchor_rate_to_previous}}},
      {"osd",
       {{"j_star", osd.j_star},
        {"s_u", osd.s_u},
        {"metric_min_records", osd.metric_min_records},
        {"window", osd.build.window},
        {"history_stride", osd.build.history_stride},
        {"exact_guard", osd.build.exact_guard},
        {"hnsw",
         {{"M", osd.build.hnsw.M},
          {"ef_construction", osd.build.hnsw.ef_construction},
          {"ef_search", osd.build.hnsw.ef_search},
          {"ef_verify", osd.build.hnsw.ef_verify},
          {"level_mult", osd.build.hnsw.level_mult}}}}},
      {"net",
       {{"kind", net.kind == neural::Kind::ResNet ? "resnet" : "mlp"},
        {"depth", net.depth},
        {"width", net.width},
        {"shortcut", net.shortcut == neural::Shortcut::Affine ? "affine" : "identity"},
        {"epsilon", net.norm.epsilon}}},
      {"train",
       {{"batch_size", train.batch_size},
        {"learning_rate", train.learning_rate},
        {"learning_rate_min", train.learning_rate_min},
        {"epochs", train.epochs},
        {"steps", train.steps},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"adam_epsilon", train.adam_epsilon},
        {"validation_fraction", train.validation_fraction},
        {"patience", train.patience},
        {"eval_interval", train.eval_interval}}},
      {"evaluation",
       {{"train_cells", cells},
        {"train_raw", evaluation.train_raw},
        {"test_ratio", evaluation.test_ratio},
        {"bin_width", evaluation.bin_width},
        {"audit_fraction", evaluation.audit_fraction},
        {"timing_states", evaluation.timing_states}}},
      {"paths", {{"work_dir", work_dir.string()}}},
  };
}

std::string PipelineConfig::hash() const {
  json j = to_json();
  j.erase("paths");  // where a run is stored does not change what it computes
  return sha256_string(j.dump());
}

void PipelineConfig::override_seeds(std::uint64_t seed) {
  seeds.simulation = scenario::derive_seed(seed, 1);
  seeds.hnsw = scenario::derive_seed(seed, 2);
  seeds.train = scenario::derive_seed(seed, 3);
  seeds.audit = scenario::derive_seed(seed, 4);
  campaign.master_seed = seeds.simulation;
  osd.build.hnsw.seed = seeds.hnsw;
  train.seed = seeds.train;
}

// ---------------------------------------------------------------------------
// Hashing, manifests and sidecars

std::string sha256_string(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("SHA-256 computation failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 init failed");
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
  return hex;
}

std::string cell_label(double j_star, double s_u) { return fmt::format("osd_J{:g}_S{:g}", j_star, s_u); }

json RunManifest::to_json() const {
  auto files = [](const std::vector<FileRecord>& v) {
    json a = json::array();
    for (const auto& f : v) a.push_back({{"path", f.path}, {"sha256", f.sha256}});
    return a;
  };
  return {{"command", command},         {"config_hash", config_hash}, {"tool_version", tool_version},
          {"inputs", files(inputs)},    {"outputs", files(outputs)},  {"wall_seconds", wall_seconds},
          {"summary", summary}};
}

void RunManifest::write(const fs::path& path) const {
  auto o = open_text(path);
  o << to_json().dump(2) << '\n';
  close_text(o, path);
}

FileRecord seal_output(const fs::path& file) {
  FileRecord r{file.string(), sha256_file(file)};
  const fs::path side = file.string() + ".sha256";
  auto o = open_text(side);
  o << r.sha256 << "  " << file.filename().string() << '\n';
  close_text(o, side);
  return r;
}

FileRecord check_input(const fs::path& file) {
  if (!fs::exists(file)) throw IoError("input not found: " + file.string());
  FileRecord r{file.string(), sha256_file(file)};
  const fs::path side = file.string() + ".sha256";
  if (fs::exists(side)) {
    std::ifstream in(side);
    std::string declared;
    in >> declared;
    if (declared != r.sha256)
      throw IoError("hash mismatch for " + file.string() + ": declared " + declared + ", found " + r.sha256);
  }
  return r;
}

void save_osd(const fs::path& path, const builder::Osd& osd, const std::string& config_hash) {
  fs::create_directories(path.parent_path());
  io::write_dataset(path, osd.records);
  json s_x = json::array();
  for (int i = 0; i < kStateDim; ++i) {
    json row = json::array();
    for (int j = 0; j < kStateDim; ++j) row.push_back(osd.params.s_x(i, j));
    s_x.push_back(row);
  }
  json hist = json::array();
  for (const auto& [k, r] : osd.stats.rejection_ratio_history) hist.push_back({k, r});
  const json side = {{"j_star", osd.params.j_star},
                     {"s_u", osd.params.s_u},
                     {"s_x", s_x},
                     {"u_s", osd.u_s},
                     {"n_d", osd.size()},
                     {"processed", osd.stats.processed},
                     {"window_size", osd.stats.window_size},
                     {"rejections_in_window", osd.stats.rejections_in_window},
                     {"hnsw_misses", osd.stats.hnsw_misses},
                     {"final_rejection_ratio", osd.stats.current_ratio()},
                     {"rejection_ratio_history", hist},
                     {"source_index", osd.source_index},
                     {"config_hash", config_hash}};
  const fs::path side_path = path.string() + ".json";
  auto o = open_text(side_path);
  o << side.dump() << '\n';
  close_text(o, side_path);
}

builder::Osd load_osd(const fs::path& path) {
  builder::Osd osd;
  osd.records = io::read_dataset(path);
  const fs::path side_path = path.string() + ".json";
  std::ifstream in(side_path);
  if (!in) throw IoError("missing OSD sidecar " + side_path.string());
  json s;
  try {
    s = json::parse(in);
    osd.params.j_star = s.at("j_star").get<double>();
    osd.params.s_u = s.at("s_u").get<double>();
    for (int i = 0; i < kStateDim; ++i)
      for (int j = 0; j < kStateDim; ++j) osd.params.s_x(i, j) = s.at("s_x").at(i).at(j).get<double>();
    osd.u_s = s.at("u_s").get<double>();
    osd.stats.processed = s.at("processed").get<std::size_t>();
    osd.stats.window_size = s.at("window_size").get<std::size_t>();
    osd.stats.rejections_in_window = s.at("rejections_in_window").get<std::size_t>();
    osd.stats.hnsw_misses = s.at("hnsw_misses").get<std::size_t>();
    osd.stats.accepted = osd.records.size();
    for (const auto& h : s.at("rejection_ratio_history"))
      osd.stats.rejection_ratio_history.emplace_back(h.at(0).get<std::size_t>(), h.at(1).get<double>());
    osd.source_index = s.at("source_index").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    throw IoError("bad OSD sidecar " + side_path.string() + ": " + e.what());
  }
  if (s.at("n_d").get<std::size_t>() != osd.size() || osd.source_index.size() != osd.size())
    throw IoError("OSD sidecar " + side_path.string() + " does not match the record count");
  osd.params.validate();
  return osd;
}

// ---------------------------------------------------------------------------
// Commands

std::vector<std::pair<double, double>> select_cells(const PipelineConfig& config, const std::string& grid_cell) {
  std::vector<std::pair<double, double>> all;
  for (double j : config.osd.j_star)
    for (double s : config.osd.s_u) all.emplace_back(j, s);
  for (const auto& c : config.evaluation.train_cells)
    if (std::find(all.begin(), all.end(), c) == all.end()) all.push_back(c);
  if (grid_cell.empty()) return all;
  const auto comma = grid_cell.find(',');
  require(comma != std::string::npos, "--grid-cell expects J*,S_u");
  double j = 0, s = 0;
  try {
    j = std::stod(grid_cell.substr(0, comma));
    s = std::stod(grid_cell.substr(comma + 1));
  } catch (const std::exception&) {
    throw ValidationError("--grid-cell expects two numbers, got \"" + grid_cell + "\"");
  }
  for (const auto& c : all)
    if (c.first == j && c.second == s) return {c};
  throw ValidationError("--grid-cell " + grid_cell + " is neither a grid cell nor a training cell");
}

SimulateResult cmd_simulate(const PipelineConfig& config, const std::optional<fs::path>& output) {
  const auto t0 = std::chrono::steady_clock::now();
  const Layout lay{config.work_dir};
  SimulateResult res;
  res.output = output.value_or(lay.raw());
  if (!res.output.parent_path().empty()) fs::create_directories(res.output.parent_path());
  scenario::CampaignConfig cc = config.campaign;
  cc.output = res.output;
  res.stats = scenario::run_campaign(cc);

  RunManifest m;
  m.command = "simulate";
  m.config_hash = config.hash();
  m.outputs.push_back(seal_output(res.output));
  m.wall_seconds = seconds_since(t0);
  m.summary = {{"records", res.stats.records},       {"days", res.stats.days},
               {"degenerate_days", res.stats.degenerate_days}, {"aborted_days", res.stats.aborted_days},
               {"rescues", res.stats.rescues}};
  m.write(lay.manifest_dir() / "simulate.json");
  return res;
}

BuildResult cmd_build_osd(const PipelineConfig& config, const std::optional<fs::path>& input,
                          const std::optional<fs::path>& output_dir, const std::string& grid_cell) {
  const auto t0 = std::chrono::steady_clock::now();
  const Layout lay{config.work_dir};
  const fs::path in = input.value_or(lay.raw());
  const fs::path out_dir = output_dir.value_or(lay.osd_dir());
  RunManifest m;
  m.command = "build-osd";
  m.config_hash = config.hash();
  m.inputs.push_back(check_input(in));
  const io::Dataset raw = io::read_dataset(in);
  const Mat8 s_x = builder::estimate_state_metric(raw, config.osd.metric_min_records);

  BuildResult res;
  json cells = json::array();
  for (const auto& [j, s] : select_cells(config, grid_cell)) {
    const auto tc = std::chrono::steady_clock::now();
    builder::Osd osd = builder::build_osd(raw, {j, s_x, s}, config.osd.build);
    res.build_seconds.push_back(seconds_since(tc));
    const fs::path p = out_dir / (cell_label(j, s) + ".osd");
    save_osd(p, osd, m.config_hash);
    m.outputs.push_back(seal_output(p));
    m.outputs.push_back(seal_output(p.string() + ".json"));
    cells.push_back({{"label", cell_label(j, s)},
                     {"n_d", osd.size()},
                     {"u_s", osd.u_s},
                     {"final_rejection_ratio", osd.stats.current_ratio()},
                     {"hnsw_misses", osd.stats.hnsw_misses},
                     {"build_seconds", res.build_seconds.back()}});
    res.outputs.push_back(p);
    res.cells.push_back(std::move(osd));
  }

  // The common test set is built only for full-grid runs.
  if (grid_cell.empty() && !config.evaluation.train_cells.empty()) {
    std::vector<const builder::Osd*> training;
    for (const auto& [j, s] : config.evaluation.train_cells)
      for (const auto& o : res.cells)
        if (o.params.j_star == j && o.params.s_u == s) training.push_back(&o);
    res.test = eval::make_test_osd(raw, training, config.evaluation.test_ratio, config.osd.build);
    const fs::path p = out_dir / "test.osd";
    save_osd(p, *res.test, m.config_hash);
    m.outputs.push_back(seal_output(p));
    m.outputs.push_back(seal_output(p.string() + ".json"));
    res.outputs.push_back(p);
  }
  m.wall_seconds = seconds_since(t0);
  m.summary = {{"cells", cells}, {"test_records", res.test ? res.test->size() : 0}};
  m.write(lay.manifest_dir() / "build-osd.json");
  return res;
}

VerifyResult cmd_verify(const PipelineConfig& config, const std::vector<fs::path>& inputs,
                        const std::optional<fs::path>& output_dir, bool exact) {
  const auto t0 = std::chrono::steady_clock::now();
  const Layout lay{config.work_dir};
  std::vector<fs::path> in = inputs;
  if (in.empty()) {
    in.push_back(lay.raw());
    for (const auto& [j, s] : select_cells(config, {})) in.push_back(lay.osd_file(j, s));
  }
  require(in.size() >= 2, "verify: expects the raw dataset followed by one or more OSD files");
  const fs::path out_dir = output_dir.value_or(lay.report_dir());

  RunManifest m;
  m.command = "verify";
  m.config_hash = config.hash();
  for (const auto& p : in) {
    m.inputs.push_back(check_input(p));
    if (&p != &in.front()) m.inputs.push_back(check_input(p.string() + ".json"));
  }
  const io::Dataset raw = io::read_dataset(in.front());
  const auto method = exact ? builder::ExactIndex::Method::BruteForce : builder::ExactIndex::Method::KdTree;

  VerifyResult res;
  res.all_passed = true;
  for (std::size_t i = 1; i < in.size(); ++i) {
    const builder::Osd osd = load_osd(in[i]);
    VerifyEntry e;
    e.label = in[i].stem().string();
    e.params = osd.params;
    e.verification = builder::verify_osd(osd, raw, std::numeric_limits<double>::infinity(), method);
    e.resolution = builder::measure_resolution(osd, raw, method);
    e.final_rejection_ratio = osd.stats.current_ratio();
    res.all_passed = res.all_passed && e.verification.passed;
    res.entries.push_back(std::move(e));
  }

  const fs::path txt = out_dir / "verify.txt", tsv = out_dir / "table.tsv";
  {
    auto o = open_text(txt);
    o << fmt::format("{:<22} {:>10} {:>8} {:>10} {:>12} {:>10} {:>10} {:>8} {:>6}\n", "cell", "N_d", "viol_ii",
                     "coverage", "min_pair", "mean_us", "max_us", "reject", "pass");
    for (const auto& e : res.entries) {
      const auto& v = e.verification;
      o << fmt::format("{:<22} {:>10} {:>8} {:>10.6f} {:>12.6g} {:>10.4g} {:>10.4g} {:>8.4f} {:>6}\n", e.label, v.n_d,
                       v.condition_ii_violations, v.coverage, v.min_pair_cost, e.resolution.mean_us,
                       e.resolution.max_us, e.final_rejection_ratio, v.passed ? "yes" : "no");
    }
    close_text(o, txt);
  }
  {
    auto o = open_text(tsv);
    o << "label\tj_star\ts_u\tn_d\tcondition_ii_violations\tmin_pair_cost\tcovered\tcoverage\tmax_uncovered_cost"
         "\tbuild_u_s\trecomputed_u_s\tmean_us\tmax_us\tfinal_rejection_ratio\tpassed\n";
    for (const auto& e : res.entries) {
      const auto& v = e.verification;
      o << e.label << '\t' << fmt_double(e.params.j_star) << '\t' << fmt_double(e.params.s_u) << '\t' << v.n_d << '\t'
        << v.condition_ii_violations << '\t' << fmt_double(v.min_pair_cost) << '\t' << v.covered << '\t'
        << fmt_double(v.coverage) << '\t' << fmt_double(v.max_uncovered_cost) << '\t' << fmt_double(v.build_time_us)
        << '\t' << fmt_double(v.recomputed_us) << '\t' << fmt_double(e.resolution.mean_us) << '\t'
        << fmt_double(e.resolution.max_us) << '\t' << fmt_double(e.final_rejection_ratio) << '\t' << v.passed
        << '\n';
    }
    close_text(o, tsv);
  }
  m.outputs.push_back(seal_output(txt));
  m.outputs.push_back(seal_output(tsv));
  m.wall_seconds = seconds_since(t0);
  m.summary = {{"all_passed", res.all_passed}, {"osds", res.entries.size()}, {"exact_scan", exact}};
  m.write(lay.manifest_dir() / "verify.json");
  if (!res.all_passed) throw InvariantViolation("verify: at least one OSD failed verification (see " + txt.string() + ")");
  return res;
}

TrainResult cmd_train(const PipelineConfig& config, const std::vector<fs::path>& inputs,
                      const std::optional<fs::path>& output_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const Layout lay{config.work_dir};
  std::vector<fs::path> in = inputs;
  if (in.empty()) {
    for (const auto& [j, s] : config.evaluation.train_cells) in.push_back(lay.osd_file(j, s));
    if (config.evaluation.train_raw) in.push_back(lay.raw());
  }
  require(!in.empty(), "train: no training inputs");
  const fs::path out_dir = output_dir.value_or(lay.net_dir());
  fs::create_directories(out_dir);

  RunManifest m;
  m.command = "train";
  m.config_hash = config.hash();
  TrainResult res;
  json nets = json::array();
  for (const auto& p : in) {
    m.inputs.push_back(check_input(p));
    const io::Dataset data = io::read_dataset(p);
    const std::string label = p.stem().string();
    const auto tt = std::chrono::steady_clock::now();
    const auto tr = neural::train(config.net, data, config.train);
    const double secs = seconds_since(tt);
    const fs::path w = out_dir / (label + ".nnw");
    neural::save_weights(w, tr.spec, tr.params);
    const fs::path log = out_dir / (label + ".log.tsv");
    {
      auto o = open_text(log);
      o << "step\ttrain_loss\tval_loss\tlearning_rate\n";
      for (const auto& e : tr.log.entries)
        o << e.step << '\t' << fmt_double(e.train_loss) << '\t' << fmt_double(e.val_loss) << '\t'
          << fmt_double(e.learning_rate) << '\n';
      close_text(o, log);
    }
    const fs::path side = w.string() + ".json";
    {
      auto o = open_text(side);
      o << json{{"steps", tr.log.steps},
                {"best_step", tr.log.best_step},
                {"best_val_loss", tr.log.best_val_loss},
                {"train_size", tr.log.train_size},
                {"val_size", tr.log.val_size},
                {"seed", config.train.seed},
                {"config_hash", m.config_hash}}
               .dump()
        << '\n';
      close_text(o, side);
    }
    m.outputs.push_back(seal_output(w));
    m.outputs.push_back(seal_output(log));
    m.outputs.push_back(seal_output(side));
    nets.push_back({{"label", label}, {"steps", tr.log.steps}, {"best_val_loss", tr.log.best_val_loss},
                    {"train_seconds", secs}});
    res.entries.push_back({label, w, tr.log});
  }
  m.wall_seconds = seconds_since(t0);
  m.summary = {{"nets", nets}};
  m.write(lay.manifest_dir() / "train.json");
  return res;
}

EvaluateResult cmd_evaluate(const PipelineConfig& config, const std::vector<fs::path>& inputs,
                            const std::optional<fs::path>& output_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const Layout lay{config.work_dir};
  std::vector<fs::path> in = inputs;
  if (in.empty()) {
    in.push_back(lay.test_osd());
    for (const auto& [j, s] : config.evaluation.train_cells) in.push_back(lay.net_dir() / (cell_label(j, s) + ".nnw"));
    if (config.evaluation.train_raw) in.push_back(lay.net_dir() / "raw.nnw");
  }
  require(in.size() >= 2, "evaluate: expects the test OSD followed by one or more weights files");
  const fs::path out_dir = output_dir.value_or(lay.report_dir());
  fs::create_directories(out_dir);

  RunManifest m;
  m.command = "evaluate";
  m.config_hash = config.hash();
  for (const auto& p : in) m.inputs.push_back(check_input(p));
  const io::Dataset test = io::read_dataset(in.front());
  require(test.size() > 0, "evaluate: empty test set");
  const auto opt = report_options(config);

  EvaluateResult res;
  res.test_size = test.size();
  res.budget_parity = true;
  std::optional<std::pair<neural::NetSpec, neural::NetParams>> first_net;
  for (std::size_t i = 1; i < in.size(); ++i) {
    auto [spec, params] = neural::load_weights(in[i]);
    EvaluateEntry e;
    e.label = in[i].stem().string();
    e.errors = eval::nn_error_report(spec, params, test, opt);
    const fs::path side = in[i].string() + ".json";
    if (fs::exists(side)) {
      m.inputs.push_back(check_input(side));
      std::ifstream s(side);
      e.steps = json::parse(s).at("steps").get<long>();
    }
    if (i == 1) first_net.emplace(spec, params);
    else res.budget_parity = res.budget_parity && e.steps == res.entries.front().steps;
    const fs::path rep = out_dir / (e.label + ".errors.txt"), bins = out_dir / (e.label + ".bins.tsv");
    {
      auto o = open_text(rep);
      eval::write_error_report(o, e.errors);
      close_text(o, rep);
    }
    eval::write_error_bins_tsv(bins, e.errors);
    res.reports.push_back(rep);
    res.reports.push_back(bins);
    res.entries.push_back(std::move(e));
  }

  // Recomputation audit of the stored actions.
  const mpc::Controller controller(glucose::nominal_model(config.campaign.nominal), config.campaign.mpc);
  res.audit = eval::audit_actions(test, controller, config.evaluation.audit_fraction, config.seeds.audit);

  // Footprint against the controller's QP, timed on the leading test states.
  io::Dataset timing;
  const auto n_time = static_cast<Eigen::Index>(std::min(config.evaluation.timing_states, test.size()));
  timing.X = test.X.topRows(n_time);
  timing.u = test.u.head(n_time);
  res.footprint = eval::footprint_comparison(first_net->first, first_net->second, controller, timing);

  const EvaluateEntry* raw = nullptr;
  for (const auto& e : res.entries)
    if (e.label == "raw") raw = &e;

  const fs::path cmp = out_dir / "comparison.txt";
  {
    auto o = open_text(cmp);
    o << fmt::format("test records {}\nequal step budgets {}\naudit {} of {} actions reproduced\n\n", res.test_size,
                     res.budget_parity ? "yes" : "no", res.audit.checked - res.audit.mismatches, res.audit.checked);
    o << fmt::format("{:<22} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n", "net", "steps", "mean", "median",
                     "p95", "max", "p95/raw", "max/raw");
    for (const auto& e : res.entries) {
      const double rp = raw ? e.errors.p95 / raw->errors.p95 : std::numeric_limits<double>::quiet_NaN();
      const double rm = raw ? e.errors.max / raw->errors.max : std::numeric_limits<double>::quiet_NaN();
      o << fmt::format("{:<22} {:>8} {:>10.4g} {:>10.4g} {:>10.4g} {:>10.4g} {:>10.3f} {:>10.3f}\n", e.label, e.steps,
                       e.errors.mean, e.errors.median, e.errors.p95, e.errors.max, rp, rm);
    }
    close_text(o, cmp);
  }
  const fs::path fp = out_dir / "footprint.txt";
  {
    // Timings vary from run to run and go to the manifest only.
    auto o = open_text(fp);
    const auto& f = res.footprint;
    o << fmt::format(
        "nn parameters {}\nnn parameter bytes {}\nnn weights file bytes {}\nnn peak ram bytes {}\nnn matmuls {}\n"
        "qp variables {}\nqp constraints {}\nkkt dimension {}\nqp ram bytes {}\n",
        f.nn.parameter_count, f.nn.param_bytes, f.nn.file_bytes, f.nn.peak_ram_bytes, f.nn.matmul_count,
        f.qp_variables, f.qp_constraints, f.kkt_dimension, f.qp_ram_bytes);
    close_text(o, fp);
  }
  res.reports.push_back(cmp);
  res.reports.push_back(fp);
  for (const auto& r : res.reports) m.outputs.push_back(seal_output(r));

  json nets = json::array();
  for (const auto& e : res.entries)
    nets.push_back({{"label", e.label}, {"mean", e.errors.mean}, {"p95", e.errors.p95}, {"max", e.errors.max}});
  m.wall_seconds = seconds_since(t0);
  m.summary = {{"nets", nets},
               {"budget_parity", res.budget_parity},
               {"audit_checked", res.audit.checked},
               {"audit_mismatches", res.audit.mismatches},
               {"mpc_seconds_per_call", res.footprint.mpc_seconds_per_call},
               {"nn_seconds_per_call", res.footprint.nn_seconds_per_call},
               {"mpc_nn_time_ratio", res.footprint.time_ratio}};
  m.write(lay.manifest_dir() / "evaluate.json");
  if (!res.audit.passed())
    throw InvariantViolation(fmt::format("evaluate: {} of {} audited actions differ from the controller",
                                         res.audit.mismatches, res.audit.checked));
  return res;
}

}  // namespace osd::pipeline
