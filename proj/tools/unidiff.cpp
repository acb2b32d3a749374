// unidiff command-line tool. Every subcommand resolves its full
// configuration, runs, and writes a manifest with SHA-256 hashes of what it
// read and wrote. Exit codes: 0 success, 1 runtime failure, 2 bad
// configuration or usage.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "unidiff/applications.hpp"
#include "unidiff/checkpoint.hpp"
#include "unidiff/eval.hpp"
#include "unidiff/gradcheck.hpp"
#include "unidiff/oracle.hpp"
#include "unidiff/sampling.hpp"
#include "unidiff/training.hpp"
#include "unidiff/uds.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unidiff;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// What a run read and wrote. Hashes are taken when the manifest is written,
// after all outputs are closed.
struct Manifest {
  std::string command;
  json config = json::object();
  std::vector<fs::path> inputs, outputs;
  json summary = json::object();

  void add_uds_input(const fs::path& p) {
    inputs.push_back(p);
    inputs.push_back(p.string() + ".bin");
  }
  void add_uds_output(const fs::path& p) {
    outputs.push_back(p);
    outputs.push_back(p.string() + ".bin");
  }

  void write(const fs::path& where, const std::vector<std::string>& argv) const {
    json m{{"tool", "unidiff"}, {"version", kVersion}, {"command", command}, {"argv", argv}, {"config", config}};
    auto hashes = [](const std::vector<fs::path>& paths) {
      json h = json::object();
      for (const auto& p : paths) h[p.generic_string()] = sha256_file(p);
      return h;
    };
    m["inputs"] = hashes(inputs);
    m["outputs"] = hashes(outputs);
    m["summary"] = summary;
    if (where.has_parent_path()) fs::create_directories(where.parent_path());
    std::ofstream os(where);
    if (!os) throw std::runtime_error("cannot write " + where.string());
    os << m.dump(2) << "\n";
  }
};

json load_json(const fs::path& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw ConfigError(field, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(field, path.string() + " is not valid JSON: " + e.what());
  }
}

NoiseSchedule resolve_schedule(const std::string& s) {
  if (s == "toy") return toy_schedule();
  if (s == "default") return default_schedule();
  return NoiseSchedule::from_json(load_json(s, "schedule"));
}

DistributionSpec resolve_spec(const std::string& s, const std::string& field) {
  if (s == "benchmark") return benchmark_spec();
  try {
    return DistributionSpec::from_json(load_json(s, field));
  } catch (const ConfigError& e) {
    throw ConfigError(field + "." + e.field(), e.what());
  }
}

// Comma/whitespace separated numbers, given inline or as a file path.
Vec parse_vector(const std::string& text, const std::string& field) {
  std::string body = text;
  if (fs::exists(text)) {
    std::ifstream in(text);
    body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  std::replace(body.begin(), body.end(), ',', ' ');
  std::istringstream is(body);
  std::vector<double> v;
  std::string tok;
  while (is >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError(field, "cannot parse '" + tok + "' as a number");
    }
  }
  if (v.empty()) throw ConfigError(field, "no values");
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<int> parse_ints(const std::string& text, const std::string& field) {
  const Vec v = parse_vector(text, field);
  std::vector<int> out;
  for (double d : v) {
    if (d != std::floor(d)) throw ConfigError(field, "expected integers");
    out.push_back(static_cast<int>(d));
  }
  return out;
}

json to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

void write_csv_row(std::ostream& os, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << v(i);
}

// Where a model comes from: a trained checkpoint or the exact oracle.
struct ModelSource {
  std::string ckpt;
  std::string oracle_spec;
  std::string schedule = "toy";

  void add_options(CLI::App* cmd) {
    auto* c = cmd->add_option("--ckpt", ckpt, "Checkpoint directory");
    auto* o = cmd->add_option("--oracle-spec", oracle_spec, "Use the exact oracle for this spec (file or 'benchmark')");
    c->excludes(o);
    cmd->add_option("--schedule", schedule, "Oracle schedule: toy, default or a JSON file")->capture_default_str();
  }

  struct Loaded {
    std::unique_ptr<EpsModel> model;
    json spec;
  };

  Loaded load(Manifest& man) const {
    if (ckpt.empty() == oracle_spec.empty()) throw ConfigError("model", "give exactly one of --ckpt or --oracle-spec");
    Loaded out;
    if (!ckpt.empty()) {
      const auto ck = load_checkpoint(ckpt);
      out.spec = ck.spec;
      out.model = std::make_unique<NetworkEps>(ck);
      man.inputs.push_back(fs::path(ckpt) / "checkpoint.json");
      man.inputs.push_back(fs::path(ckpt) / "params.f32");
      man.config["model"] = {{"ckpt", ckpt}};
    } else {
      const auto spec = resolve_spec(oracle_spec, "oracle_spec");
      const auto sched = resolve_schedule(schedule);
      out.spec = spec.to_json();
      out.model = std::make_unique<OracleEps>(OracleModel(spec, sched));
      if (fs::exists(oracle_spec)) man.inputs.push_back(oracle_spec);
      if (fs::exists(schedule)) man.inputs.push_back(schedule);
      man.config["model"] = {{"oracle_spec", out.spec}, {"schedule", sched.to_json()}};
    }
    return out;
  }
};

fs::path sidecar(const fs::path& out) { return out.string() + ".manifest.json"; }

// ---------------------------------------------------------------- gen-data

struct GenDataCmd {
  std::string spec, out;
  std::size_t n = 0;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen-data", "Sample a paired dataset from a distribution spec");
    c->add_option("--spec", spec, "Spec JSON file or 'benchmark'")->required();
    c->add_option("--n", n, "Number of records")->required();
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--out", out, "Output UDS path")->required();
  }

  Manifest run() const {
    Manifest man{"gen-data"};
    const auto s = resolve_spec(spec, "spec");
    if (n < 1) throw ConfigError("n", "must be >= 1");
    if (fs::exists(spec)) man.inputs.push_back(spec);
    write_uds(out, sample_dataset(s, n, seed), s.to_json(), seed);
    man.config = {{"spec", s.to_json()}, {"n", n}, {"seed", seed}, {"out", out}};
    man.add_uds_output(out);
    return man;
  }
};

// ------------------------------------------------------------------- train

struct TrainCmd {
  std::string data, spec, config, backbone, schedule = "toy", out;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train the joint noise-prediction network");
    auto* d = c->add_option("--data", data, "Training data (UDS)");
    auto* s = c->add_option("--spec", spec, "Train on fresh draws from this spec instead (file or 'benchmark')");
    d->excludes(s);
    c->add_option("--config", config, "Training config JSON");
    c->add_option("--backbone", backbone, "Backbone config JSON");
    c->add_option("--schedule", schedule, "toy, default or a schedule JSON file")->capture_default_str();
    c->add_option("--seed", seed, "Overrides the config seed");
    c->add_option("--steps", steps, "Overrides the config step count");
    c->add_option("--out", out, "Checkpoint directory")->required();
  }

  Manifest run() const {
    Manifest man{"train"};
    if (data.empty() == spec.empty()) throw ConfigError("data", "give exactly one of --data or --spec");
    const auto sched = resolve_schedule(schedule);
    if (fs::exists(schedule)) man.inputs.push_back(schedule);

    TrainConfig cfg;
    if (!config.empty()) {
      cfg = TrainConfig::from_json(load_json(config, "config"));
      man.inputs.push_back(config);
    }
    if (seed) cfg.seed = *seed;
    if (steps) cfg.steps = *steps;
    cfg.validate();

    TrainData td;
    if (!data.empty()) {
      auto f = read_uds(data);
      man.add_uds_input(data);
      if (f.data.d_x() == 0 || f.data.d_y() == 0) throw ConfigError("data", "training data needs both modalities");
      if (!f.spec.is_null()) td.spec = DistributionSpec::from_json(f.spec);
      td.dataset = std::move(f.data);
    } else {
      td.spec = resolve_spec(spec, "spec");
      if (fs::exists(spec)) man.inputs.push_back(spec);
    }

    json bj = json::object();
    if (!backbone.empty()) {
      bj = load_json(backbone, "backbone");
      man.inputs.push_back(backbone);
    }
    if (!bj.contains("d_x")) bj["d_x"] = td.dataset ? td.dataset->d_x() : td.spec->d_x;
    if (!bj.contains("d_y")) bj["d_y"] = td.dataset ? td.dataset->d_y() : td.spec->d_y;
    if (!bj.contains("timesteps")) bj["timesteps"] = sched.T();
    const auto bcfg = BackboneConfig::from_json(bj);

    TrainHooks hooks;
    hooks.out_dir = fs::path(out);
    fs::create_directories(out);
    hooks.on_eval = [&](const LossRecord& r) {
      std::cerr << "step " << r.step << " loss " << r.loss;
      if (r.oracle_gap) std::cerr << " oracle_gap " << *r.oracle_gap;
      std::cerr << "\n";
    };
    const auto res = train(cfg, td, bcfg, sched, hooks);

    man.config = {{"train", cfg.to_json()},
                  {"backbone", bcfg.to_json()},
                  {"schedule", sched.to_json()},
                  {"data", data.empty() ? json(nullptr) : json(data)},
                  {"spec", td.spec ? td.spec->to_json() : json(nullptr)},
                  {"out", out}};
    man.outputs = {fs::path(out) / "checkpoint.json", fs::path(out) / "params.f32", fs::path(out) / "loss.csv"};
    const auto& last = res.curve.back();
    man.summary = {{"steps", res.steps_done},
                   {"parameters", res.params.size()},
                   {"forward_calls", res.calls.forward},
                   {"backward_calls", res.calls.backward},
                   {"final_loss", last.loss},
                   {"final_oracle_gap", last.oracle_gap ? json(*last.oracle_gap) : json(nullptr)}};
    return man;
  }
};

// ------------------------------------------------------------------ sample

struct SampleCmd {
  ModelSource source;
  std::string task = "joint", sampler = "ancestral", sigma = "large", condition, out;
  double s = 0.0;
  int steps = 50, n = 1000, order = 2;
  std::uint64_t seed = 0;
  bool freeze = false;
  std::optional<std::uint64_t> filler_seed;
  double clip_x0 = 0.0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("sample", "Generate samples for one of the five tasks");
    source.add_options(c);
    c->add_option("--task", task, "joint | x | y | x-given-y | y-given-x")->capture_default_str();
    c->add_option("--condition", condition, "Condition values (comma separated) or a file");
    c->add_option("--s", s, "Guidance scale")->capture_default_str();
    c->add_option("--steps", steps, "Reverse steps")->capture_default_str();
    c->add_option("--n", n, "Number of samples")->capture_default_str();
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--sampler", sampler, "ancestral | deterministic")->capture_default_str();
    c->add_option("--sigma", sigma, "Ancestral noise: large | posterior")->capture_default_str();
    c->add_option("--order", order, "Deterministic solver order (1 or 2)")->capture_default_str();
    c->add_flag("--freeze-fillers", freeze, "Draw marginalisation fillers once per trajectory");
    c->add_option("--filler-seed", filler_seed, "Separate seed for the filler stream");
    c->add_option("--clip-x0", clip_x0, "Clamp the implied clean sample to +-this (0 = off)")->capture_default_str();
    c->add_option("--out", out, "Output UDS path")->required();
  }

  Manifest run() const {
    Manifest man{"sample"};
    const auto m = source.load(man);
    json rj{{"task", task},     {"guidance_scale", s}, {"sampler", sampler}, {"steps", steps},
            {"seed", seed},     {"n", n},              {"sigma", sigma},     {"solver_order", order},
            {"freeze_fillers", freeze}, {"clip_x0", clip_x0}};
    if (!condition.empty()) rj["condition"] = to_json(parse_vector(condition, "condition"));
    if (filler_seed) rj["filler_seed"] = *filler_seed;
    const auto req = SampleRequest::from_json(rj);
    const auto out_s = generate(*m.model, req);
    write_uds(out, Dataset{out_s.x, out_s.y}, m.spec, seed, {{"task", to_string(req.task)}, {"request", req.to_json()}});
    man.config["request"] = req.to_json();
    man.config["out"] = out;
    man.add_uds_output(out);
    return man;
  }
};

// -------------------------------------------------------------------- eval

Mat reference_samples(const DistributionSpec& spec, Task task, const std::optional<Vec>& cond, std::size_t n,
                      std::uint64_t seed) {
  if (!is_conditional(task)) {
    const auto d = sample_dataset(spec, n, seed);
    if (task == Task::Joint) return d.joined();
    return task == Task::MarginalX ? d.x : d.y;
  }
  const auto law = conditional(spec, task == Task::XGivenY ? Modality::X : Modality::Y, *cond);
  Rng rng = make_rng(seed, 0xc0d, 0);
  Mat out(static_cast<Eigen::Index>(n), law.dim);
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = law.sample(rng).transpose();
  return out;
}

struct EvalCmd {
  std::string samples, spec, task, condition, out;
  std::size_t reference_n = 10000, max_per_side = 2500;
  int permutations = 200;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "Compare samples with the ground-truth distribution");
    c->add_option("--samples", samples, "Samples (UDS)")->required();
    c->add_option("--spec", spec, "Ground-truth spec; defaults to the one recorded in the samples");
    c->add_option("--task", task, "Task the samples answer; defaults to the recorded task");
    c->add_option("--condition", condition, "Condition for conditional tasks; defaults to the recorded one");
    c->add_option("--reference-n", reference_n, "Ground-truth draws for the two-sample test")->capture_default_str();
    c->add_option("--permutations", permutations, "Permutations for the p-value")->capture_default_str();
    c->add_option("--max-per-side", max_per_side, "Subsample cap per side for the energy test (0 = none)")
        ->capture_default_str();
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--out", out, "Report JSON path")->required();
  }

  Manifest run() const {
    Manifest man{"eval"};
    const auto f = read_uds(samples);
    man.add_uds_input(samples);
    DistributionSpec sp;
    if (!spec.empty()) {
      sp = resolve_spec(spec, "spec");
      if (fs::exists(spec)) man.inputs.push_back(spec);
    } else if (!f.spec.is_null()) {
      sp = DistributionSpec::from_json(f.spec);
    } else {
      throw ConfigError("spec", "samples carry no spec; pass --spec");
    }
    const json req = f.extra.value("request", json::object());
    const Task t = parse_task(!task.empty() ? task : f.extra.value("task", std::string("joint")));
    std::optional<Vec> cond;
    if (!condition.empty()) {
      cond = parse_vector(condition, "condition");
    } else if (req.contains("condition") && !req["condition"].is_null()) {
      const auto v = req["condition"].get<std::vector<double>>();
      cond = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    if (is_conditional(t) && !cond) throw ConfigError("condition", "required for a conditional task");

    Mat x;
    switch (t) {
      case Task::Joint: x = f.data.joined(); break;
      case Task::MarginalX:
      case Task::XGivenY: x = f.data.x; break;
      case Task::MarginalY:
      case Task::YGivenX: x = f.data.y; break;
    }
    const auto [mean, cov] = task_moments(sp, t, cond);
    if (x.cols() != mean.size()) throw ConfigError("samples", "dimension does not match the task");
    const auto moments = moment_report(x, mean, cov);
    const Mat ref = reference_samples(sp, t, cond, reference_n, seed);
    const auto et = energy_distance(x, ref, permutations, seed, max_per_side);
    const Vec smean = x.colwise().mean().transpose();
    const Mat centred = x.rowwise() - smean.transpose();
    const Mat scov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
    double w2 = std::numeric_limits<double>::quiet_NaN();
    try {
      w2 = gaussian_w2(smean, scov, mean, cov);
    } catch (const std::exception&) {
      // Degenerate sample covariance; the moment report still stands.
    }

    json report{{"task", to_string(t)},
                {"condition", cond ? to_json(*cond) : json(nullptr)},
                {"moments", moments.to_json()},
                {"energy",
                 {{"statistic", et.statistic},
                  {"p_value", et.p_value},
                  {"permutations", et.permutations},
                  {"n_samples", et.n_a},
                  {"n_reference", et.n_b},
                  {"rejected_at_0.01", et.p_value < 0.01}}},
                {"gaussian_w2_squared", std::isfinite(w2) ? json(w2) : json(nullptr)}};
    {
      std::ofstream os(out);
      if (!os) throw std::runtime_error("cannot write " + out);
      os << report.dump(2) << "\n";
    }
    std::cout << report.dump(2) << "\n";
    man.config = {{"samples", samples},   {"spec", sp.to_json()},
                  {"task", to_string(t)}, {"condition", cond ? to_json(*cond) : json(nullptr)},
                  {"reference_n", reference_n}, {"permutations", permutations},
                  {"max_per_side", max_per_side}, {"seed", seed}, {"out", out}};
    man.outputs.push_back(out);
    return man;
  }
};

// ------------------------------------------------------------- interpolate

struct InterpolateCmd {
  ModelSource source;
  std::string a, b, thetas = "0,0.25,0.5,0.75,1", out;
  double s = 0.0;
  int steps = 50, order = 2;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("interpolate", "Interpolate between two x-modality latents");
    source.add_options(c);
    c->add_option("--a", a, "First endpoint (values or file)")->required();
    c->add_option("--b", b, "Second endpoint (values or file)")->required();
    c->add_option("--thetas", thetas, "Interpolation weights in [0, 1]")->capture_default_str();
    c->add_option("--s", s, "Guidance scale for every solve")->capture_default_str();
    c->add_option("--steps", steps, "Solver steps")->capture_default_str();
    c->add_option("--order", order, "Solver order (1 or 2)")->capture_default_str();
    c->add_option("--seed", seed, "Seed for the shared y_T draw")->capture_default_str();
    c->add_option("--out", out, "Output CSV path")->required();
  }

  Manifest run() const {
    Manifest man{"interpolate"};
    const auto m = source.load(man);
    InterpolationRequest req;
    req.endpoint_a = parse_vector(a, "a");
    req.endpoint_b = parse_vector(b, "b");
    req.guidance_scale = s;
    req.steps = steps;
    req.seed = seed;
    req.solver_order = order;
    if (steps < 1 || steps > m.model->schedule().T()) throw ConfigError("steps", "must lie in 1..T");
    const Vec th = parse_vector(thetas, "thetas");
    for (double t : th)
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thetas", "must lie in [0, 1]");
    for (const auto& p : {a, b})
      if (fs::exists(p)) man.inputs.push_back(p);

    const auto path = prepare_interpolation(*m.model, req);
    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << std::setprecision(17) << "theta";
    for (int i = 0; i < m.model->d_x(); ++i) os << ",x" << i;
    os << "\n";
    for (double t : th) {
      os << t;
      write_csv_row(os, interpolate_at(*m.model, req, path, t));
      os << "\n";
    }
    os.close();
    man.config["request"] = {{"a", to_json(req.endpoint_a)}, {"b", to_json(req.endpoint_b)}, {"thetas", to_json(th)},
                             {"s", s},   {"steps", steps}, {"order", order}, {"seed", seed}};
    man.config["out"] = out;
    man.outputs.push_back(out);
    return man;
  }
};

// ------------------------------------------------------------------- gibbs

struct GibbsCmd {
  ModelSource source;
  std::string init, out;
  int rounds = 0, chains = 100, steps = 50;
  double s = 0.0;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gibbs", "Run blocked Gibbs chains between the two conditionals");
    source.add_options(c);
    c->add_option("--rounds", rounds, "Gibbs rounds")->required();
    c->add_option("--chains", chains, "Number of chains when no --init is given")->capture_default_str();
    c->add_option("--init", init, "Initial x states (UDS); default standard-normal draws");
    c->add_option("--s", s, "Guidance scale")->capture_default_str();
    c->add_option("--steps", steps, "Reverse steps per conditional draw")->capture_default_str();
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--out", out, "Output CSV path (chain, index, modality, values)")->required();
  }

  Manifest run() const {
    Manifest man{"gibbs"};
    const auto m = source.load(man);
    Mat x0;
    if (!init.empty()) {
      x0 = read_uds(init).data.x;
      man.add_uds_input(init);
    } else {
      if (chains < 1) throw ConfigError("chains", "must be >= 1");
      Rng rng = make_rng(seed, 0x1a17, 0);
      x0.resize(chains, m.model->d_x());
      fill_normal(rng, x0);
    }
    GibbsRequest req;
    req.rounds = rounds;
    req.guidance_scale = s;
    req.steps = steps;
    req.seed = seed;
    if (steps < 1 || steps > m.model->schedule().T()) throw ConfigError("steps", "must lie in 1..T");
    const auto traj = gibbs_chains(*m.model, x0, req);

    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << std::setprecision(17) << "chain,index,modality";
    const auto width = std::max(m.model->d_x(), m.model->d_y());
    for (int i = 0; i < width; ++i) os << ",v" << i;
    os << "\n";
    for (Eigen::Index c = 0; c < x0.rows(); ++c) {
      for (std::size_t k = 0; k < traj.size(); ++k) {
        os << c << ',' << k << ',' << (k % 2 == 0 ? 'x' : 'y');
        write_csv_row(os, traj[k].row(c).transpose());
        os << "\n";
      }
    }
    os.close();
    man.config["request"] = {{"rounds", rounds}, {"chains", x0.rows()}, {"init", init.empty() ? json(nullptr) : json(init)},
                             {"s", s}, {"steps", steps}, {"seed", seed}};
    man.config["out"] = out;
    man.outputs.push_back(out);
    man.summary = {{"trajectory_length", traj.size()}};
    return man;
  }
};

// ------------------------------------------------------------ oracle-check

struct OracleCheckCmd {
  std::string spec, schedule = "toy", grid = "0,12,25,37,50", out = "oracle_check.csv";
  std::size_t n = 1000000;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("oracle-check", "Cross-check the oracle against Monte Carlo on a (tx, ty) grid");
    c->add_option("--spec", spec, "Spec JSON file or 'benchmark'")->required();
    c->add_option("--schedule", schedule, "toy, default or a schedule JSON file")->capture_default_str();
    c->add_option("--grid", grid, "Timesteps used for both tx and ty")->capture_default_str();
    c->add_option("--n", n, "Monte Carlo draws per cell")->capture_default_str();
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--out", out, "Output CSV path")->capture_default_str();
  }

  Manifest run() const {
    Manifest man{"oracle-check"};
    const auto sp = resolve_spec(spec, "spec");
    const auto sched = resolve_schedule(schedule);
    const auto ts = parse_ints(grid, "grid");
    for (int t : ts)
      if (t < 0 || t > sched.T()) throw ConfigError("grid", "timesteps must lie in 0..T");
    if (n < 2) throw ConfigError("n", "must be >= 2");
    if (fs::exists(spec)) man.inputs.push_back(spec);
    if (fs::exists(schedule)) man.inputs.push_back(schedule);

    std::ofstream os(out);
    if (!os) throw std::runtime_error("cannot write " + out);
    os << std::setprecision(17) << "tx,ty,coord,oracle,monte_carlo,std_error,z\n";
    double worst = 0.0;
    for (const auto& r : oracle_check_grid(sp, sched, ts, n, seed)) {
      worst = std::max(worst, std::abs(r.z));
      os << r.tx << ',' << r.ty << ',' << r.coord << ',' << r.oracle << ',' << r.monte_carlo << ',' << r.std_error
         << ',' << r.z << "\n";
    }
    const std::size_t cell = ts.size() * ts.size();
    os.close();
    std::cout << "max |z| over " << cell << " cells: " << worst << "\n";
    man.config = {{"spec", sp.to_json()}, {"schedule", sched.to_json()}, {"grid", ts}, {"n", n}, {"seed", seed},
                  {"out", out}};
    man.outputs.push_back(out);
    man.summary = {{"max_abs_z", worst}};
    return man;
  }
};

// ---------------------------------------------------------------- gradcheck

struct GradcheckCmd {
  std::string backbone, out = "gradcheck.json";
  std::uint64_t seed = 0;
  int configs = 1;
  std::size_t max_params = 2000;
  double tol = 1e-4;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gradcheck", "Finite-difference check of the backbone gradients");
    c->add_option("--backbone", backbone, "Backbone config JSON; default random small configs");
    c->add_option("--seed", seed, "Seed")->capture_default_str();
    c->add_option("--configs", configs, "Random configs to check when no --backbone is given")->capture_default_str();
    c->add_option("--max-params", max_params, "Parameters checked per config (0 = all)")->capture_default_str();
    c->add_option("--out", out, "Report JSON path")->capture_default_str();
  }

  // Returns the manifest; exit status is decided by the caller from the
  // summary.
  Manifest run() const {
    Manifest man{"gradcheck"};
    std::vector<BackboneConfig> cfgs;
    if (!backbone.empty()) {
      cfgs.push_back(BackboneConfig::from_json(load_json(backbone, "backbone")));
      man.inputs.push_back(backbone);
    } else {
      if (configs < 1) throw ConfigError("configs", "must be >= 1");
      for (int i = 0; i < configs; ++i) cfgs.push_back(random_small_config(seed + static_cast<std::uint64_t>(i)));
    }
    json runs = json::array();
    double worst = 0.0;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      const auto r = gradient_check(cfgs[i], seed + i, max_params);
      worst = std::max(worst, r.max_rel_error);
      runs.push_back({{"backbone", cfgs[i].to_json()},
                      {"max_rel_error", r.max_rel_error},
                      {"checked", r.checked},
                      {"worst_param", r.worst_param}});
    }
    const json report{{"max_rel_error", worst}, {"tolerance", tol}, {"pass", worst <= tol}, {"runs", runs}};
    {
      std::ofstream os(out);
      if (!os) throw std::runtime_error("cannot write " + out);
      os << report.dump(2) << "\n";
    }
    std::cout << "max relative gradient error: " << worst << (worst <= tol ? " (pass)" : " (FAIL)") << "\n";
    man.config = {{"seed", seed}, {"configs", runs.size()}, {"max_params", max_params}, {"out", out}};
    man.outputs.push_back(out);
    man.summary = {{"max_rel_error", worst}, {"pass", worst <= tol}};
    return man;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unidiff: unified multimodal diffusion at desk scale"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenDataCmd gen;
  TrainCmd tr;
  SampleCmd sa;
  EvalCmd ev;
  InterpolateCmd in;
  GibbsCmd gi;
  OracleCheckCmd oc;
  GradcheckCmd gc;
  gen.add(app);
  tr.add(app);
  sa.add(app);
  ev.add(app);
  in.add(app);
  gi.add(app);
  oc.add(app);
  gc.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  const std::vector<std::string> args(argv, argv + argc);
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "gen-data") {
      gen.run().write(sidecar(gen.out), args);
    } else if (cmd == "train") {
      tr.run().write(fs::path(tr.out) / "manifest.json", args);
    } else if (cmd == "sample") {
      sa.run().write(sidecar(sa.out), args);
    } else if (cmd == "eval") {
      ev.run().write(sidecar(ev.out), args);
    } else if (cmd == "interpolate") {
      in.run().write(sidecar(in.out), args);
    } else if (cmd == "gibbs") {
      gi.run().write(sidecar(gi.out), args);
    } else if (cmd == "oracle-check") {
      oc.run().write(sidecar(oc.out), args);
    } else if (cmd == "gradcheck") {
      const auto man = gc.run();
      man.write(sidecar(gc.out), args);
      return man.summary.at("pass").get<bool>() ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error in '" << e.field() << "': " << std::string(e.what()).substr(e.field().size() + 2) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
